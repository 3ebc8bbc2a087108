"""Exception types raised across the package."""


class FusedCEError(ValueError):
    """Base class for all input and bookkeeping errors in fusedce."""


class DimensionMismatchError(FusedCEError):
    pass


class TargetOutOfRangeError(FusedCEError):
    pass


class UnderflowReleaseError(FusedCEError):
    """A ledger release asked for more bytes than are currently charged."""


class DuplicateTargetError(FusedCEError):
    """Two partial statistics both claim to hold the target logit."""


class MissingStatsError(FusedCEError):
    pass


class InconsistentUpstreamError(FusedCEError):
    pass


class UnsupportedReductionError(FusedCEError):
    pass


class InvalidLayoutError(FusedCEError):
    pass


class EmptyGridError(FusedCEError):
    pass


class EmptyInputError(FusedCEError):
    pass
