"""Shared containers, precision handling, memory accounting and validation.

Matrices are plain 2-D numpy arrays in row-major order. Hidden states are
always passed flattened to ``(N, d)`` with ``N = batch * seq_len``; nothing in
the package needs the batch/sequence factorisation.
"""

from __future__ import annotations

import enum
import math
import os
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Sequence, TypeVar

import numpy as np

from .errors import (
    DimensionMismatchError,
    InconsistentUpstreamError,
    TargetOutOfRangeError,
    UnderflowReleaseError,
)

T = TypeVar("T")


class Reduction(str, enum.Enum):
    MEAN = "mean"
    SUM = "sum"
    NONE = "none"


@dataclass(frozen=True)
class PrecisionMode:
    """Compute dtype for accumulation plus an optional bf16 storage emulation.

    Accumulators (running max, sum, loss, gradients) always use ``compute``.
    ``bf16_storage`` only affects how H and W elements are stored.
    """

    compute: type = np.float32
    bf16_storage: bool = False

    @classmethod
    def parse(cls, value: "PrecisionMode | str | None") -> "PrecisionMode":
        if value is None:
            return F32
        if isinstance(value, PrecisionMode):
            return value
        try:
            return _PRECISIONS[value.lower()]
        except KeyError:
            raise ValueError(
                f"unknown precision {value!r}; expected one of {sorted(_PRECISIONS)}"
            ) from None

    @property
    def itemsize(self) -> int:
        return np.dtype(self.compute).itemsize

    @property
    def name(self) -> str:
        if self.bf16_storage:
            return "bf16"
        return "f64" if self.compute is np.float64 else "f32"


F32 = PrecisionMode(np.float32)
F64 = PrecisionMode(np.float64)
BF16 = PrecisionMode(np.float32, bf16_storage=True)
_PRECISIONS = {"f32": F32, "f64": F64, "bf16": BF16}


def round_bf16(x):
    """Round to the nearest bfloat16 value (ties to even), returned as float32.

    Works on scalars and arrays. The input is first converted to float32, then
    the low 16 bits of the encoding are rounded away. NaN stays NaN.
    """
    arr = np.asarray(x, dtype=np.float32)
    bits = arr.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) & 0xFFFF0000).astype(np.uint32)
    out = rounded.view(np.float32)
    out = np.where(np.isnan(arr), arr, out)
    if np.ndim(x) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class TileConfig:
    """Cache-blocking sizes for the streaming kernels.

    ``vocab`` x ``hidden`` is the W tile consumed per dot-product step;
    ``rows`` is how many positions share one pass over W.
    """

    rows: int = 256
    vocab: int = 256
    hidden: int = 256

    def __post_init__(self):
        if min(self.rows, self.vocab, self.hidden) < 1:
            raise ValueError(f"tile sizes must be positive, got {self}")


DEFAULT_TILES = TileConfig()


class MemoryLedger:
    """Thread-safe byte counter for transient buffers.

    Only buffers an operation allocates for itself are charged (logits,
    statistics caches, scratch tiles, per-worker partials); inputs and
    returned outputs are not. ``peak_by_tag`` keeps the high-water mark of
    each tag independently.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current_bytes = 0
        self.peak_bytes = 0
        self._by_tag: dict[str, int] = defaultdict(int)
        self.peak_by_tag: dict[str, int] = defaultdict(int)

    def charge(self, nbytes: int, tag: str = "misc") -> None:
        if nbytes < 0:
            raise ValueError("cannot charge a negative byte count")
        with self._lock:
            self.current_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)
            self._by_tag[tag] += nbytes
            self.peak_by_tag[tag] = max(self.peak_by_tag[tag], self._by_tag[tag])

    def release(self, nbytes: int, tag: str = "misc") -> None:
        with self._lock:
            if nbytes > self.current_bytes or nbytes > self._by_tag[tag]:
                raise UnderflowReleaseError(
                    f"release of {nbytes} bytes exceeds current {self.current_bytes} "
                    f"(tag {tag!r} holds {self._by_tag[tag]})"
                )
            self.current_bytes -= nbytes
            self._by_tag[tag] -= nbytes

    @contextmanager
    def hold(self, nbytes: int, tag: str = "misc") -> Iterator[None]:
        self.charge(nbytes, tag)
        try:
            yield
        finally:
            self.release(nbytes, tag)

    def __repr__(self):
        return f"MemoryLedger(current_bytes={self.current_bytes}, peak_bytes={self.peak_bytes})"


@contextmanager
def _maybe_hold(ledger: MemoryLedger | None, nbytes: int, tag: str) -> Iterator[None]:
    if ledger is None:
        yield
    else:
        with ledger.hold(nbytes, tag):
            yield


class ProblemDims(NamedTuple):
    N: int
    d: int
    V: int


def validate_problem(H, W, Y, ignore_index: int | None = None) -> ProblemDims:
    """Check shapes of hidden states, weights and targets and return ``(N, d, V)``."""
    H = np.asarray(H)
    W = np.asarray(W)
    Y = np.asarray(Y)
    if H.ndim != 2 or W.ndim != 2:
        raise DimensionMismatchError(
            f"H and W must be 2-D, got H.ndim={H.ndim}, W.ndim={W.ndim}"
        )
    if Y.ndim != 1:
        raise DimensionMismatchError(f"targets must be 1-D, got shape {Y.shape}")
    N, d = H.shape
    V, dw = W.shape
    if dw != d:
        raise DimensionMismatchError(f"hidden size mismatch: H has {d} columns, W has {dw}")
    if Y.shape[0] != N:
        raise DimensionMismatchError(f"{Y.shape[0]} targets for {N} positions")
    if V < 1:
        raise DimensionMismatchError("vocabulary must be non-empty")
    if Y.size and not np.issubdtype(Y.dtype, np.integer):
        raise TargetOutOfRangeError(f"targets must be integers, got dtype {Y.dtype}")
    active = Y if ignore_index is None else Y[Y != ignore_index]
    if active.size and (active.min() < 0 or active.max() >= V):
        bad = active[(active < 0) | (active >= V)][0]
        raise TargetOutOfRangeError(f"target {int(bad)} outside [0, {V})")
    return ProblemDims(N, d, V)


class Problem(NamedTuple):
    H: np.ndarray
    W: np.ndarray
    targets: np.ndarray
    valid: np.ndarray
    dims: ProblemDims
    precision: PrecisionMode


def prepare(H, W, Y, precision=None, ignore_index: int | None = None) -> Problem:
    """Validate and convert inputs to contiguous compute-precision arrays.

    In bf16 mode the stored H and W elements are rounded once here; every
    later product reads the rounded values at compute precision.
    """
    mode = PrecisionMode.parse(precision)
    dims = validate_problem(H, W, Y, ignore_index)
    H = np.ascontiguousarray(H, dtype=mode.compute)
    W = np.ascontiguousarray(W, dtype=mode.compute)
    if mode.bf16_storage:
        H = round_bf16(H).astype(mode.compute)
        W = round_bf16(W).astype(mode.compute)
    Y = np.asarray(Y, dtype=np.int64)
    valid = np.ones(dims.N, dtype=bool) if ignore_index is None else Y != ignore_index
    return Problem(H, W, Y, valid, dims, mode)


def split_range(n: int, parts: int) -> list[tuple[int, int]]:
    """Split ``[0, n)`` into ``parts`` contiguous ranges, larger ranges first.

    The first ``n % parts`` ranges get ``ceil(n / parts)`` elements. Ranges may
    be empty when ``parts > n``.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    base, extra = divmod(n, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def default_workers() -> int:
    return os.cpu_count() or 1


def run_tasks(fn: Callable[[T], object], tasks: Sequence[T], workers: int | None = None) -> list:
    """Apply ``fn`` to every task, returning results in task order."""
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def tile_logits(h: np.ndarray, w: np.ndarray, hidden_tile: int) -> np.ndarray:
    """``h @ w.T`` accumulated over hidden-dimension chunks in ascending order."""
    d = h.shape[1]
    if d <= hidden_tile:
        return h @ w.T
    z = h[:, :hidden_tile] @ w[:, :hidden_tile].T
    for k in range(hidden_tile, d, hidden_tile):
        z += h[:, k : k + hidden_tile] @ w[:, k : k + hidden_tile].T
    return z


def reduce_losses(per_position: np.ndarray, valid: np.ndarray, reduction: Reduction):
    """Reduce per-position losses; ignored positions must already hold 0.

    MEAN divides by the number of non-ignored positions and is 0 when every
    position is ignored.
    """
    reduction = Reduction(reduction)
    if reduction is Reduction.NONE:
        return per_position
    total = per_position.sum(dtype=per_position.dtype)
    if reduction is Reduction.SUM:
        return float(total)
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        return 0.0
    return float(total / per_position.dtype.type(n_valid))


def position_scale(upstream, reduction: Reduction, valid: np.ndarray, dtype) -> np.ndarray:
    """Effective per-position upstream factor, zero at ignored positions."""
    reduction = Reduction(reduction)
    up = np.asarray(upstream, dtype=dtype)
    if reduction is Reduction.NONE:
        if up.shape != valid.shape:
            raise InconsistentUpstreamError(
                f"reduction 'none' needs a per-position upstream of shape {valid.shape}, "
                f"got {up.shape}"
            )
        return np.where(valid, up, 0).astype(dtype)
    if up.ndim != 0:
        raise InconsistentUpstreamError(
            f"reduction {reduction.value!r} needs a scalar upstream, got shape {up.shape}"
        )
    if not math.isfinite(float(up)):
        raise InconsistentUpstreamError("upstream gradient must be finite")
    scale = effective_gamma(float(up), reduction, int(np.count_nonzero(valid)))
    return np.where(valid, dtype(scale), dtype(0)).astype(dtype)


def effective_gamma(upstream: float, reduction: Reduction, n_valid: int) -> float:
    """Scalar upstream folded with the 1/N_valid factor of mean reduction."""
    reduction = Reduction(reduction)
    if reduction is Reduction.MEAN:
        return upstream / n_valid if n_valid else 0.0
    return upstream
