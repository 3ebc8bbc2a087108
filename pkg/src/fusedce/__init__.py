"""Fused output projection and cross-entropy without materialising logits.

The forward pass streams over vocabulary tiles and keeps three numbers per
position (running max, rescaled sum of exponentials, target logit). The
backward pass either recomputes logit tiles against those statistics or
reuses gradients accumulated during the forward pass.
"""

from .backward import (
    PartialGradients,
    PartialGradOutput,
    fused_backward_recompute,
    fused_forward_with_partial_grads,
    scale_partial_grads,
)
from .core import (
    BF16,
    F32,
    F64,
    MemoryLedger,
    PrecisionMode,
    Reduction,
    TileConfig,
    round_bf16,
)
from .errors import *  # noqa: F401,F403
from .forward import FusedOutput, WindowConfig, fused_forward, fused_forward_windowed
from .parallel import ParallelMode, ShardLayout, dp_step, sp_to_tp_gather, tp_backward, tp_forward
from .reference import reference_backward, reference_loss
from .stats import SoftmaxStats, merge_all, merge_stats, stream_stats

__version__ = "0.1.0"

__all__ = [
    "BF16", "F32", "F64", "FusedOutput", "MemoryLedger", "ParallelMode", "PartialGradOutput",
    "PartialGradients", "PrecisionMode", "Reduction", "ShardLayout", "SoftmaxStats", "TileConfig",
    "WindowConfig", "dp_step", "fused_backward_recompute", "fused_forward", "fused_forward_windowed",
    "fused_forward_with_partial_grads", "merge_all", "merge_stats", "reference_backward",
    "reference_loss", "round_bf16", "scale_partial_grads", "sp_to_tp_gather", "stream_stats",
    "tp_backward", "tp_forward",
]
