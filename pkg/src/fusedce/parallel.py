"""In-process simulation of data, tensor and sequence parallel execution.

Ranks are plain function calls (optionally on a thread pool). Everything a
rank publishes travels as an immutable :class:`RankPartial`; the cross-rank
epilogues reduce those in rank order, the way an all-reduce with a fixed
schedule would.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .backward import fused_backward_recompute, grads_from_stats
from .core import (
    DEFAULT_TILES,
    Reduction,
    TileConfig,
    position_scale,
    prepare,
    reduce_losses,
    run_tasks,
    split_range,
)
from .errors import InvalidLayoutError, MissingStatsError, UnsupportedReductionError
from .forward import FusedOutput, forward_stats, fused_forward
from .stats import SoftmaxStats, losses_from_stats, merge_all


class ParallelMode(str, enum.Enum):
    DP = "dp"
    TP = "tp"
    SP = "sp"


@dataclass(frozen=True)
class ShardLayout:
    """Per-rank contiguous ranges along the sharded axis.

    TP shards the vocabulary (rows of W), SP shards positions (rows of H).
    DP keeps one position range per replica.
    """

    mode: ParallelMode
    ranges: tuple[tuple[int, int], ...]

    @classmethod
    def even(cls, mode: ParallelMode | str, length: int, ranks: int) -> "ShardLayout":
        """Ceil-first split: the first ``length % ranks`` ranks get one extra element."""
        if ranks < 1:
            raise InvalidLayoutError(f"need at least one rank, got {ranks}")
        layout = cls(ParallelMode(mode), tuple(split_range(length, ranks)))
        layout.validate(length)
        return layout

    @property
    def ranks(self) -> int:
        return len(self.ranges)

    def validate(self, length: int) -> None:
        if not self.ranges:
            raise InvalidLayoutError("layout has no ranks")
        expected = 0
        for rank, (lo, hi) in enumerate(self.ranges):
            if hi <= lo:
                raise InvalidLayoutError(f"rank {rank} has empty range [{lo}, {hi})")
            if lo != expected:
                kind = "overlap" if lo < expected else "gap"
                raise InvalidLayoutError(f"{kind} before rank {rank}: starts at {lo}, expected {expected}")
            expected = hi
        if expected != length:
            raise InvalidLayoutError(f"ranges cover [0, {expected}) but the axis has length {length}")


@dataclass(frozen=True)
class RankPartial:
    """What one rank publishes to the epilogue."""

    rank: int
    stats: SoftmaxStats | None = None
    dH: np.ndarray | None = None
    dW: np.ndarray | None = None


def shard(X, layout: ShardLayout) -> list[np.ndarray]:
    """Row views of ``X`` for each rank (W for TP, H for SP and DP)."""
    X = np.asarray(X)
    layout.validate(X.shape[0])
    return [X[lo:hi] for lo, hi in layout.ranges]


def _tp_layout(W_shards: list[np.ndarray]) -> ShardLayout:
    bounds, lo = [], 0
    for w in W_shards:
        bounds.append((lo, lo + w.shape[0]))
        lo += w.shape[0]
    layout = ShardLayout(ParallelMode.TP, tuple(bounds))
    layout.validate(lo)
    return layout


def _shard_targets(prob, lo: int, hi: int) -> np.ndarray:
    owned = prob.valid & (prob.targets >= lo) & (prob.targets < hi)
    return np.where(owned, prob.targets - lo, -1)


def tp_partials(
    H, W_shards, Y, precision=None, *, ignore_index=None, tiles: TileConfig = DEFAULT_TILES,
    workers: int | None = None,
) -> list[RankPartial]:
    """Each rank's statistics over its own vocabulary slice."""
    layout = _tp_layout(W_shards)
    W_full = np.concatenate([np.asarray(w) for w in W_shards])
    prob = prepare(H, W_full, Y, precision, ignore_index)

    def rank_fn(rank):
        lo, hi = layout.ranges[rank]
        y_local = _shard_targets(prob, lo, hi)
        st = forward_stats(prob.H, prob.W[lo:hi], y_local, tiles=tiles, workers=1)
        return RankPartial(rank, stats=st)

    return run_tasks(rank_fn, list(range(layout.ranks)), workers)


def tp_forward(
    H, W_shards, Y, reduction=Reduction.MEAN, precision=None, *, ignore_index=None,
    tiles: TileConfig = DEFAULT_TILES, workers: int | None = None,
) -> FusedOutput:
    """Vocabulary-sharded forward: local stats per rank, merged in rank order.

    Raises DuplicateTargetError if two ranks both see a position's target.
    """
    partials = tp_partials(
        H, W_shards, Y, precision, ignore_index=ignore_index, tiles=tiles, workers=workers
    )
    W_full = np.concatenate([np.asarray(w) for w in W_shards])
    prob = prepare(H, W_full, Y, precision, ignore_index)
    merged = merge_all([p.stats for p in partials])
    reduction = Reduction(reduction)
    loss = reduce_losses(losses_from_stats(merged, prob.valid), prob.valid, reduction)
    return FusedOutput(loss, merged, prob.valid, reduction)


def sp_to_tp_gather(H_shards, layout: ShardLayout | None = None) -> np.ndarray:
    """Concatenate sequence shards back into the full ``H`` in rank order."""
    H_shards = [np.asarray(h) for h in H_shards]
    if not H_shards:
        raise InvalidLayoutError("no shards to gather")
    if layout is not None:
        sizes = [hi - lo for lo, hi in layout.ranges]
        if sizes != [h.shape[0] for h in H_shards]:
            raise InvalidLayoutError(f"shard sizes {[h.shape[0] for h in H_shards]} != layout {sizes}")
        layout.validate(sum(sizes))
    if any(h.shape[0] == 0 for h in H_shards):
        raise InvalidLayoutError("empty sequence shard")
    return np.concatenate(H_shards, axis=0)


def tp_backward(
    H, W_shards, Y, merged_stats, upstream=1.0, reduction=Reduction.MEAN, precision=None, *,
    ignore_index=None, tiles: TileConfig = DEFAULT_TILES, workers: int | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Shard-local recompute backward using the globally merged ``(m, a)``.

    Returns the full ``dH`` (rank-ordered sum of contributions) and one
    ``dW`` block per rank.
    """
    layout = _tp_layout(W_shards)
    W_full = np.concatenate([np.asarray(w) for w in W_shards])
    prob = prepare(H, W_full, Y, precision, ignore_index)
    if isinstance(merged_stats, FusedOutput):
        merged_stats = merged_stats.stats
    if merged_stats is None or len(merged_stats) != prob.dims.N:
        raise MissingStatsError("tp_backward needs merged stats for every position")
    gamma = position_scale(upstream, reduction, prob.valid, prob.precision.compute)

    def rank_fn(rank):
        lo, hi = layout.ranges[rank]
        dH, dW = grads_from_stats(
            prob.H, prob.W[lo:hi], _shard_targets(prob, lo, hi), gamma, merged_stats,
            tiles=tiles, workers=1,
        )
        return RankPartial(rank, dH=dH, dW=dW)

    partials = run_tasks(rank_fn, list(range(layout.ranks)), workers)
    dH = partials[0].dH.copy()
    for p in partials[1:]:
        dH += p.dH
    return dH, [p.dW for p in partials]


@dataclass
class DPResult:
    loss: float
    dW: np.ndarray
    dH: list[np.ndarray]
    rank_losses: list[float]


def dp_step(
    replicas, W, reduction=Reduction.MEAN, upstream: float = 1.0, precision=None, *,
    ignore_index=None, tiles: TileConfig = DEFAULT_TILES, workers: int | None = None,
) -> DPResult:
    """One data-parallel step over ``replicas = [(H_r, Y_r), ...]``.

    Every replica runs the fused forward and backward on its own micro-batch
    with a full copy of W. The reported loss is the mean of replica losses,
    ``dW`` is the mean of replica weight gradients, and each ``dH_r`` is the
    gradient of that mean.
    """
    reduction = Reduction(reduction)
    if reduction is Reduction.NONE:
        raise UnsupportedReductionError("dp_step needs a scalar loss per replica")
    if not replicas:
        raise InvalidLayoutError("dp_step needs at least one replica")
    sizes = {np.asarray(h).shape[0] for h, _ in replicas}
    if len(sizes) != 1 or 0 in sizes:
        raise InvalidLayoutError(f"replicas must carry equal, non-empty micro-batches, got {sorted(sizes)}")
    R = len(replicas)

    def rank_fn(rank):
        H_r, Y_r = replicas[rank]
        out = fused_forward(
            H_r, W, Y_r, reduction, precision, ignore_index=ignore_index, tiles=tiles, workers=1
        )
        dH, dW = fused_backward_recompute(
            H_r, W, Y_r, out, upstream, reduction, precision,
            ignore_index=ignore_index, tiles=tiles, workers=1,
        )
        return out.loss, dH, dW

    results = run_tasks(rank_fn, list(range(R)), workers)
    # all-reduce (mean) in rank order
    dW = results[0][2].copy()
    for _, _, part in results[1:]:
        dW += part
    dW /= R
    losses = [float(r[0]) for r in results]
    return DPResult(sum(losses) / R, dW, [r[1] / R for r in results], losses)
