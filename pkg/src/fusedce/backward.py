"""Gradients of the fused loss with respect to hidden states and weights.

Two routes are provided:

* :func:`fused_backward_recompute` re-derives every logit tile from ``H`` and
  ``W`` and turns it into probabilities with the cached ``(m, a)``. It
  accepts any upstream gradient, including a per-position one.
* :func:`fused_forward_with_partial_grads` accumulates the unscaled
  gradients during the forward pass; :func:`scale_partial_grads` then applies
  a scalar upstream. Only mean and sum reductions are supported there.

Each worker owns a contiguous range of positions: it writes its own rows of
``dH`` and accumulates into a private ``dW`` partial. Partials are summed in
worker order, never with atomics, so results are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_TILES,
    MemoryLedger,
    Reduction,
    TileConfig,
    _maybe_hold,
    default_workers,
    effective_gamma,
    position_scale,
    prepare,
    reduce_losses,
    run_tasks,
    split_range,
    tile_logits,
)
from .errors import MissingStatsError, UnsupportedReductionError
from .forward import FusedOutput, SCRATCH_TILES, stats_nbytes, window_stats
from .stats import SoftmaxStats, losses_from_stats


def backward_scratch_nbytes(n_rows: int, V: int, d: int, tiles: TileConfig, itemsize: int) -> int:
    rows = min(tiles.rows, n_rows)
    vocab = min(tiles.vocab, V)
    return (SCRATCH_TILES * rows * vocab + rows * d + vocab * d) * itemsize


def accumulate_block_grads(
    h: np.ndarray,
    W: np.ndarray,
    y_local: np.ndarray,
    gamma: np.ndarray,
    m: np.ndarray,
    a: np.ndarray,
    dh: np.ndarray,
    dW: np.ndarray,
    tiles: TileConfig = DEFAULT_TILES,
) -> None:
    """Add one row block's contribution to ``dh`` (its rows) and ``dW``.

    ``g = exp(z - m) / a - onehot(y)`` is formed tile by tile. The per-row
    factor ``gamma`` is applied after the vocabulary reduction for ``dh`` and
    folded into the rows of ``h`` for ``dW``, which is the same product with
    N*d instead of N*V multiplies. Rows with ``gamma == 0`` contribute exact
    zeros.
    """
    a = np.where(gamma == 0, 1, a)
    idx = np.arange(h.shape[0])
    h_scaled = h * gamma[:, None]
    dh_unit = np.zeros_like(dh)
    for v0 in range(0, W.shape[0], tiles.vocab):
        v1 = min(v0 + tiles.vocab, W.shape[0])
        w = W[v0:v1]
        z = tile_logits(h, w, tiles.hidden)
        g = np.exp(z - m[:, None])
        g /= a[:, None]
        hit = (y_local >= v0) & (y_local < v1)
        if hit.any():
            g[idx[hit], y_local[hit] - v0] -= 1
        dh_unit += g @ w
        dW[v0:v1] += g.T @ h_scaled
    dh += gamma[:, None] * dh_unit


def _check_stats(stats, prob) -> SoftmaxStats:
    if isinstance(stats, FusedOutput):
        stats = stats.stats
    if stats is None:
        raise MissingStatsError("backward needs the stats cache from the forward pass")
    if len(stats) != prob.dims.N:
        raise MissingStatsError(f"stats cache has {len(stats)} entries for {prob.dims.N} positions")
    missing = prob.valid & ~np.asarray(stats.target_found)
    if missing.any():
        raise MissingStatsError(
            f"no target logit cached for positions {np.flatnonzero(missing)[:8].tolist()}"
        )
    return stats


def grads_from_stats(
    H: np.ndarray,
    W: np.ndarray,
    y_local: np.ndarray,
    gamma: np.ndarray,
    stats: SoftmaxStats,
    *,
    tiles: TileConfig = DEFAULT_TILES,
    workers: int | None = None,
    ledger: MemoryLedger | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Recompute-based gradients for already validated compute-precision arrays."""
    N, d = H.shape
    V = W.shape[0]
    workers = default_workers() if workers is None else workers
    ranges = [r for r in split_range(N, max(1, min(workers, N))) if r[1] > r[0]] or [(0, 0)]
    itemsize = H.dtype.itemsize
    dH = np.zeros_like(H)
    m = np.asarray(stats.m, dtype=H.dtype)
    a = np.asarray(stats.a, dtype=H.dtype)

    def task(rng):
        r0, r1 = rng
        dW_part = np.zeros_like(W)
        for b0 in range(r0, r1, tiles.rows):
            b1 = min(b0 + tiles.rows, r1)
            accumulate_block_grads(
                H[b0:b1], W, y_local[b0:b1], gamma[b0:b1], m[b0:b1], a[b0:b1],
                dH[b0:b1], dW_part, tiles,
            )
        return dW_part

    scratch = min(workers, len(ranges)) * backward_scratch_nbytes(
        max(r1 - r0 for r0, r1 in ranges), V, d, tiles, itemsize
    )
    with _maybe_hold(ledger, len(ranges) * V * d * itemsize, "dW_partial"), _maybe_hold(
        ledger, scratch, "scratch"
    ):
        partials = run_tasks(task, ranges, workers)
        dW = partials[0]
        for part in partials[1:]:
            dW += part
    return dH, dW


def fused_backward_recompute(
    H,
    W,
    Y,
    stats: SoftmaxStats | FusedOutput,
    upstream=1.0,
    reduction=Reduction.MEAN,
    precision=None,
    *,
    ignore_index: int | None = None,
    ledger: MemoryLedger | None = None,
    tiles: TileConfig = DEFAULT_TILES,
    workers: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dH, dW)`` by recomputing logits against cached ``(m, a)``.

    ``upstream`` is a scalar for mean/sum (mean adds the ``1 / N_valid``
    factor) and a length-N array for ``none``.
    """
    prob = prepare(H, W, Y, precision, ignore_index)
    stats = _check_stats(stats, prob)
    gamma = position_scale(upstream, reduction, prob.valid, prob.precision.compute)
    y_local = np.where(prob.valid, prob.targets, -1)
    return grads_from_stats(
        prob.H, prob.W, y_local, gamma, stats, tiles=tiles, workers=workers, ledger=ledger
    )


@dataclass
class PartialGradients:
    """Gradients accumulated with unit upstream, before any scaling."""

    dH_prime: np.ndarray
    dW_prime: np.ndarray


@dataclass
class PartialGradOutput:
    loss: float
    partials: PartialGradients
    stats: SoftmaxStats
    valid: np.ndarray
    reduction: Reduction

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def gradients(self, upstream: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Scale the partials by ``upstream`` (and ``1 / N_valid`` for mean)."""
        return scale_partial_grads(
            self.partials, effective_gamma(upstream, self.reduction, self.n_valid)
        )


def fused_forward_with_partial_grads(
    H,
    W,
    Y,
    reduction=Reduction.MEAN,
    precision=None,
    *,
    ignore_index: int | None = None,
    ledger: MemoryLedger | None = None,
    tiles: TileConfig = DEFAULT_TILES,
    workers: int | None = None,
) -> PartialGradOutput:
    """Forward pass that also accumulates unscaled gradients.

    Each row block first streams its statistics exactly as
    :func:`~fusedce.forward.fused_forward` does, then makes a second pass
    over the vocabulary to accumulate ``(p - onehot(y))`` products.
    """
    reduction = Reduction(reduction)
    if reduction is Reduction.NONE:
        raise UnsupportedReductionError(
            "partial gradient accumulation needs a scalar upstream (mean or sum); "
            "use fused_backward_recompute for per-position upstream gradients"
        )
    prob = prepare(H, W, Y, precision, ignore_index)
    N, d, V = prob.dims
    itemsize = prob.precision.itemsize
    workers = default_workers() if workers is None else workers
    ranges = [r for r in split_range(N, max(1, min(workers, N))) if r[1] > r[0]] or [(0, 0)]
    y_local = np.where(prob.valid, prob.targets, -1)
    unit = prob.valid.astype(prob.precision.compute)
    dH = np.zeros_like(prob.H)

    def task(rng):
        r0, r1 = rng
        dW_part = np.zeros_like(prob.W)
        blocks = []
        for b0 in range(r0, r1, tiles.rows):
            b1 = min(b0 + tiles.rows, r1)
            st = window_stats(prob.H, prob.W, y_local, (b0, b1), (0, V), tiles)
            accumulate_block_grads(
                prob.H[b0:b1], prob.W, y_local[b0:b1], unit[b0:b1], st.m, st.a,
                dH[b0:b1], dW_part, tiles,
            )
            blocks.append(st)
        return blocks, dW_part

    longest = max(r1 - r0 for r0, r1 in ranges)
    scratch = min(workers, len(ranges)) * backward_scratch_nbytes(longest, V, d, tiles, itemsize)
    with _maybe_hold(ledger, stats_nbytes(N, itemsize), "stats"), _maybe_hold(
        ledger, len(ranges) * V * d * itemsize, "dW_partial"
    ), _maybe_hold(ledger, scratch, "scratch"):
        results = run_tasks(task, ranges, workers)
        blocks = [st for block_list, _ in results for st in block_list]
        if blocks:
            stats = SoftmaxStats(
                np.concatenate([b.m for b in blocks]),
                np.concatenate([b.a for b in blocks]),
                np.concatenate([b.z_target for b in blocks]),
                np.concatenate([b.target_found for b in blocks]),
            )
        else:
            stats = SoftmaxStats.identity(0, prob.precision.compute)
        dW = results[0][1]
        for _, part in results[1:]:
            dW += part
    loss = reduce_losses(losses_from_stats(stats, prob.valid), prob.valid, reduction)
    return PartialGradOutput(loss, PartialGradients(dH, dW), stats, prob.valid, reduction)


def scale_partial_grads(pg: PartialGradients, gamma_eff: float) -> tuple[np.ndarray, np.ndarray]:
    """Multiply both partial gradients by a scalar upstream factor."""
    if not math.isfinite(gamma_eff):
        raise ValueError(f"gamma_eff must be finite, got {gamma_eff}")
    return gamma_eff * pg.dH_prime, gamma_eff * pg.dW_prime
