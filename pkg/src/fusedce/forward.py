"""Fused projection + cross-entropy forward pass.

The logits are produced one ``(rows x vocab)`` tile at a time and folded into
per-position running statistics straight away, so the ``N x V`` logits
matrix never exists. Work is split into tasks of (position range, vocabulary
window); each task owns a disjoint slice of the output and the window
partials are merged in ascending window order, which keeps results bitwise
reproducible for a fixed worker count.
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
    prepare,
    reduce_losses,
    run_tasks,
    split_range,
    tile_logits,
)
from .stats import SoftmaxStats, losses_from_stats, merge_all

# z tile, partial-product tile and exp tile live at once per worker
SCRATCH_TILES = 3


@dataclass
class FusedOutput:
    """Loss plus the per-position statistics cached for the backward pass."""

    loss: float | np.ndarray
    stats: SoftmaxStats
    valid: np.ndarray
    reduction: Reduction

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))


@dataclass(frozen=True)
class WindowConfig:
    """Vocabulary window length for the windowed forward."""

    window_size: int
    worker_count: int | None = None

    def windows(self, V: int) -> list[tuple[int, int]]:
        if not 1 <= self.window_size <= V:
            raise ValueError(f"window_size must be in [1, {V}], got {self.window_size}")
        return [(lo, min(lo + self.window_size, V)) for lo in range(0, V, self.window_size)]


def stats_nbytes(n: int, itemsize: int) -> int:
    """Bytes of a stats cache: m, a and z_target at compute precision plus a flag."""
    return n * (3 * itemsize + 1)


def scratch_nbytes(n_rows: int, n_vocab: int, d: int, tiles: TileConfig, itemsize: int) -> int:
    del d  # forward scratch does not depend on the hidden size
    return SCRATCH_TILES * min(tiles.rows, n_rows) * min(tiles.vocab, n_vocab) * itemsize


def window_stats(
    H: np.ndarray,
    W: np.ndarray,
    y_local: np.ndarray,
    rows: tuple[int, int],
    vocab: tuple[int, int],
    tiles: TileConfig = DEFAULT_TILES,
) -> SoftmaxStats:
    """Streaming stats for positions ``rows`` over vocabulary entries ``vocab``.

    ``y_local`` indexes rows of ``W``; a negative entry means the position
    has no target to capture (ignored, or owned by another shard).
    """
    r0, r1 = rows
    lo, hi = vocab
    st = SoftmaxStats.identity(r1 - r0, H.dtype)
    for b0 in range(r0, r1, tiles.rows):
        b1 = min(b0 + tiles.rows, r1)
        h = H[b0:b1]
        yb = y_local[b0:b1]
        sl = slice(b0 - r0, b1 - r0)
        m, a = st.m[sl], st.a[sl]
        zt, found = st.z_target[sl], st.target_found[sl]
        idx = np.arange(b1 - b0)
        for v0 in range(lo, hi, tiles.vocab):
            v1 = min(v0 + tiles.vocab, hi)
            z = tile_logits(h, W[v0:v1], tiles.hidden)
            m_new = np.maximum(m, z.max(axis=1))
            a *= np.exp(m - m_new)
            a += np.exp(z - m_new[:, None]).sum(axis=1)
            m[:] = m_new
            hit = (yb >= v0) & (yb < v1)
            if hit.any():
                zt[hit] = z[idx[hit], yb[hit] - v0]
                found |= hit
    return st


def concat_stats(parts: list[SoftmaxStats]) -> SoftmaxStats:
    return SoftmaxStats(
        np.concatenate([p.m for p in parts]),
        np.concatenate([p.a for p in parts]),
        np.concatenate([p.z_target for p in parts]),
        np.concatenate([p.target_found for p in parts]),
    )


def forward_stats(
    H: np.ndarray,
    W: np.ndarray,
    y_local: np.ndarray,
    windows: list[tuple[int, int]] | None = None,
    *,
    tiles: TileConfig = DEFAULT_TILES,
    workers: int | None = None,
    ledger: MemoryLedger | None = None,
) -> SoftmaxStats:
    """Stats for every position of ``H`` against all rows of ``W``.

    Positions are split into one contiguous range per worker; every
    (range, window) pair is an independent task.
    """
    N = H.shape[0]
    V = W.shape[0]
    workers = default_workers() if workers is None else workers
    windows = [(0, V)] if windows is None else windows
    ranges = [r for r in split_range(N, max(1, min(workers, N))) if r[1] > r[0]] or [(0, 0)]
    tasks = [(r, w) for w in windows for r in ranges]

    itemsize = H.dtype.itemsize
    longest_range = max(r1 - r0 for r0, r1 in ranges)
    longest_window = max(hi - lo for lo, hi in windows)
    scratch = min(workers, len(tasks)) * scratch_nbytes(
        longest_range, longest_window, H.shape[1], tiles, itemsize
    )
    partials = stats_nbytes(N, itemsize) * len(windows) if len(windows) > 1 else 0

    with _maybe_hold(ledger, partials, "window_partials"), _maybe_hold(ledger, scratch, "scratch"):
        results = run_tasks(
            lambda task: window_stats(H, W, y_local, task[0], task[1], tiles), tasks, workers
        )
        per_window = [
            concat_stats(results[i * len(ranges) : (i + 1) * len(ranges)])
            for i in range(len(windows))
        ]
        # epilogue: ascending window order
        return merge_all(per_window)


def _local_targets(prob) -> np.ndarray:
    return np.where(prob.valid, prob.targets, -1)


def _finish(prob, stats: SoftmaxStats, reduction) -> FusedOutput:
    reduction = Reduction(reduction)
    loss = reduce_losses(losses_from_stats(stats, prob.valid), prob.valid, reduction)
    return FusedOutput(loss, stats, prob.valid, reduction)


def fused_forward(
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
) -> FusedOutput:
    """Cross-entropy of ``H @ W.T`` against ``Y`` without materialising logits.

    Loss per position is ``m + log(a) - z_target``; the denominator stays in
    log space so large logits cannot overflow it. Peak ledger charge is the
    O(N) stats cache plus a fixed number of scratch tiles per worker.
    """
    prob = prepare(H, W, Y, precision, ignore_index)
    with _maybe_hold(ledger, stats_nbytes(prob.dims.N, prob.precision.itemsize), "stats"):
        stats = forward_stats(
            prob.H, prob.W, _local_targets(prob), tiles=tiles, workers=workers, ledger=ledger
        )
    return _finish(prob, stats, reduction)


def fused_forward_windowed(
    H,
    W,
    Y,
    reduction=Reduction.MEAN,
    cfg: WindowConfig | int | None = None,
    precision=None,
    *,
    ignore_index: int | None = None,
    ledger: MemoryLedger | None = None,
    tiles: TileConfig = DEFAULT_TILES,
) -> FusedOutput:
    """Windowed variant: one stats partial per vocabulary window, then merged.

    A single window covering the vocabulary reproduces :func:`fused_forward`
    bit for bit.
    """
    prob = prepare(H, W, Y, precision, ignore_index)
    V = prob.dims.V
    if cfg is None:
        cfg = WindowConfig(V)
    elif isinstance(cfg, int):
        cfg = WindowConfig(cfg)
    windows = cfg.windows(V)
    with _maybe_hold(ledger, stats_nbytes(prob.dims.N, prob.precision.itemsize), "stats"):
        stats = forward_stats(
            prob.H,
            prob.W,
            _local_targets(prob),
            windows,
            tiles=tiles,
            workers=cfg.worker_count,
            ledger=ledger,
        )
    return _finish(prob, stats, reduction)


def naive_loss(H, W, Y) -> float:
    """Mean cross-entropy with an unshifted ``exp`` sum.

    Exists only to demonstrate overflow on large logits; do not use it.
    """
    Z = np.asarray(H, dtype=np.float32) @ np.asarray(W, dtype=np.float32).T
    Y = np.asarray(Y)
    with np.errstate(over="ignore", invalid="ignore"):
        denom = np.exp(Z).sum(axis=1)
        per = -np.log(np.exp(Z[np.arange(len(Y)), Y]) / denom)
    return float(per.mean()) if per.size else math.nan
