"""Streaming safe-softmax statistics and their merge rule.

A :class:`SoftmaxStats` summarises a run of logits by its maximum ``m`` and the
rescaled sum ``a = sum(exp(z - m))``, so ``logsumexp = m + log(a)``. The same
class holds either one position (float fields) or many positions (1-D array
fields); :func:`merge_stats` works on both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DuplicateTargetError


@dataclass
class SoftmaxStats:
    m: float | np.ndarray
    a: float | np.ndarray
    z_target: float | np.ndarray
    target_found: bool | np.ndarray

    @classmethod
    def identity(cls, n: int | None = None, dtype=np.float64) -> "SoftmaxStats":
        """The empty-range statistics: ``m = -inf``, ``a = 0``, no target."""
        if n is None:
            return cls(-math.inf, 0.0, 0.0, False)
        return cls(
            np.full(n, -np.inf, dtype=dtype),
            np.zeros(n, dtype=dtype),
            np.zeros(n, dtype=dtype),
            np.zeros(n, dtype=bool),
        )

    def logsumexp(self):
        with np.errstate(divide="ignore"):
            return self.m + np.log(self.a)

    def __len__(self):
        return np.shape(self.m)[0]

    def __getitem__(self, idx) -> "SoftmaxStats":
        return SoftmaxStats(self.m[idx], self.a[idx], self.z_target[idx], self.target_found[idx])

    @property
    def nbytes(self) -> int:
        return sum(np.asarray(f).nbytes for f in (self.m, self.a, self.z_target, self.target_found))


def stream_stats(
    h,
    W,
    y: int | None,
    vocab_range: tuple[int, int] | None = None,
    *,
    on_update: Callable[[int, float, float, float], None] | None = None,
) -> SoftmaxStats:
    """Run the one-logit-at-a-time online softmax update over ``W[lo:hi]``.

    ``y`` is a global vocabulary index (or None for an ignored position).
    ``on_update(v, z, m, a)`` is called after every step, which is what the
    CLI demo prints.
    """
    h = np.asarray(h, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    lo, hi = (0, W.shape[0]) if vocab_range is None else vocab_range
    if not 0 <= lo <= hi <= W.shape[0]:
        raise ValueError(f"vocab range [{lo}, {hi}) outside [0, {W.shape[0]}]")
    m, a = -math.inf, 0.0
    z_target, found = 0.0, False
    for v in range(lo, hi):
        z = float(np.dot(h, W[v]))
        if z > m:
            a = a * math.exp(m - z) + 1.0
            m = z
        else:
            a = a + math.exp(z - m)
        if v == y:
            z_target, found = z, True
        if on_update is not None:
            on_update(v, z, m, a)
    return SoftmaxStats(m, a, z_target, found)


def _rescaled(a, m, m_new):
    # a_i == 0 contributes nothing, even when m_i == m_new == -inf
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = a * np.exp(m - m_new)
    return np.where(a == 0, 0, scaled)


def merge_stats(s1: SoftmaxStats, s2: SoftmaxStats) -> SoftmaxStats:
    """Combine statistics of two disjoint vocabulary ranges."""
    both = np.logical_and(s1.target_found, s2.target_found)
    if np.any(both):
        where = "" if np.ndim(both) == 0 else f" at positions {np.flatnonzero(both)[:8].tolist()}"
        raise DuplicateTargetError(f"both partial stats claim the target{where}")
    m = np.maximum(s1.m, s2.m)
    a = _rescaled(s1.a, s1.m, m) + _rescaled(s2.a, s2.m, m)
    z_target = np.where(s2.target_found, s2.z_target, s1.z_target)
    found = np.logical_or(s1.target_found, s2.target_found)
    if np.ndim(m) == 0:
        return SoftmaxStats(float(m), float(a), float(z_target), bool(found))
    return SoftmaxStats(m, a.astype(s1.a.dtype, copy=False), z_target, found)


def merge_all(parts: list[SoftmaxStats]) -> SoftmaxStats:
    """Left fold of :func:`merge_stats` in list order."""
    out = parts[0]
    for part in parts[1:]:
        out = merge_stats(out, part)
    return out


def losses_from_stats(stats: SoftmaxStats, valid: np.ndarray) -> np.ndarray:
    """Per-position ``logsumexp - z_target``, zero where ``valid`` is False."""
    lse = stats.m + np.log(np.where(valid, stats.a, 1))
    return np.where(valid, lse - stats.z_target, 0).astype(stats.m.dtype, copy=False)
