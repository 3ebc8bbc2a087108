"""Randomised equivalence suites shared by ``fusedce verify`` and the tests.

Each suite returns a :class:`SuiteResult` holding the worst error it saw and
the threshold it was held to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backward import fused_backward_recompute, fused_forward_with_partial_grads
from .core import F64, MemoryLedger, PrecisionMode, Reduction
from .errors import UnsupportedReductionError
from .forward import fused_forward, fused_forward_windowed, naive_loss
from .parallel import ShardLayout, dp_step, shard, sp_to_tp_gather, tp_backward, tp_forward, tp_partials
from .reference import reference_backward, reference_loss

IGNORE = -100

# (f32-ish, f64) thresholds
LOSS_TOL = {"f32": 1e-5, "f64": 1e-10}
PATH_TOL = {"f32": 1e-6, "f64": 1e-12}
SHARD_TOL = {"f32": 1e-6, "f64": 1e-12}
WINDOW_TOL = {"f32": 1e-6, "f64": 1e-12}
GRAD_REF_TOL = 1e-10
FD_RTOL, FD_ATOL, FD_STEP = 1e-6, 1e-8, 1e-5
STABILITY_TOL = 1e-4
STABILITY_OFFSET = 1e4


@dataclass
class SuiteResult:
    name: str
    max_error: float
    threshold: float
    cases: int
    passed: bool
    notes: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({'; '.join(self.notes)})" if self.notes else ""
        return (
            f"[{status}] {self.name:<28} max_err={self.max_error:.3e} "
            f"threshold={self.threshold:.1e} cases={self.cases}{extra}"
        )


def _tol_key(precision) -> str:
    return "f64" if PrecisionMode.parse(precision).compute is np.float64 else "f32"


def rel_error(actual, expected) -> float:
    """Relative error; norm-wise (max-abs) for arrays, 0 when both are 0."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    diff = float(np.max(np.abs(actual - expected), initial=0.0))
    scale = float(np.max(np.abs(expected), initial=0.0))
    if diff == 0.0:
        return 0.0
    return diff / scale if scale > 0 else math.inf


def abs_error(actual, expected) -> float:
    return float(np.max(np.abs(np.asarray(actual, np.float64) - np.asarray(expected, np.float64)), initial=0.0))


def random_instance(rng: np.random.Generator, max_n: int, max_d: int, max_v: int, masked: bool):
    """Logit-scale O(1) instance; optionally marks ~25% of positions ignored."""
    N = int(rng.integers(1, max_n + 1))
    d = int(rng.integers(1, max_d + 1))
    V = int(rng.integers(1, max_v + 1))
    H = rng.normal(size=(N, d))
    W = rng.normal(size=(V, d)) / math.sqrt(d)
    Y = rng.integers(0, V, size=N)
    if masked:
        Y = np.where(rng.random(N) < 0.25, IGNORE, Y)
    return H, W, Y


def _reductions(i: int) -> Reduction:
    return (Reduction.MEAN, Reduction.SUM, Reduction.NONE)[i % 3]


def oracle_loss_suite(
    instances: int = 200, precision="f32", seed: int = 0, max_n=64, max_d=64, max_v=1024, workers=None
) -> SuiteResult:
    """Fused forward vs materialised reference over random shapes and reductions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        masked = bool(i % 2)
        H, W, Y = random_instance(rng, max_n, max_d, max_v, masked)
        red = _reductions(i)
        ign = IGNORE if masked else None
        got = fused_forward(H, W, Y, red, precision, ignore_index=ign, workers=workers).loss
        want = reference_loss(H, W, Y, red, precision, ignore_index=ign)
        worst = max(worst, rel_error(got, want))
    tol = LOSS_TOL[_tol_key(precision)]
    return SuiteResult("oracle_loss", worst, tol, instances, worst <= tol)


def _fd_gradients(H, W, Y, red, upstream, ign, step=FD_STEP):
    """Central differences of ``<upstream, fused loss>`` in float64."""

    def objective(Hx, Wx):
        loss = fused_forward(Hx, Wx, Y, red, F64, ignore_index=ign, workers=1).loss
        return float(np.dot(upstream, loss)) if red is Reduction.NONE else upstream * loss

    grads = []
    for target, other_first in ((H, True), (W, False)):
        g = np.zeros_like(target)
        for idx in np.ndindex(target.shape):
            plus = target.copy()
            minus = target.copy()
            plus[idx] += step
            minus[idx] -= step
            if other_first:
                f_plus, f_minus = objective(plus, W), objective(minus, W)
            else:
                f_plus, f_minus = objective(H, plus), objective(H, minus)
            g[idx] = (f_plus - f_minus) / (2 * step)
        grads.append(g)
    return grads


def gradient_suite(instances: int = 50, seed: int = 1, max_n=8, max_d=8, max_v=16) -> tuple[SuiteResult, SuiteResult]:
    """Recompute backward vs reference backward and vs finite differences (float64)."""
    rng = np.random.default_rng(seed)
    worst_ref = 0.0
    worst_fd = 0.0
    for i in range(instances):
        masked = i % 4 == 3
        H, W, Y = random_instance(rng, max_n, max_d, max_v, masked)
        ign = IGNORE if masked else None
        red = _reductions(i)
        if red is Reduction.NONE:
            upstream = rng.normal(size=len(Y))
        else:
            upstream = float(rng.uniform(0.5, 2.0))
        out = fused_forward(H, W, Y, red, F64, ignore_index=ign)
        dH, dW = fused_backward_recompute(H, W, Y, out, upstream, red, F64, ignore_index=ign)
        rH, rW = reference_backward(H, W, Y, red, upstream, F64, ignore_index=ign)
        worst_ref = max(worst_ref, abs_error(dH, rH), abs_error(dW, rW))
        fH, fW = _fd_gradients(H, W, Y, red, upstream, ign)
        for an, fd in ((dH, fH), (dW, fW)):
            # |fd - an| <= rtol * |an| + atol, reported as a ratio against rtol
            err = np.abs(fd - an) / (np.abs(an) + FD_ATOL / FD_RTOL)
            worst_fd = max(worst_fd, float(err.max(initial=0.0)))
    return (
        SuiteResult("grad_vs_reference_f64", worst_ref, GRAD_REF_TOL, instances, worst_ref <= GRAD_REF_TOL),
        SuiteResult(
            "grad_vs_finite_diff_f64", worst_fd, FD_RTOL, instances, worst_fd <= FD_RTOL,
            [f"step {FD_STEP:g}, atol floor {FD_ATOL:g}"],
        ),
    )


def path_equivalence_suite(
    instances: int = 60, precision="f32", seed: int = 2, max_n=64, max_d=64, max_v=1024, workers=None
) -> SuiteResult:
    """Recompute backward vs partial-gradient forward + scalar scaling."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        masked = bool(i % 2)
        H, W, Y = random_instance(rng, max_n, max_d, max_v, masked)
        ign = IGNORE if masked else None
        red = (Reduction.MEAN, Reduction.SUM)[i % 2]
        upstream = float(rng.uniform(0.5, 2.0))
        out = fused_forward(H, W, Y, red, precision, ignore_index=ign, workers=workers)
        dH, dW = fused_backward_recompute(
            H, W, Y, out, upstream, red, precision, ignore_index=ign, workers=workers
        )
        pg = fused_forward_with_partial_grads(H, W, Y, red, precision, ignore_index=ign, workers=workers)
        pH, pW = pg.gradients(upstream)
        worst = max(worst, rel_error(pH, dH), rel_error(pW, dW))
    notes = []
    try:
        fused_forward_with_partial_grads(H, W, Y, Reduction.NONE, precision)
        rejected = False
        notes.append("reduction 'none' was NOT rejected")
    except UnsupportedReductionError:
        rejected = True
    tol = PATH_TOL[_tol_key(precision)]
    return SuiteResult("path_recompute_vs_partial", worst, tol, instances, worst <= tol and rejected, notes)


WINDOW_SIZES = (1, 3, 16, 128, 256, 257)


def window_suite(precision="f32", seed: int = 3, N=32, d=32, V=257, sizes=WINDOW_SIZES, extra=None) -> SuiteResult:
    """Loss across window sizes, plus bitwise identity of the full-width window."""
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(N, d))
    W = rng.normal(size=(V, d)) / math.sqrt(d)
    Y = rng.integers(0, V, size=N)
    sizes = sorted(set(sizes) | ({extra} if extra and extra <= V else set()))
    # per-position losses: a mean can hide window-dependent rounding by cancellation
    base = fused_forward(H, W, Y, Reduction.NONE, precision, workers=1)
    losses = [fused_forward_windowed(H, W, Y, Reduction.NONE, s, precision).loss for s in sizes]
    worst = max(rel_error(l, base.loss) for l in losses)
    full = fused_forward_windowed(H, W, Y, Reduction.NONE, V, precision)
    bitwise = (
        np.array_equal(full.loss, base.loss)
        and np.array_equal(full.stats.m, base.stats.m)
        and np.array_equal(full.stats.a, base.stats.a)
    )
    tol = WINDOW_TOL[_tol_key(precision)]
    notes = [f"windows {list(sizes)}", "W=V bitwise " + ("identical" if bitwise else "DIFFERENT")]
    return SuiteResult("window_invariance", worst, tol, len(sizes), worst <= tol and bitwise, notes)


def shard_suite(
    precision="f32", seed: int = 4, ranks=(1, 2, 3, 4), modes=("tp", "sp", "dp"), N=48, d=32, V=301,
    workers=None,
) -> SuiteResult:
    """TP, SP-gather-then-TP and DP against the single-rank fused computation."""
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(N, d))
    W = rng.normal(size=(V, d)) / math.sqrt(d)
    Y = rng.integers(0, V, size=N)
    Y[-1] = V - 1  # target in the last shard's final row
    base = fused_forward(H, W, Y, Reduction.MEAN, precision, workers=1)
    bH, bW = fused_backward_recompute(H, W, Y, base, 1.0, Reduction.MEAN, precision, workers=1)
    worst = 0.0
    cases = 0
    notes = []
    for R in ranks:
        if R > V:
            notes.append(f"R={R} skipped: more ranks than vocabulary rows")
            continue
        tp_layout = ShardLayout.even("tp", V, R)
        W_shards = shard(W, tp_layout)
        if "tp" in modes:
            found = sum(p.stats.target_found.astype(int) for p in tp_partials(H, W_shards, Y, precision))
            if not np.all(found == 1):
                notes.append(f"TP R={R}: target found {found.min()}..{found.max()} times")
                worst = math.inf
            out = tp_forward(H, W_shards, Y, Reduction.MEAN, precision, workers=workers)
            dH, dW_shards = tp_backward(H, W_shards, Y, out, 1.0, Reduction.MEAN, precision, workers=workers)
            worst = max(worst, rel_error(out.loss, base.loss), rel_error(dH, bH),
                        rel_error(np.concatenate(dW_shards), bW))
            cases += 1
        if "sp" in modes and R <= N:
            H_full = sp_to_tp_gather(shard(H, ShardLayout.even("sp", N, R)))
            if not np.array_equal(H_full, H):
                notes.append(f"SP R={R}: gather is not a bitwise round trip")
                worst = math.inf
            out = tp_forward(H_full, W_shards, Y, Reduction.MEAN, precision, workers=workers)
            dH, dW_shards = tp_backward(H_full, W_shards, Y, out, 1.0, Reduction.MEAN, precision, workers=workers)
            worst = max(worst, rel_error(out.loss, base.loss), rel_error(dH, bH),
                        rel_error(np.concatenate(dW_shards), bW))
            cases += 1
        if "dp" in modes and N % R == 0:
            rows = ShardLayout.even("dp", N, R)
            res = dp_step([(H[lo:hi], Y[lo:hi]) for lo, hi in rows.ranges], W, Reduction.MEAN, 1.0,
                          precision, workers=workers)
            worst = max(worst, rel_error(res.loss, base.loss), rel_error(np.concatenate(res.dH), bH),
                        rel_error(res.dW, bW))
            cases += 1
    tol = SHARD_TOL[_tol_key(precision)]
    return SuiteResult("shard_invariance", worst, tol, cases, worst <= tol, notes)


def shifted_instance(seed: int = 5, N=64, d=32, V=512, offset=STABILITY_OFFSET):
    """Return ``(H, W, H_shift, W_shift, Y)`` where every shifted logit is ``z + offset``.

    The shift comes from an extra hidden column of ones paired with a weight
    column holding ``offset``.
    """
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(N, d))
    W = rng.normal(size=(V, d)) / math.sqrt(d)
    Y = rng.integers(0, V, size=N)
    H_shift = np.hstack([H, np.ones((N, 1))])
    W_shift = np.hstack([W, np.full((V, 1), offset)])
    return H, W, H_shift, W_shift, Y


def stability_suite(precision="f32", seed: int = 5) -> SuiteResult:
    H, W, Hs, Ws, Y = shifted_instance(seed)
    shifted = fused_forward(Hs, Ws, Y, Reduction.MEAN, precision).loss
    oracle = reference_loss(H, W, Y, Reduction.MEAN, precision)
    naive = naive_loss(Hs, Ws, Y)
    err = rel_error(shifted, oracle) if math.isfinite(shifted) else math.inf
    ok = err <= STABILITY_TOL and not math.isfinite(naive)
    notes = [f"offset {STABILITY_OFFSET:g}", f"naive unsafe loss = {naive}"]
    return SuiteResult("stability_offset", err, STABILITY_TOL, 1, ok, notes)


def memory_suite(precision="f32", N=256, d=64, V=1024, factor=4, workers=None) -> SuiteResult:
    """Fused forward peak must not move with V; canonical peak must scale with it."""
    peaks = {}
    for v in (V, factor * V):
        rng = np.random.default_rng(v)
        H = rng.normal(size=(N, d))
        W = rng.normal(size=(v, d)) / math.sqrt(d)
        Y = rng.integers(0, v, size=N)
        fused, canon = MemoryLedger(), MemoryLedger()
        fused_forward(H, W, Y, Reduction.MEAN, precision, ledger=fused, workers=workers)
        reference_loss(H, W, Y, Reduction.MEAN, precision, ledger=canon)
        peaks[v] = (fused.peak_bytes, canon.peak_bytes)
    fused_delta = abs(peaks[factor * V][0] - peaks[V][0])
    growth = peaks[factor * V][1] / peaks[V][1]
    ok = fused_delta == 0 and growth >= factor - 0.1
    notes = [f"fused peak {peaks[V][0]} -> {peaks[factor * V][0]} B",
             f"canonical growth {growth:.3f}x for {factor}x V"]
    return SuiteResult("memory_flat_in_V", float(fused_delta), 0.0, 2, ok, notes)


def run_all(
    precision="f32", seed: int = 42, ranks: int = 4, mode: str | None = None, window: int | None = None,
    workers: int | None = None, quick: bool = False, max_n: int = 64, max_d: int = 64, max_v: int = 1024,
) -> list[SuiteResult]:
    """All suites, seeded from ``seed``; ``quick`` trims instance counts.

    ``max_n``, ``max_d`` and ``max_v`` bound the random shapes of the oracle
    and path suites.
    """
    scale = 4 if quick else 1
    modes = (mode,) if mode else ("tp", "sp", "dp")
    results = [
        oracle_loss_suite(200 // scale, precision, seed, max_n, max_d, max_v, workers=workers),
        path_equivalence_suite(60 // scale, precision, seed + 2, max_n, max_d, max_v, workers=workers),
    ]
    results.extend(gradient_suite(max(50 // scale, 1), seed + 1))
    results.append(window_suite(precision, seed + 3, extra=window))
    # always sweep 1..4 ranks so the default single-rank request still exercises the epilogues
    rank_set = tuple(sorted(set(range(1, 5)) | {ranks}))
    results.append(shard_suite(precision, seed + 4, rank_set, modes, workers=workers))
    results.append(stability_suite(precision, seed + 5))
    results.append(memory_suite(precision, workers=workers))
    return results
