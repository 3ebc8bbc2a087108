"""Two-stage baseline: materialise the logits, then take cross-entropy.

This is the oracle the fused kernels are checked against and the memory
baseline they are measured against, so it favours obviousness over speed.
"""

from __future__ import annotations

import numpy as np

from .core import (
    MemoryLedger,
    PrecisionMode,
    Reduction,
    _maybe_hold,
    position_scale,
    prepare,
    reduce_losses,
    round_bf16,
)
from .errors import DimensionMismatchError, TargetOutOfRangeError

# rows of logits handled per block when forming softmax temporaries
ROW_BLOCK = 256


def project_logits(H, W, ledger: MemoryLedger | None = None, precision=None) -> np.ndarray:
    """Dense ``Z = H @ W.T`` of shape ``(N, V)`` at compute precision."""
    mode = PrecisionMode.parse(precision)
    H = np.asarray(H)
    W = np.asarray(W)
    if H.ndim != 2 or W.ndim != 2 or H.shape[1] != W.shape[1]:
        raise DimensionMismatchError(f"cannot project H{H.shape} onto W{W.shape}")
    Hc = np.ascontiguousarray(H, dtype=mode.compute)
    Wc = np.ascontiguousarray(W, dtype=mode.compute)
    if mode.bf16_storage:
        Hc, Wc = round_bf16(Hc), round_bf16(Wc)
    nbytes = H.shape[0] * W.shape[0] * mode.itemsize
    with _maybe_hold(ledger, nbytes, "logits"):
        return Hc @ Wc.T


def _row_losses(Z: np.ndarray, targets: np.ndarray, valid: np.ndarray, ledger) -> np.ndarray:
    N, V = Z.shape
    out = np.zeros(N, dtype=Z.dtype)
    block = min(ROW_BLOCK, max(N, 1))
    # shifted logits and their exponentials for one row block
    with _maybe_hold(ledger, 2 * block * V * Z.dtype.itemsize, "softmax_block"):
        for r0 in range(0, N, block):
            zb = Z[r0 : r0 + block]
            m = zb.max(axis=1)
            shifted = zb - m[:, None]
            lse = m + np.log(np.exp(shifted).sum(axis=1))
            rows = np.arange(zb.shape[0])
            t = np.where(valid[r0 : r0 + block], targets[r0 : r0 + block], 0)
            loss = lse - zb[rows, t]
            out[r0 : r0 + block] = np.where(valid[r0 : r0 + block], loss, 0)
    return out


def ce_loss_from_logits(
    Z,
    Y,
    reduction: Reduction | str = Reduction.MEAN,
    *,
    ignore_index: int | None = None,
    ledger: MemoryLedger | None = None,
):
    """Safe-softmax cross-entropy of materialised logits.

    Returns a float for ``mean``/``sum`` and a length-N array for ``none``.
    """
    Z = np.asarray(Z)
    if not np.issubdtype(Z.dtype, np.floating):
        Z = Z.astype(np.float64)
    Y = np.asarray(Y)
    if Z.ndim != 2 or Y.ndim != 1 or Y.shape[0] != Z.shape[0]:
        raise DimensionMismatchError(f"logits {Z.shape} vs targets {Y.shape}")
    valid = np.ones(len(Y), dtype=bool) if ignore_index is None else Y != ignore_index
    active = Y[valid]
    if active.size and (active.min() < 0 or active.max() >= Z.shape[1]):
        raise TargetOutOfRangeError(f"targets must lie in [0, {Z.shape[1]})")
    per_position = _row_losses(Z, Y.astype(np.int64), valid, ledger)
    return reduce_losses(per_position, valid, reduction)


def reference_loss(
    H, W, Y, reduction=Reduction.MEAN, precision=None, *, ignore_index=None, ledger=None
):
    """``ce_loss_from_logits(project_logits(H, W))`` with the logits held throughout."""
    prob = prepare(H, W, Y, precision, ignore_index)
    N, _, V = prob.dims
    with _maybe_hold(ledger, N * V * prob.precision.itemsize, "logits"):
        Z = prob.H @ prob.W.T
        per_position = _row_losses(Z, prob.targets, prob.valid, ledger)
        del Z
    return reduce_losses(per_position, prob.valid, reduction)


def softmax_rows(Z: np.ndarray) -> np.ndarray:
    P = np.empty_like(Z)
    for r0 in range(0, Z.shape[0], ROW_BLOCK):
        zb = Z[r0 : r0 + ROW_BLOCK]
        e = np.exp(zb - zb.max(axis=1, keepdims=True))
        P[r0 : r0 + ROW_BLOCK] = e / e.sum(axis=1, keepdims=True)
    return P


def reference_backward(
    H,
    W,
    Y,
    reduction=Reduction.MEAN,
    upstream=1.0,
    precision=None,
    *,
    ignore_index=None,
    ledger: MemoryLedger | None = None,
):
    """Gradients ``(dH, dW)`` through fully materialised logits and softmax.

    ``upstream`` is a scalar for mean/sum and a length-N vector for none.
    The mean reduction folds in ``1 / N_valid``.
    """
    prob = prepare(H, W, Y, precision, ignore_index)
    N, _, V = prob.dims
    dtype = prob.precision.compute
    gamma = position_scale(upstream, reduction, prob.valid, dtype)
    nbytes = N * V * prob.precision.itemsize
    with _maybe_hold(ledger, nbytes, "logits"), _maybe_hold(ledger, nbytes, "probs"):
        Z = prob.H @ prob.W.T
        with _maybe_hold(ledger, 2 * min(ROW_BLOCK, N) * V * prob.precision.itemsize, "softmax_block"):
            G = softmax_rows(Z)
        del Z
        rows = np.flatnonzero(prob.valid)
        G[rows, prob.targets[rows]] -= 1
        G *= gamma[:, None]
        dH = G @ prob.W
        dW = G.T @ prob.H
        del G
    return dH, dW
