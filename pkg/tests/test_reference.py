import math

import mpmath
import numpy as np
import pytest

from fusedce.core import MemoryLedger, Reduction
from fusedce.errors import InconsistentUpstreamError
from fusedce.reference import (
    ce_loss_from_logits,
    project_logits,
    reference_backward,
    reference_loss,
    softmax_rows,
)
from conftest import random_problem


def triple_loop_matmul(H, W):
    N, d = H.shape
    V = W.shape[0]
    Z = np.zeros((N, V))
    for n in range(N):
        for v in range(V):
            acc = 0.0
            for k in range(d):
                acc += H[n, k] * W[v, k]
            Z[n, v] = acc
    return Z


def mp_loss(z, y):
    return float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in z)) - mpmath.mpf(float(z[y])))


class TestProjectLogits:
    def test_hand(self):
        Z = project_logits(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), precision="f64")
        np.testing.assert_array_equal(Z, [[1.0, 2.0, 3.0]])

    def test_zero_hidden(self, rng):
        Z = project_logits(np.zeros((3, 4)), rng.normal(size=(5, 4)))
        np.testing.assert_array_equal(Z, np.zeros((3, 5)))

    def test_triple_loop_oracle(self, rng):
        H, W, _ = random_problem(rng, 8, 16, 32)
        np.testing.assert_allclose(project_logits(H, W, precision="f64"), triple_loop_matmul(H, W), rtol=1e-12)

    def test_charges_logits(self):
        led = MemoryLedger()
        project_logits(np.zeros((3, 2)), np.zeros((5, 2)), led, "f32")
        assert led.peak_by_tag["logits"] == 3 * 5 * 4


class TestCrossEntropy:
    def test_uniform(self):
        assert ce_loss_from_logits(np.zeros((1, 4)), [0]) == pytest.approx(math.log(4), abs=1e-15)

    def test_two_logits_high_precision(self):
        got = ce_loss_from_logits(np.array([[0.0, 1.0]]), [1])
        assert got == pytest.approx(mp_loss([0.0, 1.0], 1), rel=1e-15)
        assert got == pytest.approx(0.3132617, abs=1e-7)

    @pytest.mark.parametrize("z", [-50.0, 0.0, 3.5, 1e4])
    def test_single_logit(self, z):
        assert ce_loss_from_logits(np.array([[z]]), [0]) == 0.0

    def test_random_rows_vs_mpmath(self, rng):
        Z = rng.normal(size=(6, 9)) * 5
        Y = rng.integers(0, 9, size=6)
        got = ce_loss_from_logits(Z, Y, "none")
        want = [mp_loss(Z[i], Y[i]) for i in range(6)]
        np.testing.assert_allclose(got, want, rtol=1e-13)

    def test_reductions_and_ignore(self):
        Z = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 0.0]])
        Y = np.array([0, -100, 1])
        none = ce_loss_from_logits(Z, Y, "none", ignore_index=-100)
        assert none[1] == 0.0
        assert ce_loss_from_logits(Z, Y, "sum", ignore_index=-100) == pytest.approx(2 * math.log(2))
        assert ce_loss_from_logits(Z, Y, "mean", ignore_index=-100) == pytest.approx(math.log(2))


class TestReferenceBackward:
    def test_hand_example(self):
        H, W, Y = np.array([[1.0]]), np.array([[0.0], [1.0]]), np.array([1])
        dH, dW = reference_backward(H, W, Y, Reduction.SUM, 1.0, "f64")
        p0 = 1 / (1 + math.e)
        assert p0 == pytest.approx(0.2689414, abs=1e-7)
        np.testing.assert_allclose(dH, [[-p0]], atol=1e-12)
        np.testing.assert_allclose(dW, [[p0], [-p0]], atol=1e-12)

    def test_zero_hidden_uniform_symmetry(self, rng):
        W = rng.normal(size=(6, 3))
        Y = np.array([0, 4, 5])
        dH, _ = reference_backward(np.zeros((3, 3)), W, Y, "sum", 1.0, "f64")
        np.testing.assert_allclose(dH, W.mean(axis=0) - W[Y], atol=1e-14)

    def test_finite_differences(self, rng):
        H, W, Y = random_problem(rng, 6, 8, 12)
        dH, dW = reference_backward(H, W, Y, "mean", 1.0, "f64")
        step = 1e-5

        def loss(Hx, Wx):
            return ce_loss_from_logits(project_logits(Hx, Wx, precision="f64"), Y, "mean")

        for X, G, first in ((H, dH, True), (W, dW, False)):
            for idx in np.ndindex(X.shape):
                plus, minus = X.copy(), X.copy()
                plus[idx] += step
                minus[idx] -= step
                args_p = (plus, W) if first else (H, plus)
                args_m = (minus, W) if first else (H, minus)
                fd = (loss(*args_p) - loss(*args_m)) / (2 * step)
                assert abs(fd - G[idx]) <= 1e-6 * abs(G[idx]) + 1e-8

    def test_softmax_rows_sum_to_one(self, rng):
        P = softmax_rows(rng.normal(size=(300, 7)) * 30)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=1e-12)

    def test_none_needs_vector_upstream(self, rng):
        H, W, Y = random_problem(rng, 3, 2, 4)
        with pytest.raises(InconsistentUpstreamError):
            reference_backward(H, W, Y, "none", 1.0)

    def test_peak_covers_logits_and_probs(self, rng):
        H, W, Y = random_problem(rng, 4, 2, 10)
        led = MemoryLedger()
        reference_backward(H, W, Y, "mean", 1.0, "f32", ledger=led)
        assert led.peak_bytes >= 2 * 4 * 10 * 4
        assert led.current_bytes == 0

    def test_loss_ledger_balanced(self, rng):
        H, W, Y = random_problem(rng, 4, 2, 10)
        led = MemoryLedger()
        reference_loss(H, W, Y, ledger=led)
        assert led.current_bytes == 0 and led.peak_by_tag["logits"] == 160
