import math

import numpy as np
import pytest

from fusedce.errors import DuplicateTargetError
from fusedce.stats import SoftmaxStats, losses_from_stats, merge_all, merge_stats, stream_stats


def lse_oracle(z):
    z = np.asarray(z, dtype=np.float64)
    top = z.max()
    return top + math.log(np.exp(z - top).sum())


def test_stream_hand_example():
    W = np.array([[0.0], [1.0], [2.0]])
    st = stream_stats([1.0], W, 2)
    assert st.m == 2.0
    assert st.a == pytest.approx(math.exp(-2) + math.exp(-1) + 1, rel=1e-15)
    assert st.a == pytest.approx(1.5032147, abs=1e-7)
    assert st.z_target == 2.0 and st.target_found


def test_stream_empty_range_is_identity():
    st = stream_stats([1.0], np.ones((3, 1)), 0, vocab_range=(1, 1))
    assert (st.m, st.a, st.target_found) == (-math.inf, 0.0, False)


@pytest.mark.parametrize("k", [1, 2, 7])
def test_stream_equal_logits(k):
    st = stream_stats([1.0, 0.0], np.tile([0.5, 9.0], (k, 1)), None)
    assert st.m == 0.5 and st.a == k


def test_stream_reports_every_update():
    seen = []
    stream_stats([1.0], np.array([[0.0], [1.0]]), 0, on_update=lambda *args: seen.append(args))
    assert [s[0] for s in seen] == [0, 1]
    assert seen[-1][2] == 1.0


def test_stream_target_outside_range():
    st = stream_stats([1.0], np.ones((4, 1)), 0, vocab_range=(2, 4))
    assert not st.target_found


def test_stream_bad_range():
    with pytest.raises(ValueError):
        stream_stats([1.0], np.ones((2, 1)), 0, vocab_range=(1, 3))


def test_merge_closed_form():
    out = merge_stats(SoftmaxStats(1.0, 2.0, 0.0, False), SoftmaxStats(3.0, 1.0, 0.0, False))
    assert out.m == 3.0
    assert out.a == pytest.approx(2 * math.exp(-2) + 1, rel=1e-15)
    assert out.a == pytest.approx(1.2706706, abs=1e-7)


def test_merge_identity_both_sides():
    s = SoftmaxStats(0.7, 2.5, 0.3, True)
    ident = SoftmaxStats.identity()
    for out in (merge_stats(s, ident), merge_stats(ident, s)):
        assert (out.m, out.a, out.z_target, out.target_found) == (0.7, 2.5, 0.3, True)


def test_merge_two_identities():
    out = merge_stats(SoftmaxStats.identity(), SoftmaxStats.identity())
    assert out.m == -math.inf and out.a == 0.0


def test_merge_duplicate_target():
    s = SoftmaxStats(0.0, 1.0, 0.0, True)
    with pytest.raises(DuplicateTargetError):
        merge_stats(s, s)


def test_merge_vector_duplicate_reports_positions():
    a = SoftmaxStats(np.zeros(3), np.ones(3), np.zeros(3), np.array([True, False, True]))
    b = SoftmaxStats(np.zeros(3), np.ones(3), np.zeros(3), np.array([False, False, True]))
    with pytest.raises(DuplicateTargetError, match=r"\[2\]"):
        merge_stats(a, b)


def test_cut_point_sweep_f32(rng):
    z = rng.normal(size=40).astype(np.float32) * 4
    h = np.array([1.0])
    W = z[:, None].astype(np.float64)
    y = 17
    whole = stream_stats(h, W, y)
    assert whole.logsumexp() == pytest.approx(lse_oracle(z), rel=1e-12)
    for k in range(len(z) + 1):
        left = stream_stats(h, W, y, (0, k))
        right = stream_stats(h, W, y, (k, len(z)))
        merged = merge_stats(left, right)
        assert merged.target_found
        assert merged.z_target == whole.z_target
        assert merged.logsumexp() == pytest.approx(whole.logsumexp(), rel=1e-6)


def test_merge_all_left_fold(rng):
    W = rng.normal(size=(30, 3))
    h = rng.normal(size=3)
    cuts = [0, 4, 9, 9, 22, 30]
    parts = [stream_stats(h, W, 5, (lo, hi)) for lo, hi in zip(cuts, cuts[1:])]
    assert merge_all(parts).logsumexp() == pytest.approx(lse_oracle(W @ h), rel=1e-13)


def test_losses_from_stats_masks_ignored():
    st = SoftmaxStats(np.array([1.0, 2.0]), np.array([1.0, 0.0]), np.array([0.5, 0.0]), np.array([True, False]))
    out = losses_from_stats(st, np.array([True, False]))
    np.testing.assert_array_equal(out, [0.5, 0.0])


def test_identity_vector_and_indexing():
    st = SoftmaxStats.identity(4, np.float32)
    assert len(st) == 4 and st.m.dtype == np.float32
    assert st.nbytes == 4 * (3 * 4 + 1)
    assert len(st[1:3]) == 2
