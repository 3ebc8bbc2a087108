import numpy as np
import pytest

from fusedce.backward import fused_backward_recompute
from fusedce.core import F32, F64
from fusedce.errors import DuplicateTargetError, InvalidLayoutError, UnsupportedReductionError
from fusedce.forward import fused_forward
from fusedce.parallel import (
    ParallelMode,
    ShardLayout,
    dp_step,
    shard,
    sp_to_tp_gather,
    tp_backward,
    tp_forward,
    tp_partials,
)
from fusedce.stats import merge_all
from conftest import random_problem


def rel(a, b):
    return np.max(np.abs(np.asarray(a) - b)) / max(np.max(np.abs(b)), 1e-30)


class TestLayout:
    @pytest.mark.parametrize(
        "mode, length, ranks, ranges",
        [
            ("tp", 8, 2, ((0, 4), (4, 8))),
            ("tp", 7, 2, ((0, 4), (4, 7))),
            ("sp", 5, 5, tuple((i, i + 1) for i in range(5))),
        ],
    )
    def test_even(self, mode, length, ranks, ranges):
        layout = ShardLayout.even(mode, length, ranks)
        assert layout.ranges == ranges
        assert layout.mode is ParallelMode(mode)
        assert layout.ranks == ranks

    @pytest.mark.parametrize(
        "ranges, length",
        [
            (((0, 4), (3, 8)), 8),
            (((0, 4), (5, 8)), 8),
            (((0, 4), (4, 7)), 8),
            (((0, 4), (4, 4)), 4),
            ((), 0),
        ],
    )
    def test_invalid(self, ranges, length):
        with pytest.raises(InvalidLayoutError):
            ShardLayout(ParallelMode.TP, ranges).validate(length)

    def test_more_ranks_than_rows(self):
        with pytest.raises(InvalidLayoutError):
            ShardLayout.even("tp", 2, 3)


class TestTensorParallel:
    def test_single_rank_identical(self, rng):
        H, W, Y = random_problem(rng, 12, 8, 30)
        out = tp_forward(H, [W], Y, "mean", F32)
        base = fused_forward(H, W, Y, "mean", F32)
        assert out.loss == base.loss

    @pytest.mark.parametrize("R", [2, 3, 4])
    def test_ranks_match_single(self, R):
        rng = np.random.default_rng(R)
        H, W, Y = random_problem(rng, 24, 16, 101)
        Y[-1] = 100
        W_shards = shard(W, ShardLayout.even("tp", 101, R))
        found = sum(p.stats.target_found.astype(int) for p in tp_partials(H, W_shards, Y, F32))
        assert np.all(found == 1)
        out = tp_forward(H, W_shards, Y, "mean", F32)
        base = fused_forward(H, W, Y, "mean", F32)
        assert out.loss == pytest.approx(base.loss, rel=1e-6)
        dH, dWs = tp_backward(H, W_shards, Y, out, 1.0, "mean", F32)
        bH, bW = fused_backward_recompute(H, W, Y, base, 1.0, "mean", F32)
        assert rel(dH, bH) <= 1e-6
        assert rel(np.concatenate(dWs), bW) <= 1e-6

    def test_ignored_positions_claim_nothing(self, rng):
        H, W, Y = random_problem(rng, 6, 4, 10)
        Y[2] = -100
        parts = tp_partials(H, shard(W, ShardLayout.even("tp", 10, 2)), Y, ignore_index=-100)
        found = sum(p.stats.target_found.astype(int) for p in parts)
        assert found[2] == 0 and found.sum() == 5

    def test_duplicate_target_detected(self, rng):
        H, W, _ = random_problem(rng, 4, 3, 8)
        Y = np.array([0, 1, 5, 6])
        parts = tp_partials(H, shard(W, ShardLayout.even("tp", 8, 2)), Y)
        with pytest.raises(DuplicateTargetError):
            merge_all([parts[0].stats, parts[0].stats])

    def test_zero_upstream(self, rng):
        H, W, Y = random_problem(rng, 5, 3, 9)
        W_shards = shard(W, ShardLayout.even("tp", 9, 3))
        out = tp_forward(H, W_shards, Y)
        dH, dWs = tp_backward(H, W_shards, Y, out, 0.0)
        assert not dH.any() and not any(d.any() for d in dWs)


class TestSequenceParallel:
    @pytest.mark.parametrize("R", [1, 2, 3, 7])
    def test_gather_round_trip(self, rng, R):
        H = rng.normal(size=(7, 5))
        layout = ShardLayout.even("sp", 7, R)
        np.testing.assert_array_equal(sp_to_tp_gather(shard(H, layout), layout), H)

    def test_gather_layout_mismatch(self, rng):
        H = rng.normal(size=(6, 2))
        with pytest.raises(InvalidLayoutError):
            sp_to_tp_gather([H[:2], H[2:]], ShardLayout.even("sp", 6, 2))

    def test_gather_then_tp(self, rng):
        H, W, Y = random_problem(rng, 9, 6, 20)
        full = sp_to_tp_gather(shard(H, ShardLayout.even("sp", 9, 3)))
        out = tp_forward(full, shard(W, ShardLayout.even("tp", 20, 2)), Y, "sum", F64)
        assert out.loss == pytest.approx(fused_forward(H, W, Y, "sum", F64).loss, rel=1e-13)


class TestDataParallel:
    def test_two_replicas_match_concatenated(self, rng):
        H, W, Y = random_problem(rng, 16, 8, 25)
        res = dp_step([(H[:8], Y[:8]), (H[8:], Y[8:])], W, "mean", 1.0, F32)
        base = fused_forward(H, W, Y, "mean", F32)
        bH, bW = fused_backward_recompute(H, W, Y, base, 1.0, "mean", F32)
        assert res.loss == pytest.approx(base.loss, rel=1e-6)
        assert rel(res.dW, bW) <= 1e-6
        assert rel(np.concatenate(res.dH), bH) <= 1e-6

    def test_single_replica_identical(self, rng):
        H, W, Y = random_problem(rng, 6, 4, 9)
        res = dp_step([(H, Y)], W, "mean")
        out = fused_forward(H, W, Y, "mean")
        dH, dW = fused_backward_recompute(H, W, Y, out)
        assert res.loss == out.loss
        np.testing.assert_array_equal(res.dW, dW)
        np.testing.assert_array_equal(res.dH[0], dH)

    def test_all_ignored_replica(self, rng):
        H, W, Y = random_problem(rng, 8, 4, 9)
        Y2 = np.full(4, -100)
        res = dp_step([(H[:4], Y[:4]), (H[4:], Y2)], W, "mean", 1.0, F64, ignore_index=-100)
        first = dp_step([(H[:4], Y[:4])], W, "mean", 1.0, F64, ignore_index=-100)
        assert res.rank_losses[1] == 0.0
        assert res.loss == pytest.approx(first.loss / 2, rel=1e-15)
        np.testing.assert_allclose(res.dW, first.dW / 2, rtol=1e-15)
        assert not res.dH[1].any()

    def test_unequal_batches_rejected(self, rng):
        H, W, Y = random_problem(rng, 5, 3, 4)
        with pytest.raises(InvalidLayoutError):
            dp_step([(H[:3], Y[:3]), (H[3:], Y[3:])], W)

    def test_none_rejected(self, rng):
        H, W, Y = random_problem(rng, 4, 3, 4)
        with pytest.raises(UnsupportedReductionError):
            dp_step([(H, Y)], W, "none")
