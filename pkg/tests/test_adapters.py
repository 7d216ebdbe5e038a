import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptseg import adapters as ad
from conceptseg import numerics as nm
from conceptseg.errors import FrozenParameterError, InsufficientStatsError, ShapeError


class TestAdapterForward:
    def test_birth_identity_outputs_zero(self):
        a = ad.make_adapter(d=8, rank=3, birth_task=1, rng=nm.Rng(0))
        x = nm.Tensor(nm.Rng(1).normal((5, 8)))
        assert np.array_equal(a(x).data, np.zeros((5, 8)))

    def test_zero_input_zero_output(self):
        a = ad.make_adapter(d=8, rank=3, birth_task=1, rng=nm.Rng(0))
        a.w_up.data = nm.Rng(2).normal((3, 8))
        assert np.array_equal(a(nm.Tensor(np.zeros((4, 8)))).data, np.zeros((4, 8)))

    def test_matches_composed_oracle(self):
        from tests.test_numerics import naive_matmul

        rng = nm.Rng(3)
        a = ad.make_adapter(d=6, rank=2, birth_task=1, rng=rng.child(0))
        a.w_up.data = rng.normal((2, 6))
        x = rng.normal((4, 6))
        expected = naive_matmul(np.maximum(naive_matmul(x, a.w_down.data), 0.0),
                                a.w_up.data)
        assert np.array_equal(a(nm.Tensor(x)).data, expected)

    def test_width_mismatch(self):
        a = ad.make_adapter(d=8, rank=3, birth_task=1, rng=nm.Rng(0))
        with pytest.raises(ShapeError):
            a(nm.Tensor(np.zeros((4, 7))))

    def test_rank_must_be_below_width(self):
        with pytest.raises(ShapeError):
            ad.make_adapter(d=4, rank=4, birth_task=1, rng=nm.Rng(0))


class TestEstimator:
    def test_zero_input_zero_loss(self):
        e = ad.make_estimator(d=6, r_e=3, rng=nm.Rng(0))
        assert float(e.loss(nm.Tensor(np.zeros((4, 6))))) == 0.0

    def test_loss_nonnegative(self):
        rng = nm.Rng(1)
        e = ad.make_estimator(d=6, r_e=3, rng=rng.child(0))
        for s in range(5):
            assert float(e.loss(nm.Tensor(rng.normal((4, 6))))) >= 0.0

    def test_converges_on_repeated_vector(self):
        rng = nm.Rng(2)
        e = ad.make_estimator(d=6, r_e=3, rng=rng.child(0))
        x = nm.Tensor(np.repeat(rng.normal((1, 6)), 8, axis=0))
        opt = nm.AdamW(e.parameters(), lr=3e-2, weight_decay=0.0)
        for _ in range(500):
            opt.zero_grad()
            loss = e.loss(x)
            loss.backward()
            opt.step()
        assert float(e.loss(x)) < 1e-3

    def test_loss_does_not_touch_input_gradient(self):
        e = ad.make_estimator(d=6, r_e=3, rng=nm.Rng(3))
        x = nm.Tensor(nm.Rng(4).normal((4, 6)), requires_grad=True)
        e.loss(x).backward()
        assert x.grad is None
        assert e.enc.grad is not None and e.dec.grad is not None


class TestZScore:
    def make_est(self, mean, var, n=10):
        e = ad.make_estimator(d=4, r_e=2, rng=nm.Rng(0))
        # variance -> m2 under the sample (n-1) convention
        e.stats = ad.RunningStats.from_state(n, mean, var * (n - 1))
        return e

    def test_errors_at_mean_give_zero(self):
        e = self.make_est(mean=3.0, var=2.0)
        assert abs(e.zscore([3.0, 3.0, 3.0])) < 1e-9

    def test_formula_example(self):
        e = self.make_est(mean=1.0, var=4.0)
        assert abs(e.zscore([5.0]) - 2.0) < 1e-6

    def test_insufficient_stats(self):
        e = ad.make_estimator(d=4, r_e=2, rng=nm.Rng(0))
        e.stats.update([1.0])
        with pytest.raises(InsufficientStatsError):
            e.zscore([1.0])

    def test_gaussian_stream_small_z(self):
        # draws from the fitted distribution should score near zero
        for seed in range(20):
            rng = nm.Rng(100 + seed)
            e = ad.make_estimator(d=4, r_e=2, rng=rng.child(0))
            train = 3.0 + 1.5 * rng.normal((400,))
            e.stats.update(train)
            probe = 3.0 + 1.5 * rng.normal((200,))
            assert abs(e.zscore(probe)) < 0.5

    def test_pure_read(self):
        e = self.make_est(mean=1.0, var=4.0, n=7)
        before = e.stats.state()
        e.zscore([10.0, 20.0])
        assert e.stats.state() == before


class TestRunningStats:
    def test_constant_stream(self):
        rs = ad.RunningStats()
        rs.update([2.0, 2.0, 2.0])
        assert rs.mean == 2.0 and rs.variance == 0.0

    def test_one_two_three_sample_variance(self):
        rs = ad.RunningStats()
        rs.update([1.0, 2.0, 3.0])
        assert abs(rs.mean - 2.0) < 1e-12
        assert abs(rs.variance - 1.0) < 1e-12  # (n-1) convention

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30),
           st.randoms(use_true_random=False))
    @settings(max_examples=50, deadline=None)
    def test_order_insensitive_mean(self, values, rnd):
        a = ad.RunningStats()
        a.update(values)
        shuffled = list(values)
        rnd.shuffle(shuffled)
        b = ad.RunningStats()
        b.update(shuffled)
        assert abs(a.mean - b.mean) <= 1e-9 * max(1.0, abs(a.mean))

    def test_matches_numpy_two_pass(self):
        rng = nm.Rng(5)
        vals = rng.normal((257,)) * 3.0 + 1.0
        rs = ad.RunningStats()
        rs.update(vals)
        assert abs(rs.mean - vals.mean()) < 1e-12
        assert abs(rs.variance - vals.var(ddof=1)) < 1e-10


class TestFreeze:
    def test_freeze_then_train_leaves_bits(self):
        rng = nm.Rng(6)
        a = ad.make_adapter(d=6, rank=2, birth_task=1, rng=rng.child(0))
        e = ad.make_estimator(d=6, r_e=2, rng=rng.child(1))
        a.w_up.data = rng.normal((2, 6))
        other = nm.Tensor(rng.normal((6, 6)), requires_grad=True)
        ad.freeze_pair(a, e)
        sums_before = [nm.checksum(p) for p in a.parameters() + e.parameters()]
        opt = nm.AdamW([other], lr=1e-2)
        x = nm.Tensor(rng.normal((4, 6)))
        for _ in range(100):
            opt.zero_grad()
            loss = nm.tsum(nm.matmul(x, other) * 1.0) + nm.tsum(a(x))
            loss.backward()
            opt.step()
        sums_after = [nm.checksum(p) for p in a.parameters() + e.parameters()]
        assert sums_before == sums_after

    def test_freeze_idempotent(self):
        a = ad.make_adapter(d=6, rank=2, birth_task=1, rng=nm.Rng(0))
        e = ad.make_estimator(d=6, r_e=2, rng=nm.Rng(1))
        ad.freeze_pair(a, e)
        ad.freeze_pair(a, e)
        assert a.frozen and e.frozen

    def test_frozen_estimator_rejects_stats_update(self):
        e = ad.make_estimator(d=6, r_e=2, rng=nm.Rng(1))
        e.freeze()
        with pytest.raises(FrozenParameterError):
            e.update_stats([1.0])

    def test_optimizer_update_after_freeze_is_hard_error(self):
        a = ad.make_adapter(d=6, rank=2, birth_task=1, rng=nm.Rng(0))
        opt = nm.AdamW(a.parameters(), lr=1e-3)
        a.freeze()
        with pytest.raises(FrozenParameterError):
            opt.step()

    def test_estimator_adapter_gradients_disjoint(self):
        rng = nm.Rng(7)
        a = ad.make_adapter(d=6, rank=2, birth_task=1, rng=rng.child(0))
        e = ad.make_estimator(d=6, r_e=2, rng=rng.child(1))
        x = nm.Tensor(rng.normal((4, 6)))
        loss = e.loss(x)
        loss.backward()
        assert a.w_down.grad is None and a.w_up.grad is None
        loss2 = nm.tsum(a(x))
        loss2.backward()
        assert e.enc.grad is not None  # from the first backward only
        enc_before = e.enc.grad.copy()
        assert np.array_equal(enc_before, e.enc.grad)
