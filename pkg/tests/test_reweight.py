import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainmix.reweight import (
    LossValueError,
    ReweightScheduler,
    UndefinedFitError,
    WeightVector,
    combine_loss,
    compute_tbs,
    compute_tss,
    compute_weights,
    estimate_slope,
)

# Values below were produced by a throwaway plain-Python oracle (explicit OLS
# sums, scalar softmax) written before the scheduler.
OLS_ALPHA = -0.11499999999999999
OLS_BETA = 1.075
TBS_FOUR = (0.09147749964060212, 0.1692670511151542, 0.31320635900397287, 0.4260490902402708)
TSS_TWO = (0.8807970779778823, 0.11920292202211755)
AF_AT_25 = 5.674926809990965e-05


class TestPushLoss:
    def test_first_push_is_baseline(self):
        s = ReweightScheduler(2)
        s.push_loss(0, 4.0)
        assert s.windows[0].raw_baseline == 4.0
        assert s.windows[0].entries[-1][1] == 1.0

    def test_second_push_normalized(self):
        s = ReweightScheduler(2)
        s.push_loss(0, 4.0)
        s.push_loss(0, 2.0)
        assert s.windows[0].entries[-1][1] == 0.5

    def test_window_is_bounded(self):
        s = ReweightScheduler(1, window_size=10)
        for i in range(12):
            s.push_loss(0, 1.0 + i)
        assert [k for k, _ in s.windows[0].entries] == list(range(3, 13))

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.nan, math.inf])
    def test_rejects_bad_loss(self, bad):
        s = ReweightScheduler(3)
        with pytest.raises(LossValueError, match="type 2 at step 1"):
            s.push_loss(2, bad)

    def test_rejects_bad_loss_inside_step(self):
        s = ReweightScheduler(2)
        s.step([1.0, 1.0])
        with pytest.raises(LossValueError, match="type 1 at step 2"):
            s.step([1.0, -3.0])


class TestEstimateSlope:
    def test_exact_line(self):
        est = estimate_slope([(k, 2 * k + 3) for k in range(1, 11)])
        assert est.alpha == pytest.approx(2.0, abs=1e-12)
        assert est.beta == pytest.approx(3.0, abs=1e-12)

    def test_constant(self):
        est = estimate_slope([(k, 5.0) for k in range(1, 11)])
        assert est.alpha == 0.0
        assert est.beta == 5.0

    def test_oracle_value(self):
        est = estimate_slope([(1, 1.0), (2, 0.8), (3, 0.7), (4, 0.65)])
        assert est.alpha == pytest.approx(OLS_ALPHA, abs=1e-12)
        assert est.beta == pytest.approx(OLS_BETA, abs=1e-12)

    @pytest.mark.parametrize("entries", [[], [(1, 1.0)], [(3, 1.0), (3, 2.0)]])
    def test_undefined(self, entries):
        with pytest.raises(UndefinedFitError):
            estimate_slope(entries)

    @given(
        st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 1000), st.integers(2, 30)
    )
    def test_exactness_property(self, a, b, start, n):
        est = estimate_slope([(k, a * k + b) for k in range(start, start + n)])
        assert abs(est.alpha - a) <= 1e-10 * max(1.0, abs(a))
        # intercept error grows with the distance of the abscissae from zero
        assert abs(est.beta - b) <= 1e-10 * max(1.0, abs(a) * (start + n), abs(b))

    def test_window_fast_path_matches_generic(self):
        s = ReweightScheduler(1, window_size=10)
        rng = np.random.default_rng(5)
        for v in np.exp(rng.normal(size=25)):
            s.step([float(v)])
            w = s.windows[0]
            if len(w) >= 2:
                assert w.slope() == pytest.approx(estimate_slope(w.entries).alpha, abs=1e-14)


class TestTBS:
    def test_equal_slopes_uniform(self):
        assert compute_tbs([-0.1] * 5).weights == pytest.approx([0.2] * 5)

    def test_oracle_four_types(self):
        w = compute_tbs([-0.30, -0.20, -0.10, -0.05]).weights
        assert w == pytest.approx(TBS_FOUR, abs=1e-12)
        assert np.argmax(w) == 3

    @pytest.mark.parametrize("a", [1e-6, 0.3, 17.0])
    def test_two_equal(self, a):
        assert compute_tbs([-a, -a]).weights == pytest.approx((0.5, 0.5))

    def test_all_zero_is_uniform(self):
        assert compute_tbs([0.0, 0.0, 0.0]).weights == pytest.approx([1 / 3] * 3)

    @given(
        st.lists(st.floats(-1, 1), min_size=2, max_size=8),
        st.data(),
    )
    def test_monotone_in_own_slope(self, alphas, data):
        i = data.draw(st.integers(0, len(alphas) - 1))
        bump = data.draw(st.floats(1e-3, 1.0))
        raised = list(alphas)
        raised[i] += bump
        lo = compute_tbs(alphas).weights[i]
        hi = compute_tbs(raised).weights[i]
        assert hi >= lo - 1e-12
        # strict once two other slopes are nonzero; with a single nonzero other
        # of opposite sign the normalized gap to it is constant
        nonzero_others = sum(1 for j, a in enumerate(alphas) if j != i and abs(a) >= 1e-2)
        if nonzero_others >= 2 and lo < 0.999 and hi < 0.999:
            assert hi > lo

    def test_single_opposite_other_is_flat(self):
        assert compute_tbs([0.1, -0.3]).weights == pytest.approx(compute_tbs([0.5, -0.3]).weights)


class TestTSS:
    def test_identical_uniform(self):
        hist = [-0.2, -0.1, -0.15]
        w = compute_tss([-0.1] * 3, [hist] * 3).weights
        assert w == pytest.approx([1 / 3] * 3)

    def test_oracle_two_types(self):
        w = compute_tss([-0.1, 0.1], [[-0.1] * 10, [0.1] * 10], window_size=10).weights
        assert w == pytest.approx(TSS_TWO, abs=1e-12)

    def test_single_entry_histories(self):
        assert compute_tss([-0.2, -0.2], [[-0.2], [-0.2]]).weights == pytest.approx((0.5, 0.5))

    def test_zero_history_scores_zero(self):
        # type 0 scores 0, type 1 scores -10*0.1/1.0 = -1
        w = compute_tss([0.0, 0.1], [[0.0] * 10, [0.1] * 10]).weights
        e = math.exp(-1.0)
        assert w == pytest.approx((1 / (1 + e), e / (1 + e)))

    @given(
        st.lists(st.floats(-1, -1e-3), min_size=1, max_size=7),
        st.floats(1e-3, 1.0),
        st.data(),
    )
    def test_diverging_type_is_minimum(self, negatives, positive, data):
        pos = data.draw(st.integers(0, len(negatives)))
        alphas = list(negatives)
        alphas.insert(pos, positive)
        hists = [[a] * 4 for a in alphas]
        w = compute_tss(alphas, hists).weights
        assert np.argmin(w) == pos
        assert sum(x == w[pos] for x in w) == 1


class TestAF:
    def test_single_step(self):
        assert ReweightScheduler(2).adaptivity_factor(-0.3) == 1.0

    @pytest.mark.parametrize("alpha", [-0.125, -0.5, -2.0])
    def test_identical_scores_exactly_one(self, alpha):
        s = ReweightScheduler(2)
        assert all(s.adaptivity_factor(alpha) == 1.0 for _ in range(50))

    def test_steady_state_near_one(self):
        s = ReweightScheduler(2)
        assert all(abs(s.adaptivity_factor(-0.1) - 1.0) < 1e-12 for _ in range(500))

    def test_divergence_lowers_af(self):
        s = ReweightScheduler(2, tau=5)
        afs = [s.adaptivity_factor(a) for a in [-0.1] * 20 + [0.1] * 5]
        assert afs[19] == pytest.approx(1.0, abs=1e-12)
        assert afs[24] < 1.0 and afs[24] < afs[19]
        assert afs[24] == pytest.approx(AF_AT_25, rel=1e-9)

    def test_zero_denominator(self):
        s = ReweightScheduler(2)
        assert s.adaptivity_factor(0.0) == 1.0
        assert s.af_score_history == [0.0]

    def test_matches_full_softmax(self):
        rng = np.random.default_rng(11)
        s = ReweightScheduler(3)
        for _ in range(200):
            af = s.adaptivity_factor(float(rng.normal(scale=0.1)))
            z = np.asarray(s.af_score_history)
            p = np.exp(z - z.max())
            p /= p.sum()
            assert af == pytest.approx(min(len(z) * p[-1], 1.0), rel=1e-9, abs=1e-300)


class TestComputeWeights:
    def test_endpoints_and_midpoint(self):
        tbs = WeightVector((0.8, 0.2))
        tss = WeightVector((0.2, 0.8))
        assert compute_weights(tbs, tss, 1.0).weights == (0.8, 0.2)
        assert compute_weights(tbs, tss, 0.0).weights == (0.2, 0.8)
        assert compute_weights(tbs, tss, 0.5).weights == pytest.approx((0.5, 0.5))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_weights(WeightVector((1.0,)), WeightVector((0.5, 0.5)), 0.3)


class TestCombineLoss:
    def test_uniform_is_sum(self):
        assert combine_loss([1, 2, 3, 4], [0.25] * 4) == 10

    def test_endpoint(self):
        assert combine_loss([3, 7], [1, 0]) == 6

    def test_oracle(self):
        assert combine_loss([4, 8], [0.25, 0.75]) == 14

    def test_mismatch(self):
        with pytest.raises(ValueError):
            combine_loss([1, 2], [1.0])


def _linear_streams(slopes, steps, start=10.0):
    return [[start + a * k for a in slopes] for k in range(steps)]


class TestStep:
    def test_first_step_uniform(self):
        w = ReweightScheduler(4).step([1.0, 2.0, 3.0, 4.0])
        assert w.weights == (0.25,) * 4 and w.af is None

    def test_identical_streams_stay_uniform(self):
        s = ReweightScheduler(2)
        rng = np.random.default_rng(0)
        for v in np.exp(rng.normal(size=100)):
            assert s.step([v, v]).weights == pytest.approx((0.5, 0.5), abs=1e-15)

    def test_exponential_decays_rank_order(self):
        rates = [0.008, 0.004, 0.002, 0.001]
        s = ReweightScheduler(4)
        for k in range(100):
            w = s.step([math.exp(-r * k) for r in rates])
        # slowest decay (smallest rate) gets the largest weight
        assert list(np.argsort(w.weights)) == [0, 1, 2, 3]

    def test_missing_type_carried_forward(self):
        s = ReweightScheduler(2)
        s.step([4.0, 2.0])
        s.step({0: 2.0})
        assert list(s.windows[1].entries) == [(1, 1.0), (2, 1.0)]
        assert list(s.windows[0].entries) == [(1, 1.0), (2, 0.5)]

    def test_unseen_type_delays_warmup(self):
        s = ReweightScheduler(2)
        for _ in range(3):
            w = s.step([1.0, None])
        assert w.af is None and s.af_score_history == []

    def test_bad_length(self):
        with pytest.raises(ValueError):
            ReweightScheduler(3).step([1.0, 2.0])

    @pytest.mark.parametrize(
        "kwargs", [dict(window_size=1), dict(tau=0), dict(mode="bogus"), dict(warmup_min_points=11)]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ReweightScheduler(2, **kwargs)

    def test_modes(self):
        streams = _linear_streams([-0.01, -0.02, 0.005], 30)
        out = {}
        for mode in ("reweighted", "uniform", "fixed-af-0.5", "no-tss", "no-tbs"):
            s = ReweightScheduler(3, mode=mode)
            for row in streams:
                out[mode] = s.step(row)
        ref = out["reweighted"]
        assert out["uniform"].weights == (1 / 3,) * 3
        assert out["no-tss"].weights == pytest.approx(ref.tbs)
        assert out["no-tbs"].weights == pytest.approx(ref.tss)
        mid = [0.5 * a + 0.5 * b for a, b in zip(ref.tbs, ref.tss)]
        assert out["fixed-af-0.5"].weights == pytest.approx(mid)
        assert out["uniform"].af == pytest.approx(ref.af)


loss_streams = st.integers(2, 5).flatmap(
    lambda k: st.lists(
        st.lists(st.floats(1e-3, 1e3), min_size=k, max_size=k), min_size=1, max_size=40
    )
)


class TestSchedulerProperties:
    @settings(max_examples=200, deadline=None)
    @given(loss_streams)
    def test_simplex(self, rows):
        s = ReweightScheduler(len(rows[0]))
        for row in rows:
            w = np.asarray(s.step(row).weights)
            assert abs(w.sum() - 1.0) <= 1e-9
            assert np.all((w >= 0) & (w <= 1))

    @settings(max_examples=100, deadline=None)
    @given(loss_streams, st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, rows, rnd):
        k = len(rows[0])
        perm = list(range(k))
        rnd.shuffle(perm)
        a, b = ReweightScheduler(k), ReweightScheduler(k)
        for row in rows:
            wa = a.step(row).weights
            wb = b.step([row[p] for p in perm]).weights
            assert [wa[p] for p in perm] == pytest.approx(wb, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(loss_streams, st.floats(1e-3, 1e3), st.data())
    def test_scale_invariance(self, rows, c, data):
        k = len(rows[0])
        i = data.draw(st.integers(0, k - 1))
        a, b = ReweightScheduler(k), ReweightScheduler(k)
        for row in rows:
            scaled = list(row)
            scaled[i] *= c
            assert a.step(row).weights == pytest.approx(b.step(scaled).weights, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(loss_streams)
    def test_convex_combination_bounds(self, rows):
        s = ReweightScheduler(len(rows[0]))
        for row in rows:
            w = s.step(row)
            if w.tbs is None:
                continue
            for wi, a, b in zip(w.weights, w.tbs, w.tss):
                assert min(a, b) - 1e-15 <= wi <= max(a, b) + 1e-15
