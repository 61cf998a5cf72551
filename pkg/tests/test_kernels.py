from __future__ import annotations

import math
import warnings

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiencetpp.kernels import (
    _em_run,
    Exponential,
    FitDegenerate,
    KernelEntry,
    MoW,
    Weibull,
    bank_from_json,
    bank_to_json,
    eval_kernel,
    fit_mow,
    fit_weibull,
    kernel_from_dict,
    kernel_to_dict,
    mow_loglik,
    quantize_kernel,
    tail_sup,
    weibull_loglik,
)

scales = st.floats(0.5, 100.0)
shapes = st.floats(0.3, 8.0)
ages = st.floats(0.0, 300.0)


def mp_weibull(a, l, k):
    a, l, k = mp.mpf(a), mp.mpf(l), mp.mpf(k)
    return (k / l) * (a / l) ** (k - 1) * mp.exp(-((a / l) ** k))


class TestEval:
    def test_exponential_at_zero(self):
        assert eval_kernel(Exponential(1.0), 0.0) == 1.0

    def test_weibull_shape_one_is_exponential(self):
        a = np.linspace(0, 10, 41)
        np.testing.assert_allclose(eval_kernel(Weibull(1.0, 1.0), a), np.exp(-a), rtol=1e-14)

    def test_mow_bimodal_frozen(self):
        p = MoW(((30, 4, 0.7), (60, 4, 0.3)))
        # high-precision component sums
        np.testing.assert_allclose(eval_kernel(p, [30.0, 60.0]),
                                   [0.036683947166368306, 0.0073576728496926368], rtol=1e-13)
        a = np.linspace(1, 120, 1191)
        v = eval_kernel(p, a)
        peaks = np.flatnonzero((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])) + 1
        assert len(peaks) == 2 and v[peaks[1]] < v[peaks[0]]

    def test_negative_age_rejected(self):
        with pytest.raises(ValueError):
            eval_kernel(Weibull(1, 2), -0.1)

    def test_small_shape_clamped_at_zero(self):
        p = Weibull(5.0, 0.5)
        assert eval_kernel(p, 0.0) == eval_kernel(p, 1e-3)
        assert math.isfinite(quantize_kernel(p, 1.0, 4).levels[0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(scales, shapes, st.floats(0, 2)), min_size=1, max_size=5), ages)
    def test_conic_closure(self, comps, a):
        p = MoW(tuple(comps))
        parts = sum(b * eval_kernel(Weibull(l, k), a) for l, k, b in comps)
        assert eval_kernel(p, a) == pytest.approx(parts, rel=1e-12, abs=1e-300)
        assert eval_kernel(p, a) >= 0

    @settings(max_examples=60, deadline=None)
    @given(scales, shapes, ages)
    def test_single_component_reduction(self, l, k, a):
        assert eval_kernel(MoW(((l, k, 1.0),)), a) == eval_kernel(Weibull(l, k), a)

    def test_unit_shape_at_subnormal_age(self):
        assert eval_kernel(Weibull(2.0, 1.0), 5e-324) == 0.5

    @settings(max_examples=60, deadline=None)
    @given(scales, ages)
    def test_exponential_proportionality(self, w, a):
        np.testing.assert_allclose(eval_kernel(Weibull(w, 1.0), a), eval_kernel(Exponential(w), a) / w,
                                   rtol=1e-12, atol=1e-300)

    @settings(max_examples=40, deadline=None)
    @given(scales, st.floats(1.0, 8.0), st.floats(0.1, 300.0))
    def test_matches_high_precision(self, l, k, a):
        expect = float(mp_weibull(a, l, k))
        assert eval_kernel(Weibull(l, k), a) == pytest.approx(expect, rel=1e-11, abs=1e-300)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(scales, shapes, st.floats(0, 1)), min_size=1, max_size=3), ages)
    def test_tail_sup_bounds_future(self, comps, a):
        p = MoW(tuple(comps))
        later = a + np.linspace(0, 200, 401)
        assert np.all(eval_kernel(p, later) <= tail_sup(p, a) * (1 + 1e-12) + 1e-300)


class TestQuantize:
    def test_exponential_levels(self):
        q = quantize_kernel(Exponential(1.0), 1.0, 3)
        np.testing.assert_allclose(q.levels, [1.0, math.exp(-1), math.exp(-2)], rtol=1e-15)

    def test_single_cell(self):
        p = Weibull(3.0, 1.5)
        assert quantize_kernel(p, 2.0, 1).levels.tolist() == [eval_kernel(p, 0.0)]

    @settings(max_examples=40, deadline=None)
    @given(scales, shapes, st.sampled_from([0.25, 0.5, 1.0, 9.0]), st.integers(1, 60))
    def test_exact_at_grid_points(self, l, k, g, S):
        p = Weibull(l, k)
        q = quantize_kernel(p, g, S)
        ref = [eval_kernel(p, s * g, clamp=g * 1e-3) for s in range(S)]
        assert q.levels.tolist() == ref
        assert np.all(np.isfinite(q.levels)) and np.all(q.levels >= 0)

    def test_refinement_converges_on_monotone_kernel(self):
        p = Exponential(5.0)
        dense = np.linspace(0, 40, 40_001)[:-1]
        errs = []
        for g in (2.0, 1.0, 0.5, 0.25):
            q = quantize_kernel(p, g, int(40 / g))
            stair = q.levels[np.floor(dense / g).astype(int)]
            errs.append(np.max(np.abs(stair - eval_kernel(p, dense))))
        assert all(b < a for a, b in zip(errs, errs[1:]))


class TestWeibullFit:
    def test_recovers_weibull(self):
        x = 30.0 * np.random.default_rng(7).weibull(4.0, 10_000)
        p = fit_weibull(x)
        assert abs(p.scale / 30 - 1) < 0.05 and abs(p.shape / 4 - 1) < 0.10

    def test_exponential_shape_near_one(self):
        x = np.random.default_rng(8).exponential(7.0, 10_000)
        assert abs(fit_weibull(x).shape - 1) < 0.10

    def test_degenerate(self):
        with pytest.raises(FitDegenerate) as ei:
            fit_weibull([4.0, 4.0])
        assert ei.value.fallback == Weibull(4.0, 1.0)
        with pytest.raises(FitDegenerate):
            fit_weibull([3.0])

    def test_score_is_zero_at_mle(self):
        x = np.random.default_rng(9).gamma(2.0, 5.0, 500)
        p = fit_weibull(x)
        h = 1e-6
        for d in ((h, 0), (0, h)):
            up = weibull_loglik(Weibull(p.scale + d[0], p.shape + d[1]), x)
            dn = weibull_loglik(Weibull(p.scale - d[0], p.shape - d[1]), x)
            assert abs(up - dn) / (2 * h) < 1e-3

    def test_weights_equal_repetition(self):
        x = np.array([3.0, 5.0, 9.0, 12.0])
        a = fit_weibull(x, weights=[1, 2, 1, 3])
        b = fit_weibull(np.repeat(x, [1, 2, 1, 3]))
        assert a.scale == pytest.approx(b.scale, rel=1e-9)
        assert a.shape == pytest.approx(b.shape, rel=1e-9)


class TestMoW:
    def test_loglik_reductions(self, rng):
        x = rng.gamma(3.0, 4.0, 100)
        w = Weibull(11.0, 2.2)
        assert mow_loglik(MoW(((11.0, 2.2, 1.0),)), x) == pytest.approx(weibull_loglik(w, x), rel=1e-13)
        two = MoW(((11.0, 2.2, 1.0), (40.0, 3.0, 0.0)))
        assert mow_loglik(two, x) == pytest.approx(weibull_loglik(w, x), rel=1e-13)

    def test_loglik_high_precision(self, rng):
        x = rng.gamma(3.0, 10.0, 100)
        p = MoW(((20.0, 3.0, 0.25), (45.0, 5.0, 0.5), (80.0, 1.5, 0.25)))
        mp.mp.dps = 50
        ref = mp.fsum(mp.log(mp.fsum(mp.mpf(b) * mp_weibull(xi, l, k) for l, k, b in p.components)) for xi in x)
        assert mow_loglik(p, x) == pytest.approx(float(ref), rel=1e-12)

    def test_loglik_validation(self):
        with pytest.raises(ValueError):
            mow_loglik(MoW(((1, 1, 0.5),)), [1.0])
        with pytest.raises(ValueError):
            mow_loglik(MoW(((1, 1, 1.0),)), [0.0])

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="reduce K"):
            fit_mow([1.0, 2.0, 3.0], K=5)

    def test_nested_single_weibull(self):
        x = 30.0 * np.random.default_rng(11).weibull(4.0, 2000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit_mow(x, K=5, seed=0)
        single = weibull_loglik(fit_weibull(x), x)
        assert res.loglik >= single - 1e-6

    def test_two_component_recovery(self):
        r = np.random.default_rng(12)
        n = 20_000
        z = r.random(n) < 0.6
        x = np.where(z, 30 * r.weibull(6, n), 60 * r.weibull(6, n))
        res = fit_mow(x, K=2, seed=0)
        comps = sorted(res.params.components)
        means = [Weibull(l, k).mean for l, k, _ in comps]
        assert abs(means[0] / Weibull(30, 6).mean - 1) < 0.10
        assert abs(means[1] / Weibull(60, 6).mean - 1) < 0.10
        assert abs(comps[0][2] - 0.6) < 0.1 and abs(comps[1][2] - 0.4) < 0.1

    def test_trace_monotone_and_weights_normalized(self, rng):
        x = rng.gamma(2.0, 15.0, 800)
        res = fit_mow(x, K=3, seed=1)
        assert np.all(np.diff(res.trace) >= -1e-8)
        assert res.params.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert res.loglik == pytest.approx(mow_loglik(res.params, x), rel=1e-12)

    def test_seeded_reproducible(self, rng):
        x = rng.gamma(2.0, 15.0, 300)
        assert fit_mow(x, K=3, seed=5).params == fit_mow(x, K=3, seed=5).params

    def test_collapse_prunes_with_warning(self, rng):
        x = rng.gamma(4.0, 5.0, 400)
        start = [[15.0, 3.0, 0.5], [25.0, 3.0, 0.5 - 1e-12], [1e6, 4.0, 1e-12]]
        with pytest.warns(RuntimeWarning, match="K reduced to 2"):
            res = _em_run(x, start, 1e-8, 500, 1e-6)
        assert res.pruned_at == [1] and res.params.n_components == 2
        assert res.params.weights.sum() == pytest.approx(1.0)
        assert np.all(np.diff(res.trace[1:]) >= -1e-8)


class TestSerialization:
    @pytest.mark.parametrize("p", [Exponential(2.5), Weibull(3.0, 1.5), MoW(((30, 6, 0.7), (60, 6, 0.3)))])
    def test_round_trip(self, p):
        assert kernel_from_dict(kernel_to_dict(p)) == p

    def test_bank_json(self):
        bank = {(0, 0): KernelEntry(MoW(((30, 6, 1.0),)), "fitted", 40), (1, 0): Weibull(2.0, 1.1)}
        items = bank_to_json(bank, ["a", "b"])
        assert items[1]["pair"] == ["b", "a"] and items[1]["kind"] == "weibull"
        back = bank_from_json(items, ["a", "b"])
        assert back[(1, 0)].params == Weibull(2.0, 1.1)
        assert back[(0, 0)].provenance == "fitted" and back[(0, 0)].n_samples == 40
