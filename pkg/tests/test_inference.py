from __future__ import annotations

import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiencetpp.estimation import BaseIntensities, LatentNetwork
from audiencetpp.events import count_matrices
from audiencetpp.inference import (
    IntensityMatrix,
    PrecomputeBank,
    build_precompute,
    cif_continuous,
    convolve_matmul,
    infer_at,
    infer_intensities,
    quantized_excitation,
    rank_audience,
    rank_order,
)
from audiencetpp.kernels import MoW, Weibull, eval_kernel, quantize_kernel

from conftest import make_log, random_log


def _bank(C, params=None):
    params = params or Weibull(5.0, 1.5)
    return {(c, cp): params for c in range(C) for cp in range(C)}


def _scalar_oracle(mu, pre, counts):
    dense = [cm.counts.toarray() for cm in counts]
    n_users, C = dense[0].shape[0], pre.n_categories
    out = np.empty((n_users, C))
    for u in range(n_users):
        for c in range(C):
            out[u, c] = mu[c] + sum(
                quantized_excitation(pre.scaled[c, cp], dense[cp][u]) for cp in range(C)
            )
    return out


class TestExcitation:
    def test_latest_cell_meets_age_zero(self):
        assert quantized_excitation([3.0, 2.0, 1.0], [0, 0, 1]) == 3.0
        assert quantized_excitation([3.0, 2.0, 1.0], [1, 0, 0]) == 1.0

    def test_mixed_counts(self):
        assert quantized_excitation([0.5, 0.25, 0.125, 0.0625], [2, 0, 1, 3]) == pytest.approx(
            2 * 0.0625 + 1 * 0.25 + 3 * 0.5
        )

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            quantized_excitation([1.0, 2.0], [1, 2, 3])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.data())
    def test_matches_naive_loop(self, levels, data):
        counts = data.draw(st.lists(st.integers(0, 5), min_size=len(levels), max_size=len(levels)))
        S = len(levels)
        naive = sum(levels[S - 1 - s] * counts[s] for s in range(S))
        assert quantized_excitation(levels, counts) == pytest.approx(naive, rel=1e-12, abs=1e-12)

    def test_convolution_is_toeplitz_product(self, rng):
        a, b = rng.random(7), rng.random(11)
        np.testing.assert_allclose(convolve_matmul(a, b), np.convolve(a, b), rtol=1e-12)


class TestPrecompute:
    def test_levels_and_scaling(self):
        B = np.array([[0.5, 0.0], [2.0, 1.0]])
        bank = {(0, 0): Weibull(3.0, 1.0), (0, 1): Weibull(4.0, 2.0),
                (1, 0): Weibull(6.0, 1.5), (1, 1): MoW([(2.0, 1.0, 0.5), (9.0, 3.0, 0.5)])}
        pre = build_precompute(B, bank, 1.0, 20)
        assert pre.levels.shape == (2, 2, 20)
        np.testing.assert_allclose(pre.levels[1, 0], quantize_kernel(bank[(1, 0)], 1.0, 20).levels)
        np.testing.assert_allclose(pre.scaled[1, 0], 2.0 * pre.levels[1, 0])
        assert not pre.scaled[0, 1].any()

    def test_reversed_layout(self, rng):
        pre = PrecomputeBank.from_levels(rng.random((3, 3)), rng.random((3, 3, 6)), 1.0)
        R = pre.reversed_by_source()
        for c in range(3):
            for cp in range(3):
                for s in range(6):
                    assert R[cp, s, c] == pre.scaled[c, cp, 5 - s]

    def test_missing_pair(self):
        with pytest.raises(KeyError):
            build_precompute(np.eye(2), {(0, 0): Weibull(1.0, 1.0)}, 1.0, 5)


class TestInfer:
    def test_no_history_gives_base(self):
        log = make_log([("u", "a", 1.0)], categories=["a", "b"], users=["u", "v"], window_length=10)
        mu = np.array([0.1, 0.2])
        pre = build_precompute(np.ones((2, 2)), _bank(2), 1.0, 10)
        out = infer_at(log, mu, pre, 50.0)
        np.testing.assert_array_equal(out.values[1], mu)

    @pytest.mark.parametrize("age", [0.3, 1.7, 6.25, 11.9])
    def test_single_purchase_non_integer_age(self, age):
        t = 40.0
        log = make_log([("u", "a", t - age)], window_length=t)
        k = Weibull(5.0, 1.5)
        pre = build_precompute(np.array([[0.7]]), {(0, 0): k}, 1.0, 20)
        out = infer_at(log, np.array([0.05]), pre, t)
        expect = 0.05 + 0.7 * float(eval_kernel(k, np.floor(age)))
        assert out.values[0, 0] == pytest.approx(expect, rel=1e-12)

    def test_matrix_path_matches_scalar_loop(self, rng):
        C, S = 10, 30
        log = random_log(rng, n_users=1000, n_cats=C, n_events=20000, T=100.0)
        pre = PrecomputeBank.from_levels(rng.random((C, C)), rng.random((C, C, S)), 1.0)
        mu = rng.random(C)
        counts = count_matrices(log, 1.0, S, end=100.0)
        fast = infer_intensities(mu, pre, counts, chunk=300).values
        np.testing.assert_allclose(fast, _scalar_oracle(mu, pre, counts), rtol=1e-9)

    def test_threads_agree(self, rng):
        log = random_log(rng, n_users=500, n_cats=3, n_events=3000, T=60.0)
        pre = PrecomputeBank.from_levels(rng.random((3, 3)), rng.random((3, 3, 20)), 1.0)
        counts = count_matrices(log, 1.0, 20, end=60.0)
        a = infer_intensities(np.zeros(3), pre, counts, chunk=64).values
        b = infer_intensities(np.zeros(3), pre, counts, chunk=64, threads=3).values
        np.testing.assert_array_equal(a, b)

    def test_floor_and_linearity(self, rng):
        log = random_log(rng, n_users=80, n_cats=3, n_events=600, T=60.0)
        B = rng.random((3, 3))
        mu = rng.random(3)
        one = infer_at(log, mu, build_precompute(B, _bank(3), 1.0, 30), 60.0).values
        two = infer_at(log, mu, build_precompute(2 * B, _bank(3), 1.0, 30), 60.0).values
        assert np.all(one >= mu)
        np.testing.assert_allclose(two - mu, 2 * (one - mu), rtol=1e-12, atol=1e-15)

    def test_doubling_counts_doubles_excitation(self, rng):
        log = random_log(rng, n_users=80, n_cats=3, n_events=600, T=60.0)
        pre = build_precompute(rng.random((3, 3)), _bank(3), 1.0, 30)
        mu = rng.random(3)
        counts = count_matrices(log, 1.0, 30, end=60.0)
        doubled = [replace(cm, counts=2 * cm.counts) for cm in counts]
        one = infer_intensities(mu, pre, counts).values
        two = infer_intensities(mu, pre, doubled).values
        np.testing.assert_allclose(two - mu, 2 * (one - mu), rtol=1e-12, atol=1e-15)

    def test_user_permutation_and_time_shift(self, rng):
        log = random_log(rng, n_users=40, n_cats=2, n_events=300, T=60.0)
        pre = build_precompute(np.ones((2, 2)), _bank(2), 1.0, 30)
        base = infer_at(log, np.zeros(2), pre, 60.0)
        shifted = make_log(
            [(u, log.categories.ids[c], t + 17.0) for u, c, t in
             zip(np.array(log.users)[log.user], log.category, log.time)],
            categories=log.categories.ids, users=list(reversed(log.users)),
        )
        moved = infer_at(shifted, np.zeros(2), pre, 77.0)
        order = [moved.users.index(u) for u in base.users]
        np.testing.assert_allclose(moved.values[order], base.values, rtol=1e-12)

    def test_shape_checks(self, rng):
        log = random_log(rng, n_cats=2)
        pre = build_precompute(np.ones((2, 2)), _bank(2), 1.0, 10)
        with pytest.raises(ValueError):
            infer_intensities(np.zeros(2), pre, count_matrices(log, 1.0, 5, end=50.0))
        with pytest.raises(ValueError):
            infer_intensities(np.zeros(3), pre, count_matrices(log, 1.0, 10, end=50.0))

    def test_csv_round_trip(self, rng):
        m = IntensityMatrix(rng.random((4, 2)), ("a", "b", "c", "d"), ("x", "y"), 5.0)
        buf = io.StringIO()
        m.to_csv(buf)
        back = IntensityMatrix.from_csv(io.StringIO(buf.getvalue()))
        np.testing.assert_array_equal(back.values, m.values)
        assert back.users == m.users and back.categories == m.categories


class TestContinuous:
    def test_event_sum(self):
        log = make_log([("u", "a", 1.0), ("u", "b", 4.0), ("u", "a", 9.5)], window_length=20)
        k = Weibull(5.0, 1.5)
        B = np.array([[0.5, 0.25], [1.0, 2.0]])
        got = cif_continuous(log, "u", "a", np.array([0.1, 0.2]), B, _bank(2, k), 10.0)
        ages = np.array([9.0, 0.5])
        expect = 0.1 + 0.5 * eval_kernel(k, ages).sum() + 0.25 * eval_kernel(k, 6.0)
        assert got == pytest.approx(float(expect), rel=1e-12)

    def test_strictly_before(self):
        log = make_log([("u", "a", 10.0)], window_length=20)
        assert cif_continuous(log, "u", 0, np.array([0.3]), np.ones((1, 1)), _bank(1), 10.0) == 0.3

    def test_unknown_user_gets_base(self):
        log = make_log([("u", "a", 1.0)])
        assert cif_continuous(log, "zzz", 0, np.array([0.3]), np.ones((1, 1)), _bank(1), 5.0) == 0.3

    def test_quantized_close_on_fine_grid(self):
        log = make_log([("u", "a", 3.3), ("u", "a", 17.8)], window_length=40)
        k = Weibull(10.0, 2.0)
        exact = cif_continuous(log, "u", 0, np.zeros(1), np.ones((1, 1)), _bank(1, k), 40.0)
        coarse = infer_at(log, np.zeros(1), build_precompute(np.ones((1, 1)), _bank(1, k), 1.0, 40), 40.0)
        fine = infer_at(log, np.zeros(1), build_precompute(np.ones((1, 1)), _bank(1, k), 0.25, 160), 40.0)
        assert abs(fine.values[0, 0] - exact) < abs(coarse.values[0, 0] - exact)


class TestRanking:
    def _matrix(self, col):
        col = np.asarray(col, dtype=float)
        return IntensityMatrix(col[:, None], tuple(f"u{i}" for i in range(len(col))), ("c",), 0.0)

    def test_ties_by_index(self):
        aud = rank_audience(self._matrix([0.2, 0.5, 0.5, 0.1, 0.5]), 0, 3)
        assert aud.users == ["u1", "u2", "u4"]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.3]), min_size=1, max_size=40), st.integers(1, 40))
    def test_matches_full_sort(self, col, reach):
        reach = min(reach, len(col))
        oracle = sorted(range(len(col)), key=lambda i: (-col[i], i))[:reach]
        assert rank_audience(self._matrix(col), 0, reach).indices.tolist() == oracle
        assert rank_order(np.array(col)).tolist()[:reach] == oracle

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=30), st.integers(1, 30))
    def test_monotone_transform_keeps_ranking(self, col, reach):
        # values on a 1/8 grid so the transform stays strictly increasing in floating point
        reach = min(reach, len(col))
        col = np.array(col) / 8.0
        base = rank_audience(self._matrix(col), 0, reach)
        moved = rank_audience(self._matrix(np.exp(3 * col) + 7), 0, reach)
        assert moved.users == base.users

    def test_reach_below_one(self):
        with pytest.raises(ValueError):
            rank_audience(self._matrix([1.0]), 0, 0)

    def test_reach_above_users_warns(self):
        with pytest.warns(RuntimeWarning):
            aud = rank_audience(self._matrix([1.0, 2.0]), 0, 5)
        assert aud.users == ["u1", "u0"]

    def test_candidate_mask(self):
        aud = rank_audience(self._matrix([5.0, 1.0, 3.0]), "c", 2, np.array([False, True, True]))
        assert aud.users == ["u2", "u1"]
