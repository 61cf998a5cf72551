from __future__ import annotations

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiencetpp.events import (
    BehavioralLog,
    CategoryIndex,
    IngestError,
    count_matrices,
    count_matrix,
    counts_before,
    counts_upto,
    ingest_events,
    log_stats,
    write_events,
)
from audiencetpp.kernels import Weibull
from audiencetpp.simulate import GroundTruthModel, simulate_logs

from conftest import make_log, random_log

HEADER = "user_id,item_id,category_id,timestamp_days,price,promo_flag\n"


class TestIngest:
    def test_sorted_per_user(self):
        src = HEADER + "u1,,a,9.0,,\nu1,,a,2.5,,\nu1,,b,4.0,,\n"
        log = ingest_events(io.StringIO(src))
        np.testing.assert_array_equal(log.user_times(0), [2.5, 4.0, 9.0])

    def test_empty_source(self):
        log = ingest_events(io.StringIO(HEADER))
        assert log.n_users == 0 and log.n_events == 0

    def test_window_defaults_to_rounded_max(self):
        log = ingest_events(io.StringIO(HEADER + "u,,a,449.3,,\n"))
        assert log.window_length == 450.0

    def test_jsonl_and_bytes(self):
        lines = [
            {"user_id": "x", "category_id": "a", "timestamp_days": 1.5, "promo_flag": True},
            {"user_id": "x", "category_id": "b", "timestamp_days": 0.5},
        ]
        raw = "\n".join(json.dumps(d) for d in lines).encode()
        log = ingest_events(raw, "jsonl")
        assert log.n_events == 2
        assert log.promo.tolist() == [False, True]

    def test_calendar_dates_need_epoch(self):
        src = HEADER + "u,,a,2024-01-03,,\n"
        with pytest.raises(IngestError):
            ingest_events(io.StringIO(src))
        log = ingest_events(io.StringIO(src), epoch="2024-01-01")
        assert log.time[0] == pytest.approx(2.0)

    def test_strict_reports_line(self):
        src = HEADER + "u,,a,1.0,,\nu,,a,oops,,\n"
        with pytest.raises(IngestError, match="line 3"):
            ingest_events(io.StringIO(src))

    def test_lenient_skips_and_counts(self):
        src = HEADER + "u,,a,1.0,,\nu,,a,oops,,\nu,,a,-1,,\n"
        log = ingest_events(io.StringIO(src), strict=False)
        assert log.n_events == 1 and log.skipped_rows == 2

    def test_unknown_category_with_fixed_index(self):
        src = HEADER + "u,,zzz,1.0,,\n"
        with pytest.raises(IngestError, match="unknown category"):
            ingest_events(io.StringIO(src), categories=CategoryIndex(["a"]))

    def test_simulated_round_trip(self, tmp_path):
        model = GroundTruthModel(["a", "b"], [0.05, 0.03], [[0.3, 0.0], [0.5, 0.2]],
                                 {(0, 0): Weibull(5, 2), (1, 0): Weibull(2, 1.5), (1, 1): Weibull(8, 1)},
                                 horizon=100.0, n_users=60)
        log = simulate_logs(model, seed=4)
        assert log.n_events > 0
        path = tmp_path / "ev.csv"
        write_events(log, path)
        back = ingest_events(path, window_length=log.window_length)
        assert back.same_events(log)
        np.testing.assert_array_equal(back.time, log.time)

    def test_round_trip_thousand_rows(self, rng, tmp_path):
        log = random_log(rng, n_users=50, n_events=1000)
        for fmt in ("csv", "jsonl"):
            path = tmp_path / f"ev.{fmt}"
            write_events(log, path, fmt)
            back = ingest_events(path, fmt, window_length=log.window_length)
            assert back.same_events(log)


class TestCounts:
    def test_single_purchase_at_zero(self):
        log = make_log([("u", "a", 0.0)], window_length=3)
        cm = count_matrix(log, "a", 1.0, 3)
        assert cm.counts.toarray().tolist() == [[1, 0, 0]]

    def test_half_open_cells(self):
        log = make_log([("u", "a", 0.5), ("u", "a", 8.9), ("u", "a", 9.0)], window_length=18)
        cm = count_matrix(log, "a", 9.0, 2)
        assert cm.counts.toarray().tolist() == [[2, 1]]

    def test_grid_must_cover_window(self):
        log = make_log([("u", "a", 5.0)], window_length=10)
        with pytest.raises(ValueError):
            count_matrix(log, "a", 1.0, 5)
        cm = count_matrix(log, "a", 1.0, 5, end=10.0)
        assert cm.counts.sum() == 1

    def test_row_sums_match_recount(self, rng):
        log = random_log(rng, n_users=200, n_events=10_000, T=90.0)
        direct = log.user_category_counts()
        for cm in count_matrices(log, 1.0, 90):
            np.testing.assert_array_equal(np.asarray(cm.counts.sum(axis=1)).ravel(), direct[:, cm.category])

    def test_counts_upto_strict(self):
        log = make_log([("u", "a", 1.0), ("u", "a", 5.0), ("u", "a", 9.0)])
        assert counts_upto(log, "u", "a", 5.0) == 1
        assert counts_upto(log, "u", "a", 0.0) == 0
        assert counts_upto(log, "ghost", "a", 9.5) == 0

    def test_counts_upto_matches_cells(self, rng):
        log = random_log(rng, n_users=30, n_events=2000, T=100.0)
        cms = count_matrices(log, 1.0, 100)
        for t in (0.0, 17.3, 50.0, 99.99):
            full = int(np.floor(t))
            for u in range(0, 30, 7):
                for c in range(log.n_categories):
                    cells = cms[c].counts[u, :full].sum()
                    times = log.user_times(u, c)
                    partial = np.sum((times >= full) & (times < t))
                    assert counts_upto(log, u, c, t) == cells + partial

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.tuples(st.integers(0, 4), st.integers(0, 2), st.floats(0, 49.99)), max_size=60),
        st.floats(0, 50),
    )
    def test_counts_before_is_brute_force(self, rows, t):
        log = make_log([(f"u{u}", f"c{c}", x) for u, c, x in rows], ["c0", "c1", "c2"], 50.0)
        mat = counts_before(log, t)
        for u, uid in enumerate(log.users):
            for c in range(3):
                brute = sum(1 for r in rows if f"u{r[0]}" == uid and r[1] == c and r[2] < t)
                assert mat[u, c] == brute == counts_upto(log, uid, c, t)


class TestStats:
    def test_single_purchase_is_occasional(self):
        rep = log_stats(make_log([("u", "a", 1.0)]))
        assert rep.occasional_share == 1.0 and rep.regular_users == 0

    def test_regular_threshold_straddle(self):
        rows = [("r", "a", 30.0 * m + 1) for m in range(6)] + [("o", "a", 3.0), ("o", "a", 4.0)]
        rep = log_stats(make_log(rows))
        assert (rep.regular_users, rep.occasional_users) == (1, 1)
        assert rep.regular_share + rep.occasional_share == pytest.approx(1.0, abs=1e-9)

    def test_head_tail_partition(self):
        rows = [("u", "big", float(i % 50)) for i in range(40)] + [("u", "small", 1.0)] * 3
        rep = log_stats(make_log(rows), head_threshold=10)
        assert rep.head_categories == ["big"] and rep.tail_categories == ["small"]
        assert rep.head_share == pytest.approx(40 / 43)

    def test_empty_log_shares_absent(self):
        rep = log_stats(ingest_events(io.StringIO(HEADER)))
        assert rep.regular_share is None and rep.head_share is None
        assert json.loads(json.dumps(rep.to_dict()))["n_events"] == 0


class TestLogModel:
    def test_users_follow_id_order(self):
        log = make_log([("b", "a", 1.0), ("10", "a", 2.0), ("9", "a", 3.0)])
        assert log.users == ("9", "10", "b")

    def test_arrays_are_read_only(self, rng):
        log = random_log(rng)
        with pytest.raises(ValueError):
            log.time[0] = 1.0

    def test_caller_arrays_untouched(self):
        t = np.array([2.0, 1.0])
        BehavioralLog.from_arrays(["u"], CategoryIndex(["a"]), [0, 0], [0, 0], t)
        t[0] = 5.0

    def test_rejects_late_timestamp(self):
        with pytest.raises(ValueError):
            make_log([("u", "a", 10.0)], window_length=10)
