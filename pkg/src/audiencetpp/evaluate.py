"""Offline evaluation: chronological test segments, reach, cohorts, baselines.

The last ``test_days`` of a log are cut into consecutive segments. Before each
segment a method sees only the purchases made up to the segment start and
returns an intensity per user and category; the top ``r_c = k * p_c`` users
form the audience, which is scored against that segment's purchasers.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .events import BehavioralLog, counts_before
from .inference import IntensityMatrix, infer_at, rank_order

_logger = logging.getLogger(__name__)

COHORTS = ("All", "NC", "OC")
METRIC_COLUMNS = ("method", "cohort", "k", "segment", "category", "precision", "recall")

Method = Callable[[BehavioralLog, float], IntensityMatrix]


class LeakageError(RuntimeError):
    """A method produced scores that depend on purchases at or after the segment start."""


@dataclass(frozen=True)
class EvalProtocol:
    train_end: float
    segment_len: float
    segments: tuple[tuple[float, float], ...]
    p: np.ndarray  # mean purchases per segment_len days in train, per category
    ks: tuple[int, ...] = (5, 10)
    test_only_users: tuple[str, ...] = ()

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def reach(self, c: int, k: int, n_candidates: int) -> int:
        r = max(1, int(round(k * float(self.p[c]))))
        return min(r, n_candidates)


def split_protocol(
    log: BehavioralLog,
    test_days: float = 60.0,
    segment_len: float = 9.0,
    segments: int = 7,
    ks: Sequence[int] = (5, 10),
) -> EvalProtocol:
    """Train/test split with ``segments`` back-to-back test windows.

    The test span is stretched to ``segments * segment_len`` when that is
    longer than ``test_days``, so every segment has full length. ``p_c``
    counts train purchases per ``segment_len`` days.
    """
    if segment_len <= 0 or segments < 1:
        raise ValueError("need a positive segment length and at least one segment")
    span = max(float(test_days), segments * segment_len)
    T = log.window_length
    if not T > span:
        raise ValueError(f"log spans {T} days, not more than the {span}-day test span")
    train_end = T - span
    bounds = tuple(
        (train_end + i * segment_len, train_end + (i + 1) * segment_len) for i in range(segments)
    )
    train = log.time < train_end
    totals = np.bincount(log.category[train], minlength=log.n_categories).astype(np.float64)
    p = totals * segment_len / train_end
    seen = np.zeros(log.n_users, dtype=bool)
    seen[log.user[train]] = True
    active = np.zeros(log.n_users, dtype=bool)
    active[log.user[~train]] = True
    test_only = tuple(log.users[u] for u in np.flatnonzero(active & ~seen))
    if test_only:
        _logger.warning("%d users purchase only in the test span; excluded", len(test_only))
    return EvalProtocol(train_end, float(segment_len), bounds, p, tuple(int(k) for k in ks), test_only)


def precision_recall(audience, purchasers, reach: int) -> tuple[float, float]:
    """``(hits / reach, hits / |purchasers|)``; recall is NaN when nobody purchased."""
    if reach < 1:
        raise ValueError("reach must be at least 1")
    members = set(getattr(audience, "users", audience))
    buyers = set(purchasers)
    hits = len(members & buyers)
    rec = hits / len(buyers) if buyers else float("nan")
    return hits / reach, rec


def cohort_assign(log: BehavioralLog, c: int, start: float, end: float) -> dict[str, np.ndarray]:
    """Purchasers of ``c`` in ``[start, end)`` split into NC (no purchase of
    ``c`` before ``start``) and OC; arrays of user indices."""
    m = log.category == c
    buyers = np.unique(log.user[m & (log.time >= start) & (log.time < end)])
    before = np.zeros(log.n_users, dtype=bool)
    before[log.user[m & (log.time < start)]] = True
    return {"NC": buyers[~before[buyers]], "OC": buyers[before[buyers]]}


# -- baselines --------------------------------------------------------------------


def _matrix(log: BehavioralLog, values: np.ndarray, t: float) -> IntensityMatrix:
    return IntensityMatrix(values, tuple(log.users), tuple(log.categories.ids), float(t))


def baseline_top(log: BehavioralLog, t: float, window: float | None = None) -> IntensityMatrix:
    """Purchase counts before ``t``; with ``window`` only the last ``window`` days."""
    n = counts_before(log, t).astype(np.float64)
    if window is not None and math.isfinite(window):
        n = n - counts_before(log, t - window)
    return _matrix(log, n, t)


def _als_objective(N, conf, X, Y, reg) -> float:
    P = (N > 0).astype(np.float64)
    R = P - X @ Y.T
    return float(np.sum(conf * R * R) + reg * (np.sum(X * X) + np.sum(Y * Y)))


def _als_half(N: np.ndarray, F: np.ndarray, reg: float, chunk: int = 8192) -> np.ndarray:
    """Solve every row factor given the fixed factor ``F`` (confidence ``1 + N``)."""
    r = F.shape[1]
    FtF = F.T @ F + reg * np.eye(r)
    P = (N > 0).astype(np.float64)
    out = np.empty((N.shape[0], r))
    if N.shape[0] <= N.shape[1]:
        # few rows, many fixed factors: build each normal matrix directly
        for i in range(N.shape[0]):
            A = FtF + F.T @ (F * N[i][:, None])
            out[i] = np.linalg.solve(A, ((1.0 + N[i]) * P[i]) @ F)
        return out
    # identical count rows share a solution; sparse logs have few distinct rows
    rows, inv = np.unique(N, axis=0, return_inverse=True)
    if len(rows) < N.shape[0]:
        return _als_half(rows, F, reg, chunk)[inv.ravel()]
    outer = np.einsum("ij,ik->ijk", F, F)
    for lo in range(0, N.shape[0], chunk):
        n = N[lo : lo + chunk]
        A = FtF + np.tensordot(n, outer, axes=1)
        b = ((1.0 + n) * P[lo : lo + chunk]) @ F
        out[lo : lo + chunk] = np.linalg.solve(A, b[..., None])[..., 0]
    return out


def baseline_mf(
    N,
    rank: int = 16,
    iterations: int = 15,
    reg: float = 0.1,
    seed: int = 0,
    *,
    users: Sequence[str] | None = None,
    categories: Sequence[str] | None = None,
    tick: float = float("nan"),
    trace: list | None = None,
) -> IntensityMatrix:
    """Implicit-feedback matrix factorization of a count snapshot by ALS.

    Preferences are ``N > 0`` with confidence ``1 + N``; the score is the
    latent dot product. ``trace`` collects the objective after every sweep.
    """
    N = np.asarray(N, dtype=np.float64)
    if N.ndim != 2 or np.any(N < 0):
        raise ValueError("count snapshot must be a non-negative matrix")
    U, C = N.shape
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 0.1, (U, rank))
    Y = rng.normal(0.0, 0.1, (C, rank))
    conf = 1.0 + N
    if trace is not None:
        trace.append(_als_objective(N, conf, X, Y, reg))
    for _ in range(iterations):
        X = _als_half(N, Y, reg)
        Y = _als_half(N.T, X, reg)
        if trace is not None:
            trace.append(_als_objective(N, conf, X, Y, reg))
    if users is None:
        users = tuple(str(u) for u in range(U))
    if categories is None:
        categories = tuple(str(c) for c in range(C))
    return IntensityMatrix(X @ Y.T, tuple(users), tuple(categories), tick)


def baseline_buy_it_again(log: BehavioralLog, t: float, delta: float = 9.0) -> IntensityMatrix:
    """Repeat-purchase probability within ``delta`` days under a Poisson rate.

    The per-user rate ``N_uc / t`` is shrunk towards the category's per-user
    rate with a unit-strength gamma prior: ``(N_uc + 1) / (t + 1 / rho_c)``.
    """
    if t <= 0:
        raise ValueError("history must span a positive time")
    n = counts_before(log, t).astype(np.float64)
    rho = (n.sum(axis=0) + 1.0) / (max(log.n_users, 1) * t)
    lam = (n + 1.0) / (t + 1.0 / rho)
    return _matrix(log, -np.expm1(-lam * delta), t)


# -- methods ----------------------------------------------------------------------


def top_method(window: float | None = None) -> Method:
    return lambda hist, t: baseline_top(hist, t, window)


def mf_method(rank: int = 16, iterations: int = 15, reg: float = 0.1, seed: int = 0) -> Method:
    def run(hist: BehavioralLog, t: float) -> IntensityMatrix:
        return baseline_mf(
            counts_before(hist, t), rank, iterations, reg, seed,
            users=hist.users, categories=hist.categories.ids, tick=t,
        )

    return run


def buy_it_again_method(delta: float = 9.0) -> Method:
    return lambda hist, t: baseline_buy_it_again(hist, t, delta)


def supermat_method(model, threads: int = 1) -> Method:
    """Quantized intensities from a fitted model, evaluated at the segment start."""
    pre = model.precompute()

    def run(hist: BehavioralLog, t: float) -> IntensityMatrix:
        return infer_at(hist, model.base, pre, t, threads=threads)

    return run


def default_methods(model=None, *, delta: float = 9.0, seed: int = 0, threads: int = 1) -> dict:
    methods: dict[str, Method] = {}
    if model is not None:
        methods["SuperMAT"] = supermat_method(model, threads)
    methods["Top"] = top_method()
    methods["Top(45)"] = top_method(45.0)
    methods["MF"] = mf_method(seed=seed)
    methods["BuyItAgain"] = buy_it_again_method(delta)
    return methods


# -- experiment -------------------------------------------------------------------


@dataclass
class ExperimentResult:
    rows: list[dict]
    skipped: dict = field(default_factory=dict)  # (method, cohort, k) -> empty (segment, category) cells
    test_only_users: int = 0

    def summary(self) -> dict:
        """``(method, cohort, k) -> (P@k, R@k)``: mean over categories, then segments."""
        groups: dict = {}
        for r in self.rows:
            key = (r["method"], r["cohort"], r["k"])
            groups.setdefault(key, {}).setdefault(r["segment"], []).append(r)
        out = {}
        for key, segs in groups.items():
            ps = [np.mean([r["precision"] for r in rows]) for rows in segs.values()]
            rs = [np.mean([r["recall"] for r in rows]) for rows in segs.values()]
            out[key] = (float(np.mean(ps)), float(np.mean(rs)))
        return out

    def to_csv(self, dest) -> None:
        if not hasattr(dest, "write"):
            with open(dest, "w", newline="", encoding="utf-8") as fh:
                return self.to_csv(fh)
        w = csv.DictWriter(dest, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "precision": repr(r["precision"]), "recall": repr(r["recall"])})

    def format_table(self) -> str:
        """Methods as rows; P@k and R@k per cohort as columns."""
        summ = self.summary()
        methods = list(dict.fromkeys(k[0] for k in summ))
        cohorts = [c for c in COHORTS if any(k[1] == c for k in summ)]
        ks = sorted({k[2] for k in summ})
        head = ["method"] + [f"{c} {m}@{k}" for c in cohorts for m in ("P", "R") for k in ks]
        lines = [head]
        for m in methods:
            row = [m]
            for c in cohorts:
                for i in (0, 1):
                    for k in ks:
                        v = summ.get((m, c, k))
                        row.append("-" if v is None else f"{v[i]:.4f}")
            lines.append(row)
        width = [max(len(r[j]) for r in lines) for j in range(len(head))]
        buf = io.StringIO()
        for r in lines:
            buf.write("  ".join(s.ljust(width[j]) for j, s in enumerate(r)).rstrip() + "\n")
        return buf.getvalue()


def _check_scores(lam: IntensityMatrix, hist: BehavioralLog, t: float, name: str) -> np.ndarray:
    if np.isfinite(lam.tick) and lam.tick > t + 1e-9:
        raise LeakageError(f"{name} scored at t={lam.tick}, after the segment start {t}")
    if lam.values.shape != (hist.n_users, hist.n_categories):
        raise ValueError(f"{name} returned shape {lam.values.shape}")
    if tuple(lam.users) != tuple(hist.users):
        raise ValueError(f"{name} returned users in a different order")
    return lam.values


def run_experiment(
    log: BehavioralLog,
    protocol: EvalProtocol,
    methods: Mapping[str, Method],
    cohorts: Iterable[str] = COHORTS,
    ks: Sequence[int] | None = None,
) -> ExperimentResult:
    """Precision and recall of every method, cohort, reach multiplier,
    segment and category.

    Each method is called with the log truncated at the segment start, so
    later purchases are never visible; a result stamped after the start
    raises :class:`LeakageError`.
    """
    ks = tuple(protocol.ks if ks is None else ks)
    cohorts = tuple(cohorts)
    for c in cohorts:
        if c not in COHORTS:
            raise ValueError(f"unknown cohort {c!r}")
    if protocol.test_only_users:
        drop = [log.user_index(u) for u in protocol.test_only_users]
        log = log.drop_users([u for u in drop if u is not None])
    C = log.n_categories
    cats = log.categories.ids
    rows: list[dict] = []
    skipped: dict = {}
    for si, (start, end) in enumerate(protocol.segments):
        hist = log.truncate(start)
        if hist.n_events and hist.time.max() >= start:
            raise LeakageError("history contains events at or after the segment start")
        groups = []
        for c in range(C):
            parts = cohort_assign(log, c, start, end)
            parts["All"] = np.union1d(parts["NC"], parts["OC"])
            groups.append(parts)
        for name, method in methods.items():
            scores = _check_scores(method(hist, start), hist, start, name)
            for c in range(C):
                order = rank_order(scores[:, c])
                for k in ks:
                    r = protocol.reach(c, k, log.n_users)
                    top = order[:r]
                    for coh in cohorts:
                        buyers = groups[c][coh]
                        if len(buyers) == 0:
                            key = (name, coh, k)
                            skipped[key] = skipped.get(key, 0) + 1
                            continue
                        hits = int(np.isin(top, buyers, assume_unique=True).sum())
                        rows.append({
                            "method": name,
                            "cohort": coh,
                            "k": k,
                            "segment": si,
                            "category": cats[c],
                            "precision": hits / r,
                            "recall": hits / len(buyers),
                            "hits": hits,
                            "reach": r,
                            "purchasers": int(len(buyers)),
                        })
    return ExperimentResult(rows, skipped, len(protocol.test_only_users))
