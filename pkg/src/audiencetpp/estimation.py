"""Likelihood-free estimation of base rates, kernels and the category network.

Each stage is estimated separately from the pre-processed log: base rates
from raw counts, kernels from per-user weighted mean intervals, and the
network from attribution match counts (Markov estimator) optionally lifted by
target-category popularity.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import BehavioralLog
from .kernels import (
    FitDegenerate,
    KernelEntry,
    MoW,
    Weibull,
    fit_mow,
    fit_weibull,
)
from .preprocess import DEFAULT_WINDOW, Matching, PairMatchings, all_matchings

_logger = logging.getLogger(__name__)

MIN_SAMPLES = 30
DEFAULT_DIAGONAL_PRIOR = MoW(((30.0, 1.0, 1.0),))


class NoMatches(ValueError):
    """The matching has no pairs, so no interval can be extracted."""


@dataclass(frozen=True)
class BaseIntensities:
    rates: np.ndarray
    span: float
    per_user: bool = False

    def to_dict(self, categories) -> dict:
        return {
            "span_days": self.span,
            "per_user": self.per_user,
            "rates": {categories[c]: float(r) for c, r in enumerate(self.rates)},
        }


def estimate_base_intensity(log: BehavioralLog, per_user: bool = False) -> BaseIntensities:
    """Category purchase totals divided by the training span.

    With ``per_user`` the totals are further divided by the number of
    registered users, giving a rate on the scale of a single user's intensity.
    """
    T = log.window_length
    if T <= 0:
        raise ValueError("training span must be positive")
    rates = log.category_totals().astype(np.float64) / T
    if per_user:
        rates = rates / max(log.n_users, 1)
    return BaseIntensities(rates, float(T), per_user)


def interval_weights(between) -> np.ndarray:
    return 1.0 / np.log2(2.0 + np.asarray(between, dtype=np.float64))


def weighted_interval(matching: Matching, log: BehavioralLog) -> float:
    """Weighted mean pair interval for one user's matching.

    Each pair is weighted by ``1 / log2(2 + m)`` where ``m`` counts the user's
    other purchases strictly inside the pair's open interval.
    """
    if len(matching) == 0:
        raise NoMatches(f"no matched pairs for user {matching.user}")
    u = log.user_index(matching.user)
    times = log.user_times(u)
    a, b = matching.pairs[:, 0], matching.pairs[:, 1]
    m = np.searchsorted(times, b, side="left") - np.searchsorted(times, a, side="right")
    w = interval_weights(m)
    return float(np.sum(w * (b - a)) / np.sum(w))


def extract_samples(pm: PairMatchings | None, n_users: int | None = None):
    """One weighted mean interval per user with a non-empty matching.

    Returns ``(users, dbar)`` arrays sorted by user index.
    """
    if pm is None or len(pm) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    w = interval_weights(pm.between)
    size = int(pm.user.max()) + 1 if n_users is None else n_users
    num = np.bincount(pm.user, weights=w * pm.intervals, minlength=size)
    den = np.bincount(pm.user, weights=w, minlength=size)
    users = np.flatnonzero(den > 0)
    return users, num[users] / den[users]


def _fit_pair(kind: str, samples: np.ndarray, K: int, seed: int):
    if kind == "weibull":
        return fit_weibull(samples), None
    res = fit_mow(samples, K=min(K, len(samples)), seed=seed)
    return res.params, res.loglik


def estimate_kernels(
    log: BehavioralLog,
    matchings: dict | None = None,
    K: int = 5,
    *,
    seed: int = 0,
    min_samples: int = MIN_SAMPLES,
    window: float = DEFAULT_WINDOW,
    threads: int = 1,
) -> dict[tuple[int, int], KernelEntry]:
    """Fit the full ``|C| x |C|`` kernel bank.

    Off-diagonal pairs get a Weibull fit, diagonal pairs a K-component MoW.
    Pairs with fewer than ``min_samples`` per-user intervals, or whose fit
    degenerates, fall back to a prior: the median fitted off-diagonal Weibull,
    or the MoW fitted to the pooled diagonal samples.
    """
    if matchings is None:
        matchings = all_matchings(log, window, include_diagonal=True)
    C = log.n_categories
    samples = {}
    for c in range(C):
        for cp in range(C):
            samples[(c, cp)] = extract_samples(matchings.get((c, cp)), log.n_users)[1]

    jobs = []
    for (c, cp), s in samples.items():
        if c == cp:
            if len(s) >= max(min_samples, K):
                jobs.append(((c, cp), "mow", s, seed * 1_000_003 + c))
        elif len(s) >= min_samples:
            jobs.append(((c, cp), "weibull", s, 0))

    def run(job):
        key, kind, s, sd = job
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                p, ll = _fit_pair(kind, s, K, sd)
                return key, KernelEntry(p, "fitted", len(s), ll)
            except FitDegenerate:
                return key, None

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = dict(ex.map(run, jobs))
    else:
        results = dict(map(run, jobs))

    bank: dict[tuple[int, int], KernelEntry] = {
        k: v for k, v in results.items() if v is not None
    }

    fitted_off = [e.params for (c, cp), e in bank.items() if c != cp]
    if fitted_off:
        off_prior = Weibull(
            float(np.median([p.scale for p in fitted_off])),
            float(np.median([p.shape for p in fitted_off])),
        )
        off_prov = "fallback:median-offdiagonal"
    else:
        off_prior = Weibull(window / 2.0, 1.0)
        off_prov = "fallback:default"

    pooled = np.concatenate([samples[(c, c)] for c in range(C)]) if C else np.zeros(0)
    diag_prior, diag_prov = DEFAULT_DIAGONAL_PRIOR, "fallback:default"
    needs_diag = any((c, c) not in bank for c in range(C))
    if needs_diag and len(pooled) >= max(min_samples, K):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            diag_prior = fit_mow(pooled, K=K, seed=seed).params
        diag_prov = "fallback:pooled-diagonal"

    for c in range(C):
        for cp in range(C):
            if (c, cp) in bank:
                continue
            n = len(samples[(c, cp)])
            if c == cp:
                bank[(c, cp)] = KernelEntry(diag_prior, diag_prov, n)
            else:
                bank[(c, cp)] = KernelEntry(off_prior, off_prov, n)
    n_fallback = sum(1 for e in bank.values() if e.provenance != "fitted")
    if n_fallback:
        _logger.info("%d of %d kernels use a fallback prior", n_fallback, len(bank))
    return dict(sorted(bank.items()))


@dataclass(frozen=True)
class LatentNetwork:
    """``matrix[c, c']`` is the excitation of target ``c`` by source ``c'``."""

    matrix: np.ndarray
    estimator: str = "MKV"
    alpha_s: float = 3.0
    beta_s: float = 0.1

    def to_dict(self, categories) -> dict:
        return {
            "estimator": self.estimator,
            "smoothing": {"alpha": self.alpha_s, "beta": self.beta_s},
            "categories": list(categories),
            "matrix": [[float(v) for v in row] for row in self.matrix],
        }

    @classmethod
    def from_dict(cls, d: dict) -> LatentNetwork:
        sm = d.get("smoothing", {})
        return cls(
            np.asarray(d["matrix"], dtype=np.float64),
            d.get("estimator", "MKV"),
            float(sm.get("alpha", 3.0)),
            float(sm.get("beta", 0.1)),
        )


def match_counts(matchings: dict, C: int) -> np.ndarray:
    counts = np.zeros((C, C), dtype=np.float64)
    for (c, cp), pm in matchings.items():
        counts[c, cp] = len(pm)
    return counts


def estimate_network_mkv(
    log: BehavioralLog,
    matchings: dict | None = None,
    alpha_s: float = 3.0,
    beta_s: float = 0.1,
    *,
    window: float = DEFAULT_WINDOW,
) -> LatentNetwork:
    """Markov estimator: smoothed share of source purchases followed by a
    target purchase, ``(matches + alpha) / (source total + |C| beta)``."""
    if matchings is None:
        matchings = all_matchings(log, window, include_diagonal=True)
    C = log.n_categories
    matches = match_counts(matchings, C)
    source_totals = log.category_totals().astype(np.float64)
    B = (matches + alpha_s) / (source_totals[None, :] + C * beta_s)
    return LatentNetwork(B, "MKV", alpha_s, beta_s)


def lift_network(
    mkv: LatentNetwork, totals, cap: float | None = None
) -> LatentNetwork:
    """Divide each target row by that category's share of all purchases.

    Rows of never-purchased targets are set to ``cap`` (default: the largest
    finite lifted entry) and a warning is emitted.
    """
    totals = np.asarray(totals, dtype=np.float64)
    B = mkv.matrix
    grand = totals.sum()
    share = totals / grand if grand > 0 else np.zeros_like(totals)
    lifted = np.empty_like(B)
    ok = share > 0
    lifted[ok] = B[ok] / share[ok, None]
    if not ok.all():
        if cap is None:
            cap = float(lifted[ok].max()) if ok.any() else float(B.max())
        warnings.warn(
            f"{int((~ok).sum())} categories have no purchases; lifted rows capped at {cap}",
            RuntimeWarning,
            stacklevel=2,
        )
        lifted[~ok] = cap
    return LatentNetwork(lifted, "LMKV", mkv.alpha_s, mkv.beta_s)


def estimate_network(
    log: BehavioralLog,
    matchings: dict | None = None,
    estimator: str = "LMKV",
    alpha_s: float = 3.0,
    beta_s: float = 0.1,
    *,
    window: float = DEFAULT_WINDOW,
) -> LatentNetwork:
    net = estimate_network_mkv(log, matchings, alpha_s, beta_s, window=window)
    est = estimator.upper()
    if est == "MKV":
        return net
    if est == "LMKV":
        return lift_network(net, log.category_totals())
    raise ValueError(f"unknown estimator {estimator!r}")


def mkv_upper_bound(net: LatentNetwork, matchings: dict, C: int) -> float:
    n_max = float(match_counts(matchings, C).max()) if C else 0.0
    return (n_max + net.alpha_s) / (C * net.beta_s)



@dataclass
class FittedModel:
    """Everything inference needs: base rates, network, kernels and grid."""

    categories: tuple[str, ...]
    base: BaseIntensities
    network: LatentNetwork
    bank: dict
    grain: float
    horizon: int
    settings: dict

    def precompute(self):
        from .inference import build_precompute

        return build_precompute(self.network, self.bank, self.grain, self.horizon)

    def to_dict(self) -> dict:
        from .kernels import bank_to_json

        cats = list(self.categories)
        return {
            "categories": cats,
            "grain_days": self.grain,
            "horizon_cells": self.horizon,
            "base_intensity": self.base.to_dict(cats),
            "network": self.network.to_dict(cats),
            "kernels": bank_to_json(self.bank, cats),
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> FittedModel:
        from .kernels import bank_from_json

        cats = [str(c) for c in d["categories"]]
        b = d["base_intensity"]
        base = BaseIntensities(
            np.array([float(b["rates"][c]) for c in cats]), float(b["span_days"]), bool(b["per_user"])
        )
        return cls(
            tuple(cats),
            base,
            LatentNetwork.from_dict(d["network"]),
            bank_from_json(d["kernels"], cats),
            float(d["grain_days"]),
            int(d["horizon_cells"]),
            dict(d.get("settings", {})),
        )

    @classmethod
    def load(cls, path) -> FittedModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_model(
    log: BehavioralLog,
    *,
    K: int = 5,
    estimator: str = "LMKV",
    alpha_s: float = 3.0,
    beta_s: float = 0.1,
    window: float = DEFAULT_WINDOW,
    per_user_base: bool = True,
    grain: float = 1.0,
    horizon_days: float = 180.0,
    seed: int = 0,
    threads: int = 1,
    min_samples: int = MIN_SAMPLES,
) -> FittedModel:
    """Estimate base rates, kernels and network from a pre-processed log."""
    cells = int(round(horizon_days / grain))
    if cells < 1 or abs(cells * grain - horizon_days) > 1e-9 * max(horizon_days, 1.0):
        raise ValueError(f"horizon {horizon_days} is not a whole number of {grain}-day cells")
    matchings = all_matchings(log, window, include_diagonal=True)
    base = estimate_base_intensity(log, per_user=per_user_base)
    bank = estimate_kernels(
        log, matchings, K, seed=seed, min_samples=min_samples, window=window, threads=threads
    )
    network = estimate_network(log, matchings, estimator, alpha_s, beta_s, window=window)
    settings = {
        "K": K,
        "estimator": network.estimator,
        "attribution_window_days": window,
        "per_user_base": per_user_base,
        "seed": seed,
        "min_samples": min_samples,
    }
    return FittedModel(tuple(log.categories.ids), base, network, bank, float(grain), cells, settings)
