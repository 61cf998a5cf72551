"""Synthetic purchase logs drawn from a known multivariate intensity.

Users are independent; within a user, events are sampled by thinning. The
proposal rate at time ``t`` is the base rate plus, for every past event, the
supremum of its kernel over all ages it can still reach. That envelope never
increases between events, so it stays valid until the next proposal, even for
non-monotone Weibull kernels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .events import BehavioralLog, CategoryIndex
from .kernels import (
    DEFAULT_AGE_CLAMP,
    KernelEntry,
    KernelParams,
    Weibull,
    kernel_from_dict,
    kernel_to_dict,
    weibull_components,
)

RESELLER_PREFIX = "reseller-"


@dataclass
class GroundTruthModel:
    categories: tuple[str, ...]
    mu: np.ndarray
    network: np.ndarray
    bank: dict = field(default_factory=dict)  # (target, source) -> KernelParams
    horizon: float = 450.0
    n_users: int = 1000

    def __post_init__(self):
        self.categories = tuple(str(c) for c in self.categories)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.network = np.asarray(self.network, dtype=np.float64)
        C = len(self.categories)
        if self.mu.shape != (C,) or self.network.shape != (C, C):
            raise ValueError("mu / network shapes do not match the categories")
        if np.any(self.mu < 0) or np.any(self.network < 0):
            raise ValueError("base rates and network must be non-negative")
        for c in range(C):
            for cp in range(C):
                if self.network[c, cp] > 0 and (c, cp) not in self.bank:
                    raise ValueError(f"no kernel for excited pair ({c}, {cp})")

    def kernel(self, c: int, cp: int) -> KernelParams | None:
        e = self.bank.get((c, cp))
        return e.params if isinstance(e, KernelEntry) else e

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "mu": self.mu.tolist(),
            "network": self.network.tolist(),
            "horizon_days": self.horizon,
            "users": self.n_users,
            "kernels": [
                {"pair": [self.categories[c], self.categories[cp]], **kernel_to_dict(self.kernel(c, cp))}
                for (c, cp) in sorted(self.bank)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruthModel:
        cats = [str(c) for c in d["categories"]]
        idx = {c: i for i, c in enumerate(cats)}
        bank = {}
        for k in d.get("kernels", []):
            c, cp = (idx[str(x)] for x in k["pair"])
            bank[(c, cp)] = kernel_from_dict(k)
        return cls(
            tuple(cats),
            np.asarray(d["mu"], dtype=np.float64),
            np.asarray(d["network"], dtype=np.float64),
            bank,
            float(d.get("horizon_days", 450.0)),
            int(d.get("users", 1000)),
        )

    @classmethod
    def load(cls, path) -> GroundTruthModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _component_table(model: GroundTruthModel, clamp: float):
    """Flatten every excited pair into Weibull components grouped by source."""
    C = len(model.categories)
    rows = []
    for cp in range(C):
        for c in range(C):
            beta = model.network[c, cp]
            if beta <= 0:
                continue
            for scale, shape, coef in weibull_components(model.kernel(c, cp)):
                if shape < 1:
                    peak = clamp
                elif shape > 1:
                    peak = Weibull(scale, shape).mode
                else:
                    peak = 0.0
                rows.append((cp, c, scale, shape, beta * coef, peak))
    ptr = np.zeros(C + 1, dtype=np.int64)
    for r in rows:
        ptr[r[0] + 1] += 1
    ptr = np.cumsum(ptr)
    arr = np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 5)
    return (
        ptr,
        arr[:, 0].astype(np.int64),
        arr[:, 1].copy(),
        arr[:, 2].copy(),
        arr[:, 3].copy(),
        arr[:, 4].copy(),
    )


@njit(cache=True)
def _wpdf(age, scale, shape, clamp):
    if shape < 1.0 and age < clamp:
        age = clamp
    if age <= 0.0:
        if shape == 1.0:
            return 1.0 / scale
        return 0.0
    z = age / scale
    return (shape / scale) * z ** (shape - 1.0) * math.exp(-(z ** shape))


@njit(cache=True)
def _thin_user(mu, ptr, tgt, scale, shape, coef, peak, T, clamp, uniforms, max_events):
    C = mu.shape[0]
    mu_total = mu.sum()
    times = np.empty(max_events)
    cats = np.empty(max_events, dtype=np.int64)
    lam = np.empty(C)
    n = 0
    used = 0
    t = 0.0
    nu = uniforms.shape[0]
    while True:
        bound = mu_total
        for j in range(n):
            age = t - times[j]
            s = cats[j]
            for q in range(ptr[s], ptr[s + 1]):
                a = age if age > peak[q] else peak[q]
                bound += coef[q] * _wpdf(a, scale[q], shape[q], clamp)
        if not (bound > 0.0):
            return times[:n], cats[:n], used, 0
        if not math.isfinite(bound):
            return times[:n], cats[:n], used, -3
        if used + 2 > nu:
            return times[:n], cats[:n], used, -1
        u1 = uniforms[used]
        u2 = uniforms[used + 1]
        used += 2
        t += -math.log(1.0 - u1) / bound
        if t >= T:
            return times[:n], cats[:n], used, 0
        for c in range(C):
            lam[c] = mu[c]
        for j in range(n):
            age = t - times[j]
            s = cats[j]
            for q in range(ptr[s], ptr[s + 1]):
                lam[tgt[q]] += coef[q] * _wpdf(age, scale[q], shape[q], clamp)
        x = u2 * bound
        total = 0.0
        for c in range(C):
            total += lam[c]
        if x < total:
            pick = C - 1
            acc = 0.0
            for c in range(C):
                acc += lam[c]
                if x < acc:
                    pick = c
                    break
            if n == max_events:
                return times[:n], cats[:n], used, -2
            times[n] = t
            cats[n] = pick
            n += 1


class SimulationError(RuntimeError):
    pass


def simulate_user(model: GroundTruthModel, seed: int, user: int, table=None,
                  clamp: float = DEFAULT_AGE_CLAMP, max_events: int = 100_000):
    """Event times and categories of one user; reproducible from ``(seed, user)``."""
    if table is None:
        table = _component_table(model, clamp)
    buf = 1024
    while True:
        rng = np.random.default_rng([seed, user])
        uniforms = rng.random(buf)
        times, cats, _, status = _thin_user(
            model.mu, *table, float(model.horizon), clamp, uniforms, max_events
        )
        if status == 0:
            return times.copy(), cats.copy()
        if status == -1:
            buf *= 4
            continue
        if status == -2:
            raise SimulationError(f"user {user} exceeded {max_events} events; intensity explodes")
        raise SimulationError("intensity upper bound is not finite")


def simulate_logs(model: GroundTruthModel, seed: int = 0, n_users: int | None = None) -> BehavioralLog:
    """Sample a log for ``n_users`` independent users (default ``model.n_users``)."""
    n = model.n_users if n_users is None else n_users
    table = _component_table(model, DEFAULT_AGE_CLAMP)
    width = max(6, len(str(n)))
    users = [f"u{i:0{width}d}" for i in range(n)]
    ts, cs, us = [], [], []
    for i in range(n):
        t, c = simulate_user(model, seed, i, table)
        ts.append(t)
        cs.append(c)
        us.append(np.full(len(t), i, dtype=np.int64))
    cat = lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt)  # noqa: E731
    return BehavioralLog.from_arrays(
        users,
        CategoryIndex(model.categories),
        cat(us, np.int64),
        cat(cs, np.int64),
        cat(ts, np.float64),
        window_length=model.horizon,
    )


def inject_noise(
    log: BehavioralLog,
    promo_rate: float = 0.0,
    reseller_count: int = 0,
    seed: int = 0,
    *,
    burst_size: int = 10,
    burst_days: float = 7.0,
) -> BehavioralLog:
    """Flag a random ``promo_rate`` share of events as promotional and append
    ``reseller_count`` synthetic users who each buy ``burst_size`` units of one
    category inside a ``burst_days`` span."""
    if not 0.0 <= promo_rate <= 1.0:
        raise ValueError("promo_rate must lie in [0, 1]")
    if not 0 <= reseller_count <= log.n_users:
        raise ValueError("reseller_count must lie in [0, |U|]")
    if promo_rate == 0 and reseller_count == 0:
        return log
    rng = np.random.default_rng(seed)
    promo = log.promo | (rng.random(log.n_events) < promo_rate)

    users = list(log.users)
    u_new, c_new, t_new = [], [], []
    T = log.window_length
    span = min(burst_days * 0.99, T)
    for r in range(reseller_count):
        uid = f"{RESELLER_PREFIX}{r:05d}"
        while uid in set(users):
            uid += "x"
        users.append(uid)
        ui = len(users) - 1
        c = int(rng.integers(log.n_categories))
        start = rng.uniform(0.0, max(T - span, 0.0))
        burst = np.sort(start + rng.uniform(0.0, span, burst_size))
        u_new.extend([ui] * burst_size)
        c_new.extend([c] * burst_size)
        t_new.extend(np.minimum(burst, np.nextafter(T, 0)).tolist())

    n_new = len(t_new)
    return BehavioralLog.from_arrays(
        users,
        log.categories,
        np.concatenate([log.user, np.array(u_new, dtype=np.int64)]),
        np.concatenate([log.category, np.array(c_new, dtype=np.int64)]),
        np.concatenate([log.time, np.array(t_new, dtype=np.float64)]),
        np.concatenate([promo, np.zeros(n_new, bool)]),
        np.concatenate([log.price, np.full(n_new, np.nan)]),
        np.concatenate([log.item, np.full(n_new, None, dtype=object)]),
        window_length=T,
    )
