"""Noise filters and attribution matching between category pairs.

Direction convention used throughout: a matching for ``(c, c')`` pairs an
earlier purchase in the *source* category ``c'`` with a later purchase in the
*target* category ``c``. This matches the network entry ``beta[c, c']``,
which measures how much ``c'`` excites ``c``.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .events import BehavioralLog, _resolve_category

DEFAULT_WINDOW = 10.0


def filter_promotions(log: BehavioralLog) -> BehavioralLog:
    """Drop promotional purchases, keeping organic ones in their original order."""
    return log.select(~log.promo)


def reseller_users(log: BehavioralLog, threshold: int = 10, window: float = 7.0) -> np.ndarray:
    """Indices of users with ``threshold`` same-category purchases inside
    some half-open ``window``-day interval."""
    if threshold < 1 or window <= 0:
        raise ValueError("threshold must be >= 1 and window > 0")
    if log.n_events == 0:
        return np.zeros(0, dtype=np.int64)
    if threshold == 1:
        return np.unique(log.user)
    order = np.lexsort((log.time, log.category, log.user))
    u = log.user[order]
    c = log.category[order]
    t = log.time[order]
    lag = threshold - 1
    if len(t) <= lag:
        return np.zeros(0, dtype=np.int64)
    same = (u[lag:] == u[:-lag]) & (c[lag:] == c[:-lag])
    fast = same & (t[lag:] - t[:-lag] < window)
    return np.unique(u[lag:][fast])


def filter_resellers(
    log: BehavioralLog, threshold: int = 10, window: float = 7.0
) -> tuple[BehavioralLog, set[str]]:
    """Remove every transaction of users flagged by the velocity rule."""
    flagged = reseller_users(log, threshold, window)
    removed = {log.users[u] for u in flagged}
    if not removed:
        return log, removed
    return log.drop_users(flagged), removed


def preprocess_log(
    log: BehavioralLog,
    *,
    promotions: bool = True,
    resellers: bool = True,
    threshold: int = 10,
    window: float = 7.0,
) -> tuple[BehavioralLog, dict]:
    """Fixed pipeline order: promotion filter, then re-seller filter."""
    info = {"events_in": log.n_events, "users_in": log.n_users}
    if promotions:
        before = log.n_events
        log = filter_promotions(log)
        info["promo_removed"] = before - log.n_events
    removed: set[str] = set()
    if resellers:
        log, removed = filter_resellers(log, threshold, window)
    info["resellers_removed"] = sorted(removed)
    info["events_out"] = log.n_events
    info["users_out"] = log.n_users
    return log, info


# -- attribution -------------------------------------------------------------------


@dataclass(frozen=True)
class Matching:
    """Matched ``(t_source, t_target)`` pairs for one user and category pair."""

    user: str
    source: str
    target: str
    pairs: np.ndarray  # shape (n, 2)
    window: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def intervals(self) -> np.ndarray:
        return self.pairs[:, 1] - self.pairs[:, 0]


def greedy_match(sources: list[float], targets: list[float], window: float) -> list[tuple[float, float]]:
    """Pair each source (ascending) with the earliest unused target in
    ``(t, t + window)``.

    Targets at or before the current source can never serve a later source,
    so a single forward pointer suffices.
    """
    out = []
    p = 0
    nt = len(targets)
    for s in sources:
        while p < nt and targets[p] <= s:
            p += 1
        if p == nt:
            break
        if targets[p] < s + window:
            out.append((s, targets[p]))
            p += 1
    return out


def consecutive_gaps(times: list[float]) -> list[tuple[float, float]]:
    """Same-category matching: each purchase with the next strictly later one."""
    out = []
    for a, b in zip(times, times[1:]):
        if b > a:
            out.append((a, b))
    return out


def match_attribution(
    log: BehavioralLog, u, source, target, W: float = DEFAULT_WINDOW
) -> Matching:
    ui = log.user_index(u) if isinstance(u, str) else u
    cs = _resolve_category(log, source)
    ct = _resolve_category(log, target)
    uid = log.users[ui] if ui is not None else str(u)
    if ui is None:
        pairs = []
    else:
        src = log.user_times(int(ui), cs).tolist()
        if cs == ct:
            pairs = consecutive_gaps(src)
            W = math.inf
        else:
            pairs = greedy_match(src, log.user_times(int(ui), ct).tolist(), W)
    arr = np.array(pairs, dtype=np.float64).reshape(-1, 2)
    return Matching(uid, log.categories.ids[cs], log.categories.ids[ct], arr, W)


@dataclass
class PairMatchings:
    """All users' matched pairs for one ordered ``(target, source)`` pair.

    ``between[i]`` counts the user's other purchases (any category) strictly
    inside the open interval of pair ``i``.
    """

    target: int
    source: int
    user: np.ndarray
    t_source: np.ndarray
    t_target: np.ndarray
    between: np.ndarray
    window: float

    def __len__(self) -> int:
        return len(self.user)

    @property
    def intervals(self) -> np.ndarray:
        return self.t_target - self.t_source

    def for_user(self, log: BehavioralLog, u: int) -> Matching:
        m = self.user == u
        pairs = np.stack([self.t_source[m], self.t_target[m]], axis=1)
        ids = log.categories.ids
        return Matching(log.users[u], ids[self.source], ids[self.target], pairs, self.window)


def all_matchings(
    log: BehavioralLog,
    W: float = DEFAULT_WINDOW,
    *,
    include_diagonal: bool = False,
) -> dict[tuple[int, int], PairMatchings]:
    """Matchings for every ordered pair of distinct categories and every user.

    Keys are ``(target, source)`` dense indices; pairs without any match are
    omitted. With ``include_diagonal`` the ``(c, c)`` entries hold consecutive
    same-category gaps without a window cap.
    """
    buf: dict[tuple[int, int], list[list]] = {}
    times_all = log.time
    cats_all = log.category
    for u in range(log.n_users):
        lo, hi = int(log.offsets[u]), int(log.offsets[u + 1])
        if hi - lo < 2:
            continue
        times = times_all[lo:hi].tolist()
        cats = cats_all[lo:hi].tolist()
        by_cat: dict[int, list[float]] = {}
        for t, c in zip(times, cats):
            by_cat.setdefault(c, []).append(t)
        present = sorted(by_cat)
        for cs in present:
            src = by_cat[cs]
            for ct in present:
                if ct == cs:
                    if not include_diagonal:
                        continue
                    pairs = consecutive_gaps(src)
                else:
                    pairs = greedy_match(src, by_cat[ct], W)
                if not pairs:
                    continue
                slot = buf.setdefault((ct, cs), [[], [], [], []])
                for a, b in pairs:
                    slot[0].append(u)
                    slot[1].append(a)
                    slot[2].append(b)
                    # endpoints sit on the interval boundary and are excluded
                    slot[3].append(bisect.bisect_left(times, b) - bisect.bisect_right(times, a))
    out = {}
    for key in sorted(buf):
        us, a, b, m = buf[key]
        ct, cs = key
        out[key] = PairMatchings(
            ct, cs,
            np.array(us, dtype=np.int64),
            np.array(a, dtype=np.float64),
            np.array(b, dtype=np.float64),
            np.array(m, dtype=np.int64),
            math.inf if ct == cs else float(W),
        )
    return out


def dump_matchings(log: BehavioralLog, matchings: dict, dest) -> None:
    """Audit CSV: user_id, source_category, target_category, t_source, t_target."""
    if not hasattr(dest, "write"):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            dump_matchings(log, matchings, fh)
        return
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["user_id", "source_category", "target_category", "t_source", "t_target"])
    ids = log.categories.ids
    for (ct, cs), pm in sorted(matchings.items()):
        for u, a, b in zip(pm.user, pm.t_source, pm.t_target):
            w.writerow([log.users[u], ids[cs], ids[ct], repr(float(a)), repr(float(b))])


def iter_user_matchings(log: BehavioralLog, matchings: dict) -> Iterable[Matching]:
    for pm in matchings.values():
        for u in np.unique(pm.user):
            yield pm.for_user(log, int(u))
