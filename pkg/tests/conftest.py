from __future__ import annotations

import numpy as np
import pytest

from audiencetpp.events import BehavioralLog, CategoryIndex, PurchaseEvent


def make_log(rows, categories=None, window_length=None, users=None) -> BehavioralLog:
    """Build a log from ``(user, category, time[, promo])`` tuples."""
    events = [
        PurchaseEvent(str(r[0]), str(r[1]), float(r[2]), promo_flag=bool(r[3]) if len(r) > 3 else False)
        for r in rows
    ]
    cats = None if categories is None else CategoryIndex([str(c) for c in categories])
    return BehavioralLog.from_events(events, cats, window_length, users)


def random_log(rng, n_users=20, n_cats=4, n_events=300, T=200.0) -> BehavioralLog:
    users = [f"u{i:03d}" for i in range(n_users)]
    return BehavioralLog.from_arrays(
        users,
        CategoryIndex([f"c{j}" for j in range(n_cats)]),
        rng.integers(0, n_users, n_events),
        rng.integers(0, n_cats, n_events),
        rng.uniform(0, T, n_events),
        promo=rng.random(n_events) < 0.2,
        window_length=T,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line, print it, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
