"""Purchase-event data model, ingestion, grid counts and descriptive stats.

Timestamps are fractional days measured from the start of the observation
window. Calendar dates are only understood at the ingestion boundary.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

_logger = logging.getLogger(__name__)

CSV_COLUMNS = ("user_id", "item_id", "category_id", "timestamp_days", "price", "promo_flag")
MONTH_DAYS = 30.0

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"", "0", "false", "f", "no", "n"}


class IngestError(ValueError):
    """A source row could not be turned into a purchase event."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def id_sort_key(value: str):
    # numeric-looking ids sort numerically, the rest lexicographically
    try:
        num = float(value)
    except ValueError:
        return (1, 0.0, value)
    if not math.isfinite(num):
        return (1, 0.0, value)
    return (0, num, value)


@dataclass(frozen=True, slots=True)
class PurchaseEvent:
    user_id: str
    category_id: str
    timestamp: float
    item_id: str | None = None
    price: float | None = None
    promo_flag: bool = False


class CategoryIndex:
    """Bijection between category ids and dense indices ``0..n-1``."""

    def __init__(self, ids: Iterable[str], paths: dict[str, str] | None = None):
        self.ids: tuple[str, ...] = tuple(str(i) for i in ids)
        self._index = {cid: i for i, cid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate category id")
        self.paths = dict(paths or {})

    @classmethod
    def from_ids(cls, ids: Iterable[str]) -> CategoryIndex:
        return cls(sorted({str(i) for i in ids}, key=id_sort_key))

    def index(self, cid) -> int:
        try:
            return self._index[str(cid)]
        except KeyError:
            raise KeyError(f"unknown category {cid!r}") from None

    def __contains__(self, cid) -> bool:
        return str(cid) in self._index

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __eq__(self, other) -> bool:
        return isinstance(other, CategoryIndex) and self.ids == other.ids

    def __repr__(self) -> str:
        return f"CategoryIndex({list(self.ids)!r})"

    @staticmethod
    def parse_store_path(path: str) -> list[str]:
        """Split a ``bpe|fdl|djb`` style store path into node codes."""
        return [p.strip() for p in path.split("|") if p.strip()]


@dataclass(frozen=True, eq=False)
class BehavioralLog:
    """Per-user, time-ordered purchase histories held as flat arrays.

    Events are sorted by (user index, timestamp); ``offsets[u]:offsets[u+1]``
    delimits user ``u``. User indices follow ascending user id, which is also
    the tie-break order used when ranking.
    """

    users: tuple[str, ...]
    categories: CategoryIndex
    user: np.ndarray
    category: np.ndarray
    time: np.ndarray
    promo: np.ndarray
    price: np.ndarray
    item: np.ndarray
    window_length: float
    offsets: np.ndarray = field(repr=False)
    skipped_rows: int = 0

    # -- construction ---------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        users: Sequence[str],
        categories: CategoryIndex,
        user: np.ndarray,
        category: np.ndarray,
        time: np.ndarray,
        promo: np.ndarray | None = None,
        price: np.ndarray | None = None,
        item: np.ndarray | None = None,
        window_length: float | None = None,
        skipped_rows: int = 0,
    ) -> BehavioralLog:
        n = len(time)
        user = np.asarray(user, dtype=np.int64)
        category = np.asarray(category, dtype=np.int64)
        time = np.asarray(time, dtype=np.float64)
        promo = np.zeros(n, bool) if promo is None else np.asarray(promo, dtype=bool)
        price = np.full(n, np.nan) if price is None else np.asarray(price, dtype=np.float64)
        if item is None:
            item = np.full(n, None, dtype=object)
        else:
            item = np.asarray(item, dtype=object)
        if n and (time.min() < 0 or not np.all(np.isfinite(time))):
            raise ValueError("timestamps must be finite and non-negative")
        if n and (category.min() < 0 or category.max() >= len(categories)):
            raise ValueError("category index out of range")
        if n and (user.min() < 0 or user.max() >= len(users)):
            raise ValueError("user index out of range")
        if window_length is None:
            window_length = float(math.floor(time.max()) + 1) if n else 0.0
        if n and time.max() >= window_length:
            raise ValueError("timestamp beyond window length")
        users = [str(u) for u in users]
        if len(set(users)) != len(users):
            raise ValueError("duplicate user id")
        perm = sorted(range(len(users)), key=lambda i: id_sort_key(users[i]))
        if perm != list(range(len(users))):
            remap = np.empty(len(users), dtype=np.int64)
            remap[perm] = np.arange(len(users))
            users = [users[i] for i in perm]
            user = remap[user]
        order = np.lexsort((time, user))
        offsets = np.zeros(len(users) + 1, dtype=np.int64)
        np.cumsum(np.bincount(user, minlength=len(users)), out=offsets[1:])
        log = cls(
            users=tuple(users),
            categories=categories,
            user=user[order],
            category=category[order],
            time=time[order],
            promo=promo[order],
            price=price[order],
            item=item[order],
            window_length=float(window_length),
            offsets=offsets,
            skipped_rows=skipped_rows,
        )
        for arr in (log.user, log.category, log.time, log.promo, log.price, log.item, log.offsets):
            arr.setflags(write=False)
        return log

    @classmethod
    def from_events(
        cls,
        events: Iterable[PurchaseEvent],
        categories: CategoryIndex | None = None,
        window_length: float | None = None,
        users: Iterable[str] | None = None,
    ) -> BehavioralLog:
        events = list(events)
        if categories is None:
            categories = CategoryIndex.from_ids(e.category_id for e in events)
        user_ids = {e.user_id for e in events}
        if users is not None:
            user_ids |= set(users)
        user_ids = sorted(user_ids, key=id_sort_key)
        uidx = {u: i for i, u in enumerate(user_ids)}
        return cls.from_arrays(
            user_ids,
            categories,
            user=np.array([uidx[e.user_id] for e in events], dtype=np.int64),
            category=np.array([categories.index(e.category_id) for e in events], dtype=np.int64),
            time=np.array([e.timestamp for e in events], dtype=np.float64),
            promo=np.array([e.promo_flag for e in events], dtype=bool),
            price=np.array([np.nan if e.price is None else e.price for e in events], dtype=np.float64),
            item=np.array([e.item_id for e in events], dtype=object),
            window_length=window_length,
        )

    # -- accessors ------------------------------------------------------

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_events(self) -> int:
        return len(self.time)

    def user_index(self, uid: str) -> int | None:
        lookup = self.__dict__.get("_uidx")
        if lookup is None:
            lookup = {u: i for i, u in enumerate(self.users)}
            object.__setattr__(self, "_uidx", lookup)
        return lookup.get(str(uid))

    def user_slice(self, u: int) -> slice:
        return slice(int(self.offsets[u]), int(self.offsets[u + 1]))

    def user_times(self, u: int, c: int | None = None) -> np.ndarray:
        sl = self.user_slice(u)
        if c is None:
            return self.time[sl]
        return self.time[sl][self.category[sl] == c]

    def iter_events(self) -> Iterator[PurchaseEvent]:
        for k in range(self.n_events):
            price = self.price[k]
            yield PurchaseEvent(
                user_id=self.users[self.user[k]],
                category_id=self.categories.ids[self.category[k]],
                timestamp=float(self.time[k]),
                item_id=self.item[k],
                price=None if np.isnan(price) else float(price),
                promo_flag=bool(self.promo[k]),
            )

    def category_totals(self) -> np.ndarray:
        return np.bincount(self.category, minlength=self.n_categories)

    def user_category_counts(self) -> np.ndarray:
        """Dense ``|U| x |C|`` matrix of purchase counts."""
        out = np.zeros((self.n_users, self.n_categories), dtype=np.int64)
        np.add.at(out, (self.user, self.category), 1)
        return out

    # -- derived logs ---------------------------------------------------

    def select(self, mask: np.ndarray, window_length: float | None = None) -> BehavioralLog:
        """Keep events where ``mask`` is true; all users stay registered."""
        mask = np.asarray(mask, dtype=bool)
        return BehavioralLog.from_arrays(
            self.users,
            self.categories,
            self.user[mask],
            self.category[mask],
            self.time[mask],
            self.promo[mask],
            self.price[mask],
            self.item[mask],
            window_length=self.window_length if window_length is None else window_length,
        )

    def drop_users(self, drop: Iterable[int]) -> BehavioralLog:
        drop = set(int(u) for u in drop)
        keep_users = [u for u in range(self.n_users) if u not in drop]
        remap = np.full(self.n_users, -1, dtype=np.int64)
        remap[keep_users] = np.arange(len(keep_users))
        mask = remap[self.user] >= 0
        return BehavioralLog.from_arrays(
            [self.users[u] for u in keep_users],
            self.categories,
            remap[self.user[mask]],
            self.category[mask],
            self.time[mask],
            self.promo[mask],
            self.price[mask],
            self.item[mask],
            window_length=self.window_length,
        )

    def truncate(self, t: float) -> BehavioralLog:
        """Events strictly before ``t``; the window shrinks to ``t``."""
        return self.select(self.time < t, window_length=float(t))

    def same_events(self, other: BehavioralLog) -> bool:
        """Event-level equality (ids, times, flags, prices, items)."""
        a = sorted(_event_key(e) for e in self.iter_events())
        b = sorted(_event_key(e) for e in other.iter_events())
        return a == b


def _event_key(e: PurchaseEvent):
    return (
        e.user_id,
        e.timestamp,
        e.category_id,
        e.item_id or "",
        -1.0 if e.price is None else e.price,
        e.promo_flag,
    )


# -- ingestion ----------------------------------------------------------


def _parse_bool(raw, line: int) -> bool:
    if isinstance(raw, bool):
        return raw
    if raw is None:
        return False
    text = str(raw).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise IngestError(line, f"bad promo_flag {raw!r}")


def _parse_time(raw, line: int, epoch: datetime | None) -> float:
    if raw is None or (isinstance(raw, str) and not raw.strip()):
        raise IngestError(line, "missing timestamp")
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        value = float(raw)
    else:
        text = str(raw).strip()
        try:
            value = float(text)
        except ValueError:
            if epoch is None:
                raise IngestError(line, f"calendar timestamp {text!r} needs an epoch") from None
            try:
                stamp = datetime.fromisoformat(text)
            except ValueError:
                raise IngestError(line, f"unparseable timestamp {text!r}") from None
            value = (stamp - epoch).total_seconds() / 86400.0
    if not math.isfinite(value) or value < 0:
        raise IngestError(line, f"timestamp {value} outside the window")
    return value


def _parse_row(row: dict, line: int, epoch: datetime | None) -> PurchaseEvent:
    uid = row.get("user_id")
    cid = row.get("category_id")
    if uid is None or str(uid).strip() == "":
        raise IngestError(line, "missing user_id")
    if cid is None or str(cid).strip() == "":
        raise IngestError(line, "missing category_id")
    raw_t = row.get("timestamp_days", row.get("timestamp"))
    t = _parse_time(raw_t, line, epoch)
    item = row.get("item_id")
    item = None if item is None or str(item) == "" else str(item)
    price = row.get("price")
    if price is None or str(price).strip() == "":
        price = None
    else:
        try:
            price = float(price)
        except ValueError:
            raise IngestError(line, f"bad price {price!r}") from None
        if price < 0:
            raise IngestError(line, "negative price")
    return PurchaseEvent(
        user_id=str(uid).strip(),
        category_id=str(cid).strip(),
        timestamp=t,
        item_id=item,
        price=price,
        promo_flag=_parse_bool(row.get("promo_flag"), line),
    )


def _rows(source: IO, fmt: str) -> Iterator[tuple[int, dict | None, str | None]]:
    if fmt == "csv":
        reader = csv.DictReader(source)
        if reader.fieldnames is None:
            return
        missing = {"user_id", "category_id"} - set(reader.fieldnames)
        if missing or not ({"timestamp_days", "timestamp"} & set(reader.fieldnames)):
            raise IngestError(1, f"header lacks required columns: {reader.fieldnames}")
        for row in reader:
            if None in row:
                yield reader.line_num, None, "too many fields"
            else:
                yield reader.line_num, row, None
    elif fmt == "jsonl":
        for line_no, line in enumerate(source, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                yield line_no, None, f"invalid JSON ({exc.msg})"
                continue
            if not isinstance(obj, dict):
                yield line_no, None, "not a JSON object"
            else:
                yield line_no, obj, None
    else:
        raise ValueError(f"unknown format {fmt!r}")


def ingest_events(
    source,
    fmt: str = "csv",
    *,
    strict: bool = True,
    categories: CategoryIndex | None = None,
    window_length: float | None = None,
    epoch: date | datetime | str | None = None,
) -> BehavioralLog:
    """Read a CSV or JSONL event source into a :class:`BehavioralLog`.

    ``source`` may be a path, a text stream or a byte stream. In strict mode
    the first malformed row raises :class:`IngestError`; otherwise such rows
    are skipped and counted in ``log.skipped_rows``.
    """
    if isinstance(epoch, str):
        epoch = datetime.fromisoformat(epoch)
    elif isinstance(epoch, date) and not isinstance(epoch, datetime):
        epoch = datetime(epoch.year, epoch.month, epoch.day)

    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return ingest_events(
                fh, fmt, strict=strict, categories=categories,
                window_length=window_length, epoch=epoch,
            )
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, io.BufferedIOBase) or "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")

    events: list[PurchaseEvent] = []
    skipped = 0
    for line, row, problem in _rows(source, fmt):
        try:
            if problem is not None:
                raise IngestError(line, problem)
            ev = _parse_row(row, line, epoch)
            if categories is not None and ev.category_id not in categories:
                raise IngestError(line, f"unknown category {ev.category_id!r}")
            if window_length is not None and ev.timestamp >= window_length:
                raise IngestError(line, f"timestamp {ev.timestamp} >= window {window_length}")
        except IngestError:
            if strict:
                raise
            skipped += 1
            continue
        events.append(ev)
    if skipped:
        _logger.warning("skipped %d malformed rows", skipped)
    log = BehavioralLog.from_events(events, categories=categories, window_length=window_length)
    if skipped:
        object.__setattr__(log, "skipped_rows", skipped)
    return log


def write_events(log: BehavioralLog, dest, fmt: str = "csv") -> None:
    """Serialize a log; floats use ``repr`` so re-ingestion is exact."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_events(log, fh, fmt)
        return
    if fmt == "csv":
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for e in log.iter_events():
            writer.writerow([
                e.user_id,
                "" if e.item_id is None else e.item_id,
                e.category_id,
                repr(e.timestamp),
                "" if e.price is None else repr(e.price),
                "1" if e.promo_flag else "0",
            ])
    elif fmt == "jsonl":
        for e in log.iter_events():
            dest.write(json.dumps({
                "user_id": e.user_id,
                "item_id": e.item_id,
                "category_id": e.category_id,
                "timestamp_days": e.timestamp,
                "price": e.price,
                "promo_flag": e.promo_flag,
            }) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


# -- grid counts ----------------------------------------------------------


@dataclass(frozen=True)
class CountMatrix:
    """Sparse ``|U| x S`` counts of one category on a half-open day grid.

    Cell ``s`` covers ``[origin + s*grain, origin + (s+1)*grain)``.
    """

    category: int
    grain: float
    horizon: int
    origin: float
    counts: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


def _resolve_category(log: BehavioralLog, c) -> int:
    if isinstance(c, (int, np.integer)):
        if not 0 <= c < log.n_categories:
            raise KeyError(f"category index {c} out of range")
        return int(c)
    return log.categories.index(c)


def _grid(log: BehavioralLog, grain: float, horizon: int, end: float | None):
    if grain <= 0:
        raise ValueError("grain must be positive")
    if horizon < 1:
        raise ValueError("horizon must be at least one cell")
    if end is None:
        if horizon * grain < log.window_length - 1e-12:
            raise ValueError(
                f"grid of {horizon} x {grain} days does not cover window {log.window_length}; "
                "pass end= to truncate"
            )
        origin = 0.0
        end = horizon * grain
    else:
        origin = end - horizon * grain
    cell = np.floor((log.time - origin) / grain).astype(np.int64)
    keep = (log.time >= origin) & (log.time < end) & (cell >= 0) & (cell < horizon)
    return origin, cell, keep


def count_matrices(
    log: BehavioralLog, grain: float, horizon: int, end: float | None = None
) -> list[CountMatrix]:
    """Count matrices for every category in one pass over the events.

    Without ``end`` the grid starts at day 0 and must cover the window.
    With ``end`` the grid is the ``horizon`` cells immediately before ``end``
    and older events are dropped.
    """
    origin, cell, keep = _grid(log, grain, horizon, end)
    out = []
    for c in range(log.n_categories):
        m = keep & (log.category == c)
        mat = sp.csr_matrix(
            (np.ones(int(m.sum()), dtype=np.float64), (log.user[m], cell[m])),
            shape=(log.n_users, horizon),
        )
        mat.sum_duplicates()
        out.append(CountMatrix(c, float(grain), int(horizon), float(origin), mat))
    return out


def count_matrix(
    log: BehavioralLog, c, grain: float, horizon: int, end: float | None = None
) -> CountMatrix:
    ci = _resolve_category(log, c)
    origin, cell, keep = _grid(log, grain, horizon, end)
    m = keep & (log.category == ci)
    mat = sp.csr_matrix(
        (np.ones(int(m.sum()), dtype=np.float64), (log.user[m], cell[m])),
        shape=(log.n_users, horizon),
    )
    mat.sum_duplicates()
    return CountMatrix(ci, float(grain), int(horizon), float(origin), mat)


def counts_upto(log: BehavioralLog, u, c, t: float) -> int:
    """Number of purchases by user ``u`` in category ``c`` strictly before ``t``."""
    ui = log.user_index(u) if isinstance(u, str) else u
    if ui is None:
        return 0
    ci = _resolve_category(log, c)
    times = log.user_times(int(ui), ci)
    return int(np.searchsorted(times, t, side="left"))


def counts_before(log: BehavioralLog, t: float) -> np.ndarray:
    """``|U| x |C|`` matrix of :func:`counts_upto` for every pair at once."""
    out = np.zeros((log.n_users, log.n_categories), dtype=np.int64)
    m = log.time < t
    np.add.at(out, (log.user[m], log.category[m]), 1)
    return out


# -- descriptive statistics ---------------------------------------------------


@dataclass
class StatsReport:
    n_users: int
    n_categories: int
    n_events: int
    purchases_per_user: dict[int, int]
    purchases_per_category: dict[str, int]
    unique_categories_per_user: dict[int, int]
    regular_users: int
    occasional_users: int
    regular_share: float | None
    occasional_share: float | None
    head_categories: list[str]
    tail_categories: list[str]
    head_share: float | None
    tail_share: float | None
    regular_threshold_months: int
    head_threshold_purchases: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["purchases_per_user"] = {str(k): v for k, v in sorted(self.purchases_per_user.items())}
        d["unique_categories_per_user"] = {
            str(k): v for k, v in sorted(self.unique_categories_per_user.items())
        }
        return d


def log_stats(
    log: BehavioralLog, regular_threshold: int = 5, head_threshold: int = 350_000
) -> StatsReport:
    """Skew and sparsity summary of a log.

    A user is regular when active in at least ``regular_threshold`` distinct
    30-day buckets counted from the window start. A category is head when it
    has strictly more than ``head_threshold`` purchases.
    """
    per_user = np.diff(log.offsets)
    per_cat = log.category_totals()
    total = log.n_events

    months = np.floor(log.time / MONTH_DAYS).astype(np.int64)
    active_months = np.zeros(log.n_users, dtype=np.int64)
    uniq_cats = np.zeros(log.n_users, dtype=np.int64)
    if total:
        pairs = np.unique(np.stack([log.user, months]), axis=1)
        np.add.at(active_months, pairs[0], 1)
        pairs = np.unique(np.stack([log.user, log.category]), axis=1)
        np.add.at(uniq_cats, pairs[0], 1)
    regular = active_months >= regular_threshold
    head = per_cat > head_threshold

    if total:
        reg_share = float(per_user[regular].sum() / total)
        occ_share = 1.0 - reg_share
        head_share = float(per_cat[head].sum() / total)
        tail_share = 1.0 - head_share
    else:
        reg_share = occ_share = head_share = tail_share = None

    ids = log.categories.ids
    return StatsReport(
        n_users=log.n_users,
        n_categories=log.n_categories,
        n_events=total,
        purchases_per_user=dict(Counter(int(x) for x in per_user)),
        purchases_per_category={ids[c]: int(per_cat[c]) for c in range(log.n_categories)},
        unique_categories_per_user=dict(Counter(int(x) for x in uniq_cats)),
        regular_users=int(regular.sum()),
        occasional_users=int((~regular).sum()),
        regular_share=reg_share,
        occasional_share=occ_share,
        head_categories=[ids[c] for c in np.flatnonzero(head)],
        tail_categories=[ids[c] for c in np.flatnonzero(~head)],
        head_share=head_share,
        tail_share=tail_share,
        regular_threshold_months=regular_threshold,
        head_threshold_purchases=head_threshold,
    )
