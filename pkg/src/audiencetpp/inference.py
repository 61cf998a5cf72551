"""Quantized intensity computation and audience ranking.

The excitation of target ``c`` by source ``c'`` at a tick is the final
output of a convolution between the quantized kernel and the user's grid
counts. Stacking the time-reversed, network-scaled kernel rows turns that
into one sparse-dense matrix product per source category.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import BehavioralLog, CountMatrix, count_matrices
from .estimation import BaseIntensities, LatentNetwork
from .kernels import KernelEntry, eval_kernel, quantize_kernel

_logger = logging.getLogger(__name__)


def toeplitz_matrix(a: np.ndarray, n: int | None = None) -> np.ndarray:
    """``(len(a) + n - 1) x n`` Toeplitz matrix with ``T @ b == np.convolve(a, b)``."""
    a = np.asarray(a, dtype=np.float64)
    n = len(a) if n is None else n
    m = len(a)
    T = np.zeros((m + n - 1, n))
    for j in range(n):
        T[j:j + m, j] = a
    return T


def convolve_matmul(a, b) -> np.ndarray:
    """Full linear convolution of ``a`` and ``b`` as a matrix-vector product."""
    b = np.asarray(b, dtype=np.float64)
    return toeplitz_matrix(a, len(b)) @ b


def quantized_excitation(levels, counts) -> float:
    """Excitation at the tick that closes the count grid.

    A count in cell ``s`` of ``S`` meets kernel level ``S - 1 - s``, so the
    most recent cell sees the age-zero level.
    """
    k = np.asarray(levels, dtype=np.float64)
    n = np.asarray(counts, dtype=np.float64)
    if k.shape != n.shape or k.ndim != 1:
        raise ValueError(f"length mismatch: {k.shape} vs {n.shape}")
    return float(np.dot(k[::-1], n))


@dataclass(frozen=True)
class PrecomputeBank:
    """Kernel levels and their network-scaled counterparts.

    ``levels[c, c', s]`` is the quantized kernel for target ``c`` and source
    ``c'``; ``scaled[c, c', s] = beta[c, c'] * levels[c, c', s]``.
    """

    levels: np.ndarray
    network: np.ndarray
    scaled: np.ndarray
    grain: float
    horizon: int

    @property
    def n_categories(self) -> int:
        return self.levels.shape[0]

    def for_target(self, c: int) -> np.ndarray:
        return self.scaled[c]

    def reversed_by_source(self) -> np.ndarray:
        """``R[c', s, c] = scaled[c, c', S-1-s]``, ready for ``N_{c'} @ R[c']``."""
        return np.ascontiguousarray(self.scaled[:, :, ::-1].transpose(1, 2, 0))

    @classmethod
    def from_levels(cls, network, levels, grain: float) -> PrecomputeBank:
        B = np.asarray(network, dtype=np.float64)
        K = np.asarray(levels, dtype=np.float64)
        if K.ndim != 3 or K.shape[:2] != B.shape:
            raise ValueError(f"levels {K.shape} do not match network {B.shape}")
        return cls(K, B, B[:, :, None] * K, float(grain), K.shape[2])


def build_precompute(
    network: LatentNetwork | np.ndarray, bank: dict, grain: float, horizon: int
) -> PrecomputeBank:
    B = network.matrix if isinstance(network, LatentNetwork) else np.asarray(network, float)
    C = B.shape[0]
    if B.shape != (C, C):
        raise ValueError("network must be square")
    K = np.zeros((C, C, horizon))
    for c in range(C):
        for cp in range(C):
            entry = bank.get((c, cp))
            if entry is None:
                raise KeyError(f"kernel bank has no entry for pair ({c}, {cp})")
            p = entry.params if isinstance(entry, KernelEntry) else entry
            K[c, cp] = quantize_kernel(p, grain, horizon).levels
    return PrecomputeBank.from_levels(B, K, grain)


@dataclass
class IntensityMatrix:
    values: np.ndarray  # |U| x |C|
    users: tuple[str, ...]
    categories: tuple[str, ...]
    tick: float
    grain: float | None = None
    horizon: int | None = None

    def column(self, c) -> np.ndarray:
        ci = c if isinstance(c, (int, np.integer)) else self.categories.index(str(c))
        return self.values[:, ci]

    def to_csv(self, dest) -> None:
        if not hasattr(dest, "write"):
            with open(dest, "w", newline="", encoding="utf-8") as fh:
                return self.to_csv(fh)
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(["user_id", "category_id", "intensity"])
        for u, uid in enumerate(self.users):
            row = self.values[u]
            for c, cid in enumerate(self.categories):
                w.writerow([uid, cid, repr(float(row[c]))])

    @classmethod
    def from_csv(cls, src, tick: float = float("nan")) -> IntensityMatrix:
        from .events import id_sort_key

        if not hasattr(src, "read"):
            with open(src, newline="", encoding="utf-8") as fh:
                return cls.from_csv(fh, tick)
        rows = list(csv.DictReader(src))
        users = sorted({r["user_id"] for r in rows}, key=id_sort_key)
        cats = sorted({r["category_id"] for r in rows}, key=id_sort_key)
        ui = {u: i for i, u in enumerate(users)}
        ci = {c: i for i, c in enumerate(cats)}
        vals = np.zeros((len(users), len(cats)))
        for r in rows:
            vals[ui[r["user_id"]], ci[r["category_id"]]] = float(r["intensity"])
        return cls(vals, tuple(users), tuple(cats), tick)

    def save_binary(self, path) -> None:
        """Raw float64 matrix plus a JSON sidecar header."""
        path = Path(path)
        header = {
            "dtype": "<f8",
            "shape": list(self.values.shape),
            "order": "C",
            "tick": self.tick,
            "grain": self.grain,
            "horizon": self.horizon,
            "users": list(self.users),
            "categories": list(self.categories),
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=1))
        np.ascontiguousarray(self.values, dtype="<f8").tofile(path)

    @classmethod
    def load_binary(cls, path) -> IntensityMatrix:
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        vals = np.fromfile(path, dtype=header["dtype"]).reshape(header["shape"])
        return cls(vals, tuple(header["users"]), tuple(header["categories"]),
                   header["tick"], header["grain"], header["horizon"])


def _check_counts(pre: PrecomputeBank, counts: Sequence[CountMatrix]) -> int:
    if len(counts) != pre.n_categories:
        raise ValueError(f"{len(counts)} count matrices for {pre.n_categories} categories")
    n_users = counts[0].shape[0] if counts else 0
    for cm in counts:
        if cm.shape != (n_users, pre.horizon):
            raise ValueError(f"count matrix shape {cm.shape} != ({n_users}, {pre.horizon})")
        if abs(cm.grain - pre.grain) > 1e-12:
            raise ValueError(f"count grain {cm.grain} != precompute grain {pre.grain}")
    return n_users


def infer_intensities(
    mu: BaseIntensities | np.ndarray,
    pre: PrecomputeBank,
    counts: Sequence[CountMatrix],
    *,
    users: Sequence[str] | None = None,
    categories: Sequence[str] | None = None,
    tick: float | None = None,
    threads: int = 1,
    chunk: int = 65536,
) -> IntensityMatrix:
    """Intensities for every user and category at the tick closing the grid.

    ``Lambda = mu + sum_{c'} N_{c'} @ R_{c'}`` where ``R_{c'}`` stacks the
    time-reversed network-scaled kernel rows of source ``c'``.
    """
    rates = mu.rates if isinstance(mu, BaseIntensities) else np.asarray(mu, dtype=np.float64)
    n_users = _check_counts(pre, counts)
    C = pre.n_categories
    if rates.shape != (C,):
        raise ValueError(f"base intensities {rates.shape} do not match {C} categories")
    R = pre.reversed_by_source()
    mats = [cm.counts.tocsr() for cm in counts]

    def block(lo: int, hi: int) -> np.ndarray:
        out = np.empty((hi - lo, C))
        out[:] = rates
        for cp in range(C):
            part = mats[cp][lo:hi]
            if part.nnz:
                out += part @ R[cp]
        return out

    bounds = [(lo, min(lo + chunk, n_users)) for lo in range(0, n_users, chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda b: block(*b), bounds))
    else:
        parts = [block(lo, hi) for lo, hi in bounds]
    values = np.vstack(parts) if parts else np.zeros((0, C))
    if tick is None and counts:
        tick = counts[0].origin + pre.horizon * pre.grain
    if users is None:
        users = tuple(str(u) for u in range(n_users))
    if categories is None:
        categories = tuple(str(c) for c in range(C))
    return IntensityMatrix(values, tuple(users), tuple(categories), tick, pre.grain, pre.horizon)


def infer_at(
    log: BehavioralLog,
    mu: BaseIntensities | np.ndarray,
    pre: PrecomputeBank,
    t: float,
    *,
    threads: int = 1,
) -> IntensityMatrix:
    """Count the ``horizon`` cells before ``t`` and infer intensities at ``t``."""
    if np.any(log.time >= t):
        log = log.truncate(t)
    counts = count_matrices(log, pre.grain, pre.horizon, end=t)
    return infer_intensities(
        mu, pre, counts, users=log.users, categories=log.categories.ids, tick=t, threads=threads,
    )


def cif_continuous(
    log: BehavioralLog,
    u,
    c,
    mu: BaseIntensities | np.ndarray,
    network: LatentNetwork | np.ndarray,
    bank: dict,
    t: float,
    *,
    horizon_days: float | None = None,
) -> float:
    """Exact event-sum intensity of user ``u`` in category ``c`` at ``t``.

    Sums the kernel over every purchase strictly before ``t`` (optionally
    only those younger than ``horizon_days``).
    """
    rates = mu.rates if isinstance(mu, BaseIntensities) else np.asarray(mu, dtype=np.float64)
    B = network.matrix if isinstance(network, LatentNetwork) else np.asarray(network)
    ui = log.user_index(u) if isinstance(u, str) else u
    ci = c if isinstance(c, (int, np.integer)) else log.categories.index(c)
    value = float(rates[ci])
    if ui is None:
        return value
    sl = log.user_slice(int(ui))
    times, cats = log.time[sl], log.category[sl]
    m = times < t
    if horizon_days is not None:
        m &= times >= t - horizon_days
    for cp in np.unique(cats[m]):
        ages = t - times[m & (cats == cp)]
        entry = bank[(ci, int(cp))]
        p = entry.params if isinstance(entry, KernelEntry) else entry
        value += B[ci, cp] * float(np.sum(eval_kernel(p, ages)))
    return value


@dataclass
class Audience:
    category: str
    reach: int
    users: list[str]
    scores: np.ndarray
    indices: np.ndarray

    def to_csv(self, dest, with_category: bool = False) -> None:
        if not hasattr(dest, "write"):
            with open(dest, "w", newline="", encoding="utf-8") as fh:
                return self.to_csv(fh, with_category)
        w = csv.writer(dest, lineterminator="\n")
        head = ["rank", "user_id", "score"]
        w.writerow((["category_id"] if with_category else []) + head)
        self.write_rows(w, with_category)

    def write_rows(self, writer, with_category: bool = False) -> None:
        for r, (uid, s) in enumerate(zip(self.users, self.scores), start=1):
            row = [r, uid, repr(float(s))]
            writer.writerow(([self.category] if with_category else []) + row)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    idx = np.arange(len(scores))
    return np.lexsort((idx, -np.asarray(scores, dtype=np.float64)))


def rank_audience(
    intensities: IntensityMatrix,
    c,
    reach: int,
    candidates: np.ndarray | None = None,
) -> Audience:
    """Top-``reach`` users by intensity in category ``c``.

    ``candidates`` optionally restricts the ranking to a boolean user mask.
    """
    if reach < 1:
        raise ValueError("reach must be at least 1")
    col = intensities.column(c)
    pool = np.arange(len(col)) if candidates is None else np.flatnonzero(candidates)
    if reach > len(pool):
        warnings.warn(
            f"reach {reach} exceeds {len(pool)} users; returning the full ranking",
            RuntimeWarning,
            stacklevel=2,
        )
    order = pool[rank_order(col[pool])][:reach]
    cid = c if isinstance(c, str) else intensities.categories[int(c)]
    return Audience(
        category=cid,
        reach=int(reach),
        users=[intensities.users[i] for i in order],
        scores=col[order].copy(),
        indices=order,
    )
