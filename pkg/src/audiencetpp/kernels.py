"""Triggering kernels: evaluation, quantization and fitting.

Three families are supported. ``Exponential`` decays monotonically,
``Weibull`` is the Weibull density used as a delayed-influence kernel and
``MoW`` is a conic combination of Weibull densities. Weibull shapes below one
diverge at age zero; evaluation clamps such ages to a small positive floor.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

_logger = logging.getLogger(__name__)

DEFAULT_AGE_CLAMP = 1e-3


class FitDegenerate(ValueError):
    """Raised when samples cannot identify a Weibull fit.

    ``fallback`` carries a usable substitute kernel.
    """

    def __init__(self, message: str, fallback: Weibull):
        super().__init__(message)
        self.fallback = fallback


@dataclass(frozen=True)
class Exponential:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("exponential scale must be positive")


@dataclass(frozen=True)
class Weibull:
    scale: float
    shape: float

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("Weibull scale and shape must be positive")

    @property
    def mode(self) -> float:
        if self.shape <= 1:
            return 0.0
        return self.scale * ((self.shape - 1) / self.shape) ** (1 / self.shape)

    @property
    def mean(self) -> float:
        return self.scale * math.gamma(1 + 1 / self.shape)


@dataclass(frozen=True)
class MoW:
    """Mixture of Weibulls; ``components`` holds ``(scale, shape, weight)``."""

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        comps = tuple((float(l), float(k), float(b)) for l, k, b in self.components)
        if not comps:
            raise ValueError("MoW needs at least one component")
        for l, k, b in comps:
            if not (l > 0 and k > 0 and b >= 0):
                raise ValueError(f"invalid MoW component {(l, k, b)}")
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([b for _, _, b in self.components])

    def weibulls(self) -> list[Weibull]:
        return [Weibull(l, k) for l, k, _ in self.components]


KernelParams = Union[Exponential, Weibull, MoW]


# -- evaluation -----------------------------------------------------------------


def weibull_logpdf(x, scale: float, shape: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if shape == 1:
        # exponential form avoids 0 * log(0) when x / scale underflows
        return -math.log(scale) - x / scale
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logx = np.log(x / scale)
        out = math.log(shape / scale) + (shape - 1) * logx - np.exp(shape * logx)
    return out


def weibull_pdf(x, scale: float, shape: float) -> np.ndarray:
    return np.exp(weibull_logpdf(x, scale, shape))


def _weibull_kernel(age: np.ndarray, scale: float, shape: float, clamp: float) -> np.ndarray:
    if shape < 1:
        age = np.maximum(age, clamp)
    return weibull_pdf(age, scale, shape)


def eval_kernel(p: KernelParams, age, clamp: float = DEFAULT_AGE_CLAMP):
    """Kernel level at ``age`` days (scalar or array).

    For Weibull shapes below one, ages under ``clamp`` are evaluated at
    ``clamp`` so the level stays finite.
    """
    a = np.asarray(age, dtype=np.float64)
    if np.any(a < 0) or np.any(np.isnan(a)):
        raise ValueError("kernel age must be non-negative")
    if isinstance(p, Exponential):
        out = np.exp(-a / p.scale)
    elif isinstance(p, Weibull):
        out = _weibull_kernel(a, p.scale, p.shape, clamp)
    elif isinstance(p, MoW):
        out = np.zeros_like(a)
        for l, k, b in p.components:
            if b:
                out = out + b * _weibull_kernel(a, l, k, clamp)
    else:
        raise TypeError(f"unknown kernel {type(p).__name__}")
    return float(out) if np.ndim(out) == 0 else out


def tail_sup(p: KernelParams, age: float, clamp: float = DEFAULT_AGE_CLAMP) -> float:
    """Upper bound on the kernel over ``[age, inf)``.

    Exact for single-mode families; for a mixture it is the sum of the
    component bounds.
    """
    if isinstance(p, Exponential):
        return math.exp(-max(age, 0.0) / p.scale)
    if isinstance(p, Weibull):
        comps = [(p.scale, p.shape, 1.0)]
    elif isinstance(p, MoW):
        comps = p.components
    else:
        raise TypeError(f"unknown kernel {type(p).__name__}")
    total = 0.0
    for l, k, b in comps:
        if not b:
            continue
        peak = Weibull(l, k).mode if k > 1 else (clamp if k < 1 else 0.0)
        total += b * float(_weibull_kernel(np.float64(max(age, peak)), l, k, clamp))
    return total


def weibull_components(p: KernelParams) -> list[tuple[float, float, float]]:
    """Express any kernel as ``sum coef * weibull_pdf(age; scale, shape)``.

    ``exp(-a/w)`` equals ``w`` times the shape-one Weibull density.
    """
    if isinstance(p, Exponential):
        return [(p.scale, 1.0, p.scale)]
    if isinstance(p, Weibull):
        return [(p.scale, p.shape, 1.0)]
    if isinstance(p, MoW):
        return [c for c in p.components if c[2] > 0]
    raise TypeError(f"unknown kernel {type(p).__name__}")


@dataclass(frozen=True)
class QuantizedKernel:
    levels: np.ndarray
    grain: float
    source: KernelParams


def quantize_kernel(p: KernelParams, grain: float, horizon: int) -> QuantizedKernel:
    """Piecewise-constant kernel: level ``s`` equals the kernel at age ``s*grain``."""
    if grain <= 0:
        raise ValueError("grain must be positive")
    if horizon < 1:
        raise ValueError("horizon must be at least one cell")
    ages = np.arange(horizon, dtype=np.float64) * grain
    levels = np.asarray(eval_kernel(p, ages, clamp=grain * DEFAULT_AGE_CLAMP), dtype=np.float64)
    levels.setflags(write=False)
    return QuantizedKernel(levels, float(grain), p)


# -- Weibull maximum likelihood ----------------------------------------------------


def _lse(z: np.ndarray) -> float:
    m = float(z.max())
    if not np.isfinite(m):
        return m
    return m + math.log(float(np.exp(z - m).sum()))


def _lse_cols(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=0)
    return m + np.log(np.exp(z - m).sum(axis=0))


def _profile_shape(logx: np.ndarray, logw: np.ndarray, k0: float, tol: float, max_iter: int):
    """Root of the profiled score in the shape parameter.

    g(k) = 1/k + E_w[log x] - E_{w x^k}[log x] is strictly decreasing, so a
    Newton step guarded by a bisection bracket always converges.
    """
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean_log = float(w @ logx)

    def score(k):
        z = k * logx + logw
        q = np.exp(z - z.max())
        q /= q.sum()
        m1 = float(q @ logx)
        var = float(q @ (logx - m1) ** 2)
        return 1.0 / k + mean_log - m1, -1.0 / k**2 - var

    lo, hi = 0.0, None
    k = k0
    for it in range(1, max_iter + 1):
        g, dg = score(k)
        if g > 0:
            lo = max(lo, k)
        else:
            hi = k if hi is None else min(hi, k)
        step = k - g / dg
        if hi is None:
            step = min(step, 4 * k) if step > k else step
            if step <= lo:
                step = 2 * k
        elif not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if abs(step - k) <= tol * k:
            return step, it
        k = step
    return k, max_iter


def _weibull_mle(x: np.ndarray, w: np.ndarray | None, k0: float | None = None,
                 tol: float = 1e-8, max_iter: int = 200,
                 logx: np.ndarray | None = None) -> tuple[Weibull, int]:
    if logx is None:
        logx = np.log(x)
    if w is None:
        logw = np.zeros_like(logx)
    else:
        with np.errstate(divide="ignore"):
            logw = np.log(w)
    if k0 is None:
        wn = np.exp(logw - logw.max())
        wn /= wn.sum()
        m = wn @ logx
        sd = math.sqrt(max(float(wn @ (logx - m) ** 2), 1e-300))
        k0 = min(max(math.pi / (math.sqrt(6) * sd), 1e-3), 1e4)
    k, iters = _profile_shape(logx, logw, k0, tol, max_iter)
    log_scale = (_lse(k * logx + logw) - _lse(logw)) / k
    return Weibull(float(math.exp(log_scale)), float(k)), iters


def fit_weibull(samples, weights=None, *, fallback_scale: float | None = None) -> Weibull:
    """Maximum-likelihood Weibull fit, optionally with per-sample weights.

    The scale is profiled out and the shape solved by safeguarded Newton
    iteration until the relative change drops below 1e-8 (200 steps at most).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("Weibull samples must be positive and finite")
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape != x.shape or np.any(w < 0):
            raise ValueError("weights must be non-negative and match samples")
        keep = w > 0
        x, w = x[keep], w[keep]
    if len(x) < 2 or np.ptp(x) <= 1e-12 * float(np.max(x)):
        if len(x):
            guess = float(np.mean(x))
        else:
            guess = fallback_scale if fallback_scale else 1.0
        raise FitDegenerate(
            f"cannot fit Weibull to {len(x)} sample(s) without spread",
            Weibull(guess, 1.0),
        )
    return _weibull_mle(x, w)[0]


def weibull_loglik(p: Weibull, samples, weights=None) -> float:
    ll = weibull_logpdf(samples, p.scale, p.shape)
    if weights is None:
        return float(np.sum(ll))
    return float(np.dot(weights, ll))


# -- mixture of Weibulls -------------------------------------------------------------


def mow_loglik(p: MoW, samples) -> float:
    """Log-likelihood of ``samples`` under a mixture with weights summing to one."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if np.any(x <= 0):
        raise ValueError("samples must be positive")
    w = p.weights
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture weights sum to {w.sum()}, expected 1")
    return float(np.sum(_mixture_logdens(x, p.components)))


def _mixture_logdens(x: np.ndarray, comps) -> np.ndarray:
    rows = []
    for l, k, b in comps:
        if b > 0:
            rows.append(math.log(b) + weibull_logpdf(x, l, k))
    return _lse_cols(np.vstack(rows))


class MoWFit(NamedTuple):
    params: MoW
    loglik: float
    trace: list[float]
    pruned_at: list[int]


_LOG_FLOOR = -1e300


def _em_run(x: np.ndarray, comps: list[list[float]], tol: float, max_iter: int,
            min_mass: float) -> MoWFit:
    n = len(x)
    logx = np.log(x)
    trace: list[float] = []
    pruned: list[int] = []

    def logpdf(scale, shape):
        # floored so zero responsibilities never meet an infinite log density
        z = logx - math.log(scale)
        with np.errstate(over="ignore"):
            d = math.log(shape / scale) + (shape - 1) * z - np.exp(shape * z)
        return np.maximum(d, _LOG_FLOOR)

    # per-component log densities, reused across E and M steps
    dens = [logpdf(l, k) for l, k, _ in comps]
    lj = np.vstack([math.log(b) + d for d, (_, _, b) in zip(dens, comps)])
    lse = _lse_cols(lj)
    ll = float(np.sum(lse))
    trace.append(ll)
    for it in range(1, max_iter + 1):
        resp = np.exp(lj - lse)
        mass = resp.sum(axis=1) / n
        new, new_dens = [], []
        for i, (l, k, _) in enumerate(comps):
            if mass[i] < min_mass:
                continue
            r = resp[i]
            d = dens[i]
            try:
                cand, _ = _weibull_mle(x, r, k0=k, logx=logx)
            except (FloatingPointError, ValueError, OverflowError):
                cand = None
            # generalized EM: accept the refit only if it does not lower Q
            if cand is not None and np.isfinite(cand.scale) and np.isfinite(cand.shape):
                cd = logpdf(cand.scale, cand.shape)
                if float(r @ cd) >= float(r @ d):
                    l, k, d = cand.scale, cand.shape, cd
            new.append([l, k, float(mass[i])])
            new_dens.append(d)
        if len(new) < len(comps):
            warnings.warn(
                f"MoW component collapsed; K reduced to {len(new)}", RuntimeWarning, stacklevel=3
            )
            pruned.append(it)
            total = sum(c[2] for c in new)
            for c in new:
                c[2] /= total
        comps, dens = new, new_dens
        lj = np.vstack([math.log(b) + d for d, (_, _, b) in zip(dens, comps)])
        lse = _lse_cols(lj)
        new_ll = float(np.sum(lse))
        trace.append(new_ll)
        gain = new_ll - ll
        ll = new_ll
        if pruned and pruned[-1] == it:
            continue
        if gain < tol:
            break
    params = MoW(tuple((l, k, b) for l, k, b in comps))
    return MoWFit(params, ll, trace, pruned)


def fit_mow(
    samples,
    K: int = 5,
    seed: int = 0,
    *,
    restarts: int = 3,
    tol: float = 1e-8,
    max_iter: int = 500,
    min_mass: float = 1e-6,
) -> MoWFit:
    """Fit a K-component Weibull mixture by expectation-maximization.

    Components start at shape 4 with scales at the ``i/(K+1)`` sample
    quantiles and equal weights. Restarts after the first jitter the scales
    by up to 5%. A further start places every component on the single-Weibull
    MLE, so the result never falls below the one-component fit. The run with
    the highest final log-likelihood is returned.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("mixture samples must be positive and finite")
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(x) < K:
        raise ValueError(f"{len(x)} samples cannot support K={K}; reduce K")
    rng = np.random.default_rng(seed)
    qs = np.quantile(x, np.arange(1, K + 1) / (K + 1))
    starts = []
    for r in range(max(restarts, 1)):
        jitter = np.ones(K) if r == 0 else 1 + rng.uniform(-0.05, 0.05, K)
        starts.append([[float(q * j), 4.0, 1.0 / K] for q, j in zip(qs, jitter)])
    try:
        single = fit_weibull(x)
        starts.append([[single.scale, single.shape, 1.0 / K] for _ in range(K)])
    except FitDegenerate:
        pass

    best = None
    for comps in starts:
        res = _em_run(x, comps, tol, max_iter, min_mass)
        if best is None or res.loglik > best.loglik:
            best = res
    return best


# -- serialization --------------------------------------------------------------------


def kernel_to_dict(p: KernelParams) -> dict:
    if isinstance(p, Exponential):
        return {"kind": "exponential", "params": {"scale": p.scale}}
    if isinstance(p, Weibull):
        return {"kind": "weibull", "params": {"scale": p.scale, "shape": p.shape}}
    if isinstance(p, MoW):
        return {
            "kind": "mow",
            "params": {
                "components": [
                    {"scale": l, "shape": k, "weight": b} for l, k, b in p.components
                ]
            },
        }
    raise TypeError(f"unknown kernel {type(p).__name__}")


def kernel_from_dict(d: dict) -> KernelParams:
    kind = d["kind"]
    params = d["params"]
    if kind == "exponential":
        return Exponential(float(params["scale"]))
    if kind == "weibull":
        return Weibull(float(params["scale"]), float(params["shape"]))
    if kind == "mow":
        return MoW(tuple(
            (float(c["scale"]), float(c["shape"]), float(c["weight"]))
            for c in params["components"]
        ))
    raise ValueError(f"unknown kernel kind {kind!r}")


@dataclass
class KernelEntry:
    """A bank entry: kernel for target ``c`` excited by source ``c'``."""

    params: KernelParams
    provenance: str = "fitted"
    n_samples: int = 0
    loglik: float | None = None
    extra: dict = field(default_factory=dict)


KernelBank = dict  # (target, source) -> KernelEntry


def bank_to_json(bank: dict, categories=None) -> list[dict]:
    out = []
    for (c, cp) in sorted(bank):
        e = bank[(c, cp)]
        if isinstance(e, KernelEntry):
            p, prov, n = e.params, e.provenance, e.n_samples
        else:
            p, prov, n = e, "given", 0
        pair = [c, cp] if categories is None else [categories[c], categories[cp]]
        out.append({"pair": pair, **kernel_to_dict(p), "provenance": prov, "n_samples": n})
    return out


def bank_from_json(items: list[dict], categories=None) -> dict:
    bank = {}
    for d in items:
        c, cp = d["pair"]
        if categories is not None:
            c, cp = categories.index(c), categories.index(cp)
        bank[(int(c), int(cp))] = KernelEntry(
            kernel_from_dict(d), d.get("provenance", "given"), int(d.get("n_samples", 0))
        )
    return bank
