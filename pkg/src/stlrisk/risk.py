"""Monetary risk measures on empirical samples.

All measures act on a finite sample interpreted as an equally weighted
empirical distribution of a loss-like quantity (larger = worse).  The
distributionally robust value-at-risk has no sampling form here; it is
exposed analytically through :func:`drvar_violation_prob`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RiskError",
    "MEASURES",
    "RiskSpec",
    "eval_risk",
    "drvar_violation_prob",
]


class RiskError(ValueError):
    """Invalid risk specification or sample."""


MEASURES = (
    "expectation",
    "worst_case",
    "mean_variance",
    "var",
    "cvar",
    "evar",
    "drvar",
)

_LEVEL_MEASURES = ("var", "cvar", "evar", "drvar")


@dataclass(frozen=True)
class RiskSpec:
    """Risk-measure selector.

    ``level`` is the tail mass delta for var/cvar/evar/drvar (in (0, 1];
    drvar requires (0, 1)).  ``weight`` is the variance weight for
    mean_variance (>= 0).
    """

    measure: str
    level: float | None = None
    weight: float | None = None

    def __post_init__(self) -> None:
        if self.measure not in MEASURES:
            raise RiskError(f"unknown risk measure {self.measure!r}")
        if self.measure in _LEVEL_MEASURES:
            if self.level is None:
                raise RiskError(f"{self.measure} requires a level")
            lv = float(self.level)
            hi_ok = lv < 1.0 if self.measure == "drvar" else lv <= 1.0
            if not (0.0 < lv and hi_ok) or not math.isfinite(lv):
                raise RiskError(f"{self.measure} level must be in (0,1{')' if self.measure == 'drvar' else ']'}, got {lv}")
            object.__setattr__(self, "level", lv)
        elif self.level is not None:
            raise RiskError(f"{self.measure} takes no level")
        if self.measure == "mean_variance":
            if self.weight is None:
                raise RiskError("mean_variance requires a weight")
            w = float(self.weight)
            if not (w >= 0.0 and math.isfinite(w)):
                raise RiskError(f"mean_variance weight must be >= 0, got {w}")
            object.__setattr__(self, "weight", w)
        elif self.weight is not None:
            raise RiskError(f"{self.measure} takes no weight")


def _as_sample(values) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise RiskError("sample must be a non-empty 1-D array")
    if not np.all(np.isfinite(x)):
        raise RiskError("sample contains non-finite values")
    return x


def eval_risk(spec: RiskSpec, sample) -> float:
    """Evaluate a risk measure on an empirical sample."""
    x = _as_sample(sample)
    if spec.measure == "expectation":
        return float(np.mean(x))
    if spec.measure == "worst_case":
        return float(np.max(x))
    if spec.measure == "mean_variance":
        return float(np.mean(x) + spec.weight * np.var(x))
    xs = np.sort(x)
    if spec.measure == "var":
        return _value_at_risk(xs, spec.level)
    if spec.measure == "cvar":
        return _cvar(xs, spec.level)
    if spec.measure == "evar":
        return _evar(xs, spec.level)
    raise RiskError("drvar has no sampling form; use drvar_violation_prob")


def _value_at_risk(xs: np.ndarray, delta: float) -> float:
    # Smallest threshold whose empirical CDF reaches 1 - delta: the
    # ceil((1-delta) M)-th order statistic.  The 1e-9 slack keeps float
    # products like (1 - 0.7) * 10 = 3.0000000000000004 on the correct
    # side of the ceiling.
    m = xs.size
    k = math.ceil((1.0 - delta) * m - 1e-9)
    if k <= 0:
        return -math.inf
    return float(xs[min(k, m) - 1])


def _cvar(xs: np.ndarray, delta: float) -> float:
    # min over t of t + E[(X - t)+] / delta; the objective is convex
    # piecewise linear, so scanning the sample points is exact.
    m = xs.size
    tail = np.cumsum(xs[::-1])[::-1]  # tail[i] = sum(xs[i:])
    counts = m - np.arange(m)
    objective = xs + (tail - xs * counts) / (m * delta)
    return float(np.min(objective))


_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _evar(xs: np.ndarray, delta: float) -> float:
    # inf over z > 0 of log(mgf(z) / delta) / z.  The objective is
    # quasiconvex in z; golden-section search on a bracket chosen so the
    # shifted exponents stay within budget.  Values are computed on the
    # max-shifted sample (no overflow for any z), and the result is
    # clamped at the sample max: when delta <= (mass at max) the true
    # infimum equals the max and is approached only as z -> infinity.
    top = float(xs[-1])
    spread = top - float(xs[0])
    if spread <= 0.0:
        return top
    shifted = xs - top
    log_delta = math.log(delta)

    def objective(z: float) -> float:
        return top + (math.log(float(np.mean(np.exp(z * shifted)))) - log_delta) / z

    lo, hi = 1e-8, max(500.0 / spread, 2e-8)
    c = hi - _INV_GOLDEN * (hi - lo)
    d = lo + _INV_GOLDEN * (hi - lo)
    fc, fd = objective(c), objective(d)
    best = min(objective(lo), objective(hi), fc, fd)
    for _ in range(300):
        if hi - lo <= 1e-10:
            break
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_GOLDEN * (hi - lo)
            fc = objective(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_GOLDEN * (hi - lo)
            fd = objective(d)
        best = min(best, fc, fd)
    return min(best, top)


def drvar_violation_prob(mean: float, variance: float) -> float:
    """Worst-case probability of a nonnegative outcome over all
    distributions with the given mean and variance (one-sided Chebyshev).
    """
    mean = float(mean)
    variance = float(variance)
    if not (variance >= 0.0 and math.isfinite(variance) and math.isfinite(mean)):
        raise RiskError("mean must be finite and variance finite and >= 0")
    if mean >= 0.0:
        return 1.0
    return variance / (variance + mean * mean)
