"""Stochastic linear system reformulation and predicate tightening.

A linear time-varying system X_{t+1} = A_t X_t + B_t u_t + W_t with
independent disturbances splits into a deterministic mean system plus a
zero-mean deviation whose covariance grows by the dynamics alone.  A
risk constraint on an affine predicate then becomes a deterministic
margin on the mean trajectory: the margin scales the predicate's
standard deviation by sqrt((1-delta)/delta), which is exactly the
boundary of the worst-case (distribution-free) violation probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formulas import (
    AffinePredicate,
    And,
    Atom,
    FalseLiteral,
    Formula,
    FormulaError,
    NegAtom,
    Or,
    Release,
    TrueLiteral,
    Until,
    is_nnf,
)
from .risk import RiskError

__all__ = [
    "SystemError_",
    "LtvSystem",
    "transition_matrix",
    "stacked_dynamics",
    "mean_rollout",
    "prediction_covariance",
    "prediction_covariances",
    "TightenedPredicate",
    "PredicateSchedule",
    "tighten_predicate",
    "tighten_formula",
    "describe_tightened",
]


class SystemError_(ValueError):
    """Inconsistent system matrices or dimensions."""


def _as_matrix_list(value, count: int, shape: tuple[int, int], what: str) -> tuple:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (count,) + arr.shape)
    if arr.ndim != 3 or arr.shape[0] != count or arr.shape[1:] != shape:
        raise SystemError_(f"{what} must have shape {count} x {shape[0]} x {shape[1]}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SystemError_(f"{what} contains non-finite entries")
    return tuple(np.array(m) for m in arr)


@dataclass(frozen=True)
class LtvSystem:
    """Linear time-varying stochastic system over a fixed step horizon.

    A, B, w_mean, w_cov each hold one entry per step 0..horizon-1; a
    single matrix broadcasts across the horizon.  Disturbances are
    independent across steps with the given per-step mean/covariance.
    """

    A: tuple
    B: tuple
    w_mean: tuple
    w_cov: tuple
    horizon: int

    def __init__(self, A, B, w_mean=None, w_cov=None, horizon: int = 1):
        horizon = int(horizon)
        if horizon < 1:
            raise SystemError_("horizon must be >= 1")
        A0 = np.asarray(A, dtype=float)
        n = A0.shape[-1]
        if n == 0 or A0.shape[-2] != n:
            raise SystemError_("A must be square")
        B0 = np.asarray(B, dtype=float)
        m = B0.shape[-1]
        object.__setattr__(self, "A", _as_matrix_list(A, horizon, (n, n), "A"))
        object.__setattr__(self, "B", _as_matrix_list(B, horizon, (n, m), "B"))
        if w_mean is None:
            w_mean = np.zeros(n)
        if w_cov is None:
            w_cov = np.zeros((n, n))
        wm = np.asarray(w_mean, dtype=float)
        if wm.ndim == 1 and wm.shape == (n,):
            wm = np.broadcast_to(wm, (horizon, n))
        if wm.shape != (horizon, n) or not np.all(np.isfinite(wm)):
            raise SystemError_(f"w_mean must have shape {horizon} x {n}")
        object.__setattr__(self, "w_mean", tuple(np.array(v) for v in wm))
        covs = _as_matrix_list(w_cov, horizon, (n, n), "w_cov")
        checked = []
        for k, s in enumerate(covs):
            s = (s + s.T) / 2.0
            if np.min(np.linalg.eigvalsh(s)) < -1e-10:
                raise SystemError_(f"w_cov[{k}] is not positive semidefinite")
            checked.append(s)
        object.__setattr__(self, "w_cov", tuple(checked))
        object.__setattr__(self, "horizon", horizon)

    @property
    def n(self) -> int:
        return self.A[0].shape[0]

    @property
    def m(self) -> int:
        return self.B[0].shape[1]


def _check_step(sys: LtvSystem, t: int, hi: int, what: str = "step") -> None:
    if not (0 <= t <= hi):
        raise SystemError_(f"{what} {t} outside [0,{hi}]")


def transition_matrix(sys: LtvSystem, tau: int, t: int) -> np.ndarray:
    """State transition matrix from step t to step tau (identity at tau == t)."""
    _check_step(sys, t, sys.horizon)
    if not (t <= tau <= sys.horizon):
        raise SystemError_(f"need t <= tau <= horizon, got tau={tau}, t={t}")
    phi = np.eye(sys.n)
    for k in range(t, tau):
        phi = sys.A[k] @ phi
    return phi


def stacked_dynamics(sys: LtvSystem, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Express X_t = G x_0 + H [u_0;...;u_{t-1}] + L [W_0;...;W_{t-1}].

    G is n x n, H is n x (t m), L is n x (t n); at t = 0 the stacked
    blocks are empty.
    """
    _check_step(sys, t, sys.horizon)
    n, m = sys.n, sys.m
    # phis[k] = Phi(t, k) for k = 0..t
    phis = [np.eye(n)]
    for k in range(t, 0, -1):
        phis.append(phis[-1] @ sys.A[k - 1])
    phis.reverse()
    G = phis[0]
    H = np.zeros((n, t * m))
    L = np.zeros((n, t * n))
    for k in range(t):
        H[:, k * m : (k + 1) * m] = phis[k + 1] @ sys.B[k]
        L[:, k * n : (k + 1) * n] = phis[k + 1]
    return G, H, L


def mean_rollout(sys: LtvSystem, x0, controls) -> np.ndarray:
    """Mean trajectory under a control sequence, shape (T+1, n)."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != sys.n:
        raise SystemError_(f"x0 must have dimension {sys.n}")
    u = np.asarray(controls, dtype=float)
    if u.size == 0:
        u = u.reshape(0, sys.m)
    if u.ndim != 2 or u.shape[1] != sys.m:
        raise SystemError_(f"controls must have shape T x {sys.m}")
    if u.shape[0] > sys.horizon:
        raise SystemError_(f"control sequence longer than horizon {sys.horizon}")
    out = np.empty((u.shape[0] + 1, sys.n))
    out[0] = x0
    for k in range(u.shape[0]):
        out[k + 1] = sys.A[k] @ out[k] + sys.B[k] @ u[k] + sys.w_mean[k]
    return out


def prediction_covariances(sys: LtvSystem, upto: int | None = None) -> list[np.ndarray]:
    """Covariance of X_t for t = 0..upto, given a deterministic x_0.

    Uses the recursion Cov_{t+1} = A_t Cov_t A_t' + Sigma_W_t, which
    equals the stacked form L blockdiag(Sigma_W) L'.
    """
    if upto is None:
        upto = sys.horizon
    _check_step(sys, upto, sys.horizon, "upto")
    covs = [np.zeros((sys.n, sys.n))]
    for k in range(upto):
        s = sys.A[k] @ covs[-1] @ sys.A[k].T + sys.w_cov[k]
        covs.append((s + s.T) / 2.0)
    return covs


def prediction_covariance(sys: LtvSystem, t: int) -> np.ndarray:
    _check_step(sys, t, sys.horizon)
    return prediction_covariances(sys, t)[t]


def _tighten_factor(delta: float) -> float:
    delta = float(delta)
    if not (0.0 < delta < 1.0):
        raise RiskError(f"tightening risk bound must be in (0,1), got {delta}")
    return math.sqrt((1.0 - delta) / delta)


def _margin(pred: AffinePredicate, cov: np.ndarray, delta: float) -> float:
    var = float(pred.a @ cov @ pred.a)
    return _tighten_factor(delta) * math.sqrt(max(var, 0.0))


@dataclass(frozen=True, eq=False)
class TightenedPredicate:
    """One atom's deterministic surrogate at a fixed step.

    sign '-' (an atom that must hold): require a @ xbar + b - margin >= 0.
    sign '+' (a negated atom): require a @ xbar + b + margin <= 0.
    Both are exposed as a single >=-0 predicate on the mean state via
    :meth:`mean_pred`.
    """

    base: AffinePredicate
    sign: str
    time: int
    delta: float
    margin: float

    def __post_init__(self) -> None:
        if self.sign not in ("-", "+"):
            raise RiskError(f"sign must be '-' or '+', got {self.sign!r}")

    def mean_pred(self) -> AffinePredicate:
        if self.sign == "-":
            return AffinePredicate(self.base.a, self.base.b - self.margin, self.base.label)
        return AffinePredicate(-self.base.a, -self.base.b - self.margin, self.base.label)

    def holds(self, xbar) -> bool:
        return self.mean_pred().value(xbar) >= 0.0


def tighten_predicate(
    sys: LtvSystem, pred: AffinePredicate, sign: str, t: int, delta: float
) -> TightenedPredicate:
    """Margin-tightened surrogate of one atom at step t."""
    if pred.dim != sys.n:
        raise SystemError_(f"predicate dimension {pred.dim} != system dimension {sys.n}")
    cov = prediction_covariance(sys, t)
    return TightenedPredicate(pred, sign, t, float(delta), _margin(pred, cov, delta))


@dataclass(frozen=True, eq=False)
class PredicateSchedule:
    """Time-indexed family of tightened predicates for one atom.

    margins[t] applies at absolute step t; evaluation dispatches on the
    step, so one schedule atom serves every position a temporal operator
    visits.  Implements the same value_at/coeffs_at interface as
    AffinePredicate (always as a >=-0 constraint on the mean state).
    """

    base: AffinePredicate
    sign: str
    delta: float
    margins: np.ndarray

    def __post_init__(self) -> None:
        if self.sign not in ("-", "+"):
            raise RiskError(f"sign must be '-' or '+', got {self.sign!r}")
        m = np.asarray(self.margins, dtype=float)
        if m.ndim != 1 or m.size == 0 or not np.all(np.isfinite(m)) or np.any(m < 0):
            raise RiskError("margins must be a 1-D array of finite nonnegative reals")
        object.__setattr__(self, "margins", m)

    @property
    def label(self) -> str | None:
        return self.base.label

    def margin_at(self, t: int) -> float:
        if not (0 <= t < self.margins.size):
            raise FormulaError(f"step {t} outside tightening horizon [0,{self.margins.size - 1}]")
        return float(self.margins[t])

    def coeffs_at(self, t: int) -> tuple[np.ndarray, float]:
        mg = self.margin_at(t)
        if self.sign == "-":
            return self.base.a, self.base.b - mg
        return -self.base.a, -self.base.b - mg

    def value_at(self, x, t: int) -> float:
        a, b = self.coeffs_at(t)
        return float(a @ np.asarray(x, dtype=float) + b)

    def at(self, t: int) -> TightenedPredicate:
        return TightenedPredicate(self.base, self.sign, t, self.delta, self.margin_at(t))


def _delta_lookup(delta):
    if callable(delta):
        return delta
    if isinstance(delta, dict):
        def lookup(pred):
            try:
                return delta[pred]
            except KeyError:
                raise RiskError(f"no risk bound for predicate {pred!r}") from None
        return lookup
    bound = float(delta)
    return lambda pred: bound


def tighten_formula(
    f: Formula,
    sys: LtvSystem,
    delta,
    saturation_step: int | None = None,
) -> Formula:
    """Replace every atom with its margin-tightened schedule.

    ``delta`` is a number, a dict keyed by predicate object, or a
    callable predicate -> bound.  Negated atoms absorb their negation
    into the schedule sign, so the result contains positive atoms only
    and keeps the Boolean/temporal structure unchanged.  Margins for
    steps after ``saturation_step`` are clamped at their value there.
    """
    if not is_nnf(f):
        raise FormulaError("tighten_formula requires an NNF formula")
    lookup = _delta_lookup(delta)
    covs = prediction_covariances(sys)
    if saturation_step is not None and not (0 <= saturation_step <= sys.horizon):
        raise SystemError_(f"saturation_step {saturation_step} outside [0,{sys.horizon}]")

    schedules: dict[tuple[int, str], PredicateSchedule] = {}

    def schedule(pred: AffinePredicate, sign: str) -> PredicateSchedule:
        key = (id(pred), sign)
        sched = schedules.get(key)
        if sched is None:
            if pred.dim != sys.n:
                raise SystemError_(
                    f"predicate dimension {pred.dim} != system dimension {sys.n}"
                )
            d = float(lookup(pred))
            margins = np.array([_margin(pred, cov, d) for cov in covs])
            if saturation_step is not None:
                margins[saturation_step:] = margins[saturation_step]
            sched = PredicateSchedule(pred, sign, d, margins)
            schedules[key] = sched
        return sched

    def rec(g: Formula) -> Formula:
        if isinstance(g, (TrueLiteral, FalseLiteral)):
            return g
        if isinstance(g, Atom):
            return Atom(schedule(g.pred, "-"))
        if isinstance(g, NegAtom):
            return Atom(schedule(g.pred, "+"))
        if isinstance(g, And):
            return And(tuple(rec(c) for c in g.children))
        if isinstance(g, Or):
            return Or(tuple(rec(c) for c in g.children))
        if isinstance(g, Until):
            return Until(g.start, g.end, rec(g.left), rec(g.right))
        if isinstance(g, Release):
            return Release(g.start, g.end, rec(g.left), rec(g.right))
        raise FormulaError(f"unknown formula node {type(g).__name__}")

    return rec(f)


def describe_tightened(f: Formula) -> str:
    """Compact structural display for tightened formulas.

    Schedule atoms print as label~sign; plain formulas fall back to
    their canonical pieces.
    """
    from .formulas import format_formula

    def rec(g: Formula) -> str:
        if isinstance(g, Atom) and isinstance(g.pred, PredicateSchedule):
            name = g.pred.label or "p"
            return f"{name}~{g.pred.sign}"
        if isinstance(g, And):
            return "(" + " and ".join(rec(c) for c in g.children) + ")"
        if isinstance(g, Or):
            return "(" + " or ".join(rec(c) for c in g.children) + ")"
        if isinstance(g, Until):
            if isinstance(g.left, TrueLiteral):
                return f"F[{g.start},{g.end}] {rec(g.right)}"
            return f"({rec(g.left)} U[{g.start},{g.end}] {rec(g.right)})"
        if isinstance(g, Release):
            if isinstance(g.left, FalseLiteral):
                return f"G[{g.start},{g.end}] {rec(g.right)}"
            return f"({rec(g.left)} R[{g.start},{g.end}] {rec(g.right)})"
        return format_formula(g)

    return rec(f)
