"""Risk semantics of STL formulas over trajectory ensembles.

An ensemble carries M sampled runs of a stochastic process.  The risk
value of a formula is built bottom-up: atoms apply a risk measure to
the sampled predicate violation margin, Boolean and temporal operators
combine child risk values with min/max (never sample-wise).  Lower risk
is better; a formula is accepted at threshold delta when its risk value
is <= delta.

``decompose`` rewrites a formula-level risk constraint into a
Boolean combination of single-atom risk constraints (exact, because
thresholding commutes with min/max).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formulas import (
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
    horizon,
    is_nnf,
)
from .risk import RiskError, RiskSpec, eval_risk

__all__ = [
    "Ensemble",
    "stl_risk",
    "RiskLeaf",
    "RiskAnd",
    "RiskOr",
    "ALWAYS_TRUE",
    "ALWAYS_FALSE",
    "decompose",
    "evaluate_tree",
    "tree_leaves",
]


@dataclass(frozen=True)
class Ensemble:
    """M sampled runs: states[m, i] is member m's state at step start + i."""

    states: np.ndarray
    start: int = 0

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 2:
            states = states[:, :, None]
        if states.ndim != 3 or states.shape[0] == 0 or states.shape[1] == 0:
            raise FormulaError("ensemble states must form a non-empty (M, N+1, n) array")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "start", int(self.start))

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def end(self) -> int:
        return self.start + self.steps

    def state_sample(self, t: int) -> np.ndarray:
        """Cross-section of all members at absolute step t, shape (M, n)."""
        if t < self.start or t > self.end:
            raise FormulaError(f"step {t} outside ensemble [{self.start},{self.end}]")
        return self.states[:, t - self.start, :]


def _atom_sample(ens: Ensemble, t: int, pred) -> np.ndarray:
    xs = ens.state_sample(t)
    a_b = getattr(pred, "coeffs_at", None)
    if a_b is not None:
        a, b = pred.coeffs_at(t)
        return xs @ a + b
    return np.array([pred.value_at(x, t) for x in xs])


def stl_risk(ens: Ensemble, t: int, f: Formula, spec: RiskSpec) -> float:
    """Risk value of f on the ensemble at step t.

    Requires an NNF formula, an ensemble window covering the formula
    horizon, and a sampling risk measure (drvar is analytic-only).
    """
    if spec.measure == "drvar":
        raise RiskError("stl_risk needs a sampling measure; drvar is analytic-only")
    if not is_nnf(f):
        raise FormulaError("stl_risk requires an NNF formula")
    if t < ens.start or t + horizon(f) > ens.end:
        raise FormulaError(
            f"formula needs steps [{t},{t + horizon(f)}] but ensemble covers "
            f"[{ens.start},{ens.end}]"
        )
    memo: dict[tuple[int, int], float] = {}

    def rec(g: Formula, tau: int) -> float:
        key = (id(g), tau)
        if key in memo:
            return memo[key]
        if isinstance(g, TrueLiteral):
            val = -math.inf
        elif isinstance(g, FalseLiteral):
            val = math.inf
        elif isinstance(g, Atom):
            val = eval_risk(spec, -_atom_sample(ens, tau, g.pred))
        elif isinstance(g, NegAtom):
            val = eval_risk(spec, _atom_sample(ens, tau, g.pred))
        elif isinstance(g, And):
            val = max(rec(c, tau) for c in g.children)
        elif isinstance(g, Or):
            val = min(rec(c, tau) for c in g.children)
        elif isinstance(g, Until):
            val = min(
                max(rec(g.right, tau + i), max(rec(g.left, tau + j) for j in range(i + 1)))
                for i in range(g.start, g.end + 1)
            )
        elif isinstance(g, Release):
            val = max(
                min(rec(g.right, tau + i), min(rec(g.left, tau + j) for j in range(i + 1)))
                for i in range(g.start, g.end + 1)
            )
        else:
            raise FormulaError(f"unknown formula node {type(g).__name__}")
        memo[key] = val
        return val

    return rec(f, t)


# ---------------------------------------------------------------------------
# Decomposition of a formula risk constraint into atomic risk constraints


class RiskTree:
    __slots__ = ()


@dataclass(frozen=True)
class _RiskTrue(RiskTree):
    def __repr__(self) -> str:
        return "ALWAYS_TRUE"


@dataclass(frozen=True)
class _RiskFalse(RiskTree):
    def __repr__(self) -> str:
        return "ALWAYS_FALSE"


ALWAYS_TRUE = _RiskTrue()
ALWAYS_FALSE = _RiskFalse()


@dataclass(frozen=True, eq=False)
class RiskLeaf(RiskTree):
    """Single-atom risk constraint.

    sign '-' constrains the risk of -alpha(X_time) (an Atom that must
    hold); sign '+' constrains the risk of +alpha(X_time) (a NegAtom:
    the predicate must fail).  The constraint accepts when the measured
    risk is <= delta.
    """

    pred: object
    sign: str
    time: int
    delta: float

    def __post_init__(self) -> None:
        if self.sign not in ("-", "+"):
            raise RiskError(f"leaf sign must be '-' or '+', got {self.sign!r}")
        if not (0.0 < float(self.delta)):
            raise RiskError(f"leaf delta must be positive, got {self.delta}")


@dataclass(frozen=True, eq=False)
class RiskAnd(RiskTree):
    children: tuple[RiskTree, ...]


@dataclass(frozen=True, eq=False)
class RiskOr(RiskTree):
    children: tuple[RiskTree, ...]


def _make_and(children) -> RiskTree:
    kept = []
    for c in children:
        if c is ALWAYS_FALSE:
            return ALWAYS_FALSE
        if c is not ALWAYS_TRUE:
            kept.append(c)
    if not kept:
        return ALWAYS_TRUE
    if len(kept) == 1:
        return kept[0]
    return RiskAnd(tuple(kept))


def _make_or(children) -> RiskTree:
    kept = []
    for c in children:
        if c is ALWAYS_TRUE:
            return ALWAYS_TRUE
        if c is not ALWAYS_FALSE:
            kept.append(c)
    if not kept:
        return ALWAYS_FALSE
    if len(kept) == 1:
        return kept[0]
    return RiskOr(tuple(kept))


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


def decompose(f: Formula, t: int, delta) -> RiskTree:
    """Rewrite the risk constraint ``risk(f at t) <= delta`` as a
    Boolean combination of per-atom risk constraints.

    ``delta`` is a number, a dict keyed by predicate object, or a
    callable predicate -> bound.  The rewrite is exact: thresholds pass
    unchanged through the min/max recursion, existential steps become
    disjunctions, universal steps become conjunctions.
    """
    if not is_nnf(f):
        raise FormulaError("decompose requires an NNF formula")
    lookup = _delta_lookup(delta)

    def rec(g: Formula, tau: int) -> RiskTree:
        if isinstance(g, TrueLiteral):
            return ALWAYS_TRUE
        if isinstance(g, FalseLiteral):
            return ALWAYS_FALSE
        if isinstance(g, Atom):
            return RiskLeaf(g.pred, "-", tau, float(lookup(g.pred)))
        if isinstance(g, NegAtom):
            return RiskLeaf(g.pred, "+", tau, float(lookup(g.pred)))
        if isinstance(g, And):
            return _make_and(rec(c, tau) for c in g.children)
        if isinstance(g, Or):
            return _make_or(rec(c, tau) for c in g.children)
        if isinstance(g, Until):
            return _make_or(
                _make_and(
                    [rec(g.right, tau + i)]
                    + [rec(g.left, tau + j) for j in range(i + 1)]
                )
                for i in range(g.start, g.end + 1)
            )
        if isinstance(g, Release):
            return _make_and(
                _make_or(
                    [rec(g.right, tau + i)]
                    + [rec(g.left, tau + j) for j in range(i + 1)]
                )
                for i in range(g.start, g.end + 1)
            )
        raise FormulaError(f"unknown formula node {type(g).__name__}")

    return rec(f, t)


def evaluate_tree(tree: RiskTree, ens: Ensemble, spec: RiskSpec) -> bool:
    """Check every atomic risk constraint of the tree on an ensemble."""
    if tree is ALWAYS_TRUE:
        return True
    if tree is ALWAYS_FALSE:
        return False
    if isinstance(tree, RiskLeaf):
        sample = _atom_sample(ens, tree.time, tree.pred)
        if tree.sign == "-":
            sample = -sample
        return eval_risk(spec, sample) <= tree.delta
    if isinstance(tree, RiskAnd):
        return all(evaluate_tree(c, ens, spec) for c in tree.children)
    if isinstance(tree, RiskOr):
        return any(evaluate_tree(c, ens, spec) for c in tree.children)
    raise RiskError(f"unknown risk tree node {type(tree).__name__}")


def tree_leaves(tree: RiskTree) -> list[RiskLeaf]:
    """All leaves in syntactic order (shared leaves repeat)."""
    out: list[RiskLeaf] = []

    def walk(node: RiskTree) -> None:
        if isinstance(node, RiskLeaf):
            out.append(node)
        elif isinstance(node, (RiskAnd, RiskOr)):
            for c in node.children:
                walk(c)

    walk(node=tree)
    return out
