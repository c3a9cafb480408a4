"""Discrete-time signal temporal logic over affine predicates.

Formula trees live in negation normal form (NNF): negation appears only
directly on atoms.  The parser accepts ``not`` on arbitrary subformulas
and rewrites to NNF on the way in.  Until/Release intervals are
inclusive step counts; ``F``/``G`` are sugar for Until/Release with a
constant left operand.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FormulaError",
    "AffinePredicate",
    "Formula",
    "TrueLiteral",
    "FalseLiteral",
    "Atom",
    "NegAtom",
    "Not",
    "And",
    "Or",
    "Until",
    "Release",
    "TRUE",
    "FALSE",
    "eventually",
    "always",
    "conj",
    "disj",
    "Run",
    "horizon",
    "is_nnf",
    "to_nnf",
    "atom_nodes",
    "satisfies",
    "robustness",
    "format_formula",
    "parse",
    "same_formula",
]


class FormulaError(ValueError):
    """Malformed formula, predicate, or evaluation request."""


@dataclass(frozen=True, eq=False)
class AffinePredicate:
    """Half-space predicate ``a @ x + b >= 0`` on a state vector.

    Predicates compare by identity (two structurally equal predicates
    are still distinct atoms); ``label`` is an optional display name.
    """

    a: np.ndarray
    b: float
    label: str | None = None

    def __post_init__(self) -> None:
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if a.ndim != 1 or a.size == 0:
            raise FormulaError("predicate coefficient vector must be 1-D and non-empty")
        if not np.all(np.isfinite(a)) or not math.isfinite(float(self.b)):
            raise FormulaError("predicate coefficients must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.a.size

    def value(self, x: np.ndarray) -> float:
        """Signed margin of x with respect to the half-space boundary."""
        return float(self.a @ np.asarray(x, dtype=float) + self.b)

    def value_at(self, x: np.ndarray, t: int) -> float:
        # Time-invariant; the argument exists so time-varying predicate
        # families can share the evaluation call sites.
        return self.value(x)

    def coeffs_at(self, t: int) -> tuple[np.ndarray, float]:
        return self.a, self.b

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        name = f" label={self.label!r}" if self.label else ""
        return f"AffinePredicate(a={self.a.tolist()}, b={self.b}{name})"


class Formula:
    """Base class for STL formula nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class TrueLiteral(Formula):
    def __repr__(self) -> str:
        return "TRUE"


@dataclass(frozen=True)
class FalseLiteral(Formula):
    def __repr__(self) -> str:
        return "FALSE"


TRUE = TrueLiteral()
FALSE = FalseLiteral()


@dataclass(frozen=True, eq=False)
class Atom(Formula):
    pred: AffinePredicate

    def __post_init__(self) -> None:
        if not hasattr(self.pred, "value_at"):
            raise FormulaError("Atom requires a predicate object")


@dataclass(frozen=True, eq=False)
class NegAtom(Formula):
    """Negated atom: satisfied when the predicate value is < 0."""

    pred: AffinePredicate

    def __post_init__(self) -> None:
        if not hasattr(self.pred, "value_at"):
            raise FormulaError("NegAtom requires a predicate object")


@dataclass(frozen=True, eq=False)
class Not(Formula):
    """Parser-level negation; eliminated by :func:`to_nnf`."""

    child: Formula


@dataclass(frozen=True, eq=False)
class And(Formula):
    children: tuple[Formula, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise FormulaError("And requires at least two children")


@dataclass(frozen=True, eq=False)
class Or(Formula):
    children: tuple[Formula, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise FormulaError("Or requires at least two children")


def _check_interval(start: int, end: int) -> None:
    if start != int(start) or end != int(end):
        raise FormulaError("interval bounds must be integer step counts")
    if start < 0 or end < start:
        raise FormulaError(f"invalid interval [{start},{end}]")


@dataclass(frozen=True, eq=False)
class Until(Formula):
    start: int
    end: int
    left: Formula
    right: Formula

    def __post_init__(self) -> None:
        _check_interval(self.start, self.end)
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))


@dataclass(frozen=True, eq=False)
class Release(Formula):
    start: int
    end: int
    left: Formula
    right: Formula

    def __post_init__(self) -> None:
        _check_interval(self.start, self.end)
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))


def eventually(start: int, end: int, child: Formula) -> Until:
    """F[start,end] child, as Until with a trivially true left operand."""
    return Until(start, end, TRUE, child)


def always(start: int, end: int, child: Formula) -> Release:
    """G[start,end] child, as Release with a trivially false left operand."""
    return Release(start, end, FALSE, child)


def conj(children) -> Formula:
    children = tuple(children)
    if not children:
        return TRUE
    if len(children) == 1:
        return children[0]
    return And(children)


def disj(children) -> Formula:
    children = tuple(children)
    if not children:
        return FALSE
    if len(children) == 1:
        return children[0]
    return Or(children)


# ---------------------------------------------------------------------------
# Structure queries


def horizon(f: Formula) -> int:
    """Number of future steps the formula can reference.

    Atoms and literals need only the current step; n-ary nodes take the
    max over children; Until/Release add their interval end on top of
    the children's needs.
    """
    if isinstance(f, (TrueLiteral, FalseLiteral, Atom, NegAtom)):
        return 0
    if isinstance(f, Not):
        return horizon(f.child)
    if isinstance(f, (And, Or)):
        return max(horizon(c) for c in f.children)
    if isinstance(f, (Until, Release)):
        return f.end + max(horizon(f.left), horizon(f.right))
    raise FormulaError(f"unknown formula node {type(f).__name__}")


def is_nnf(f: Formula) -> bool:
    if isinstance(f, Not):
        return False
    if isinstance(f, (And, Or)):
        return all(is_nnf(c) for c in f.children)
    if isinstance(f, (Until, Release)):
        return is_nnf(f.left) and is_nnf(f.right)
    return True


def to_nnf(f: Formula) -> Formula:
    """Push negations down to atoms; double negations cancel."""
    if isinstance(f, Not):
        return _negate(f.child)
    if isinstance(f, And):
        return And(tuple(to_nnf(c) for c in f.children))
    if isinstance(f, Or):
        return Or(tuple(to_nnf(c) for c in f.children))
    if isinstance(f, Until):
        return Until(f.start, f.end, to_nnf(f.left), to_nnf(f.right))
    if isinstance(f, Release):
        return Release(f.start, f.end, to_nnf(f.left), to_nnf(f.right))
    return f


def _negate(f: Formula) -> Formula:
    if isinstance(f, TrueLiteral):
        return FALSE
    if isinstance(f, FalseLiteral):
        return TRUE
    if isinstance(f, Atom):
        return NegAtom(f.pred)
    if isinstance(f, NegAtom):
        return Atom(f.pred)
    if isinstance(f, Not):
        return to_nnf(f.child)
    if isinstance(f, And):
        return Or(tuple(_negate(c) for c in f.children))
    if isinstance(f, Or):
        return And(tuple(_negate(c) for c in f.children))
    if isinstance(f, Until):
        return Release(f.start, f.end, _negate(f.left), _negate(f.right))
    if isinstance(f, Release):
        return Until(f.start, f.end, _negate(f.left), _negate(f.right))
    raise FormulaError(f"unknown formula node {type(f).__name__}")


def atom_nodes(f: Formula) -> list[Formula]:
    """Atom/NegAtom nodes in syntactic order (shared nodes repeat)."""
    out: list[Formula] = []

    def walk(g: Formula) -> None:
        if isinstance(g, (Atom, NegAtom)):
            out.append(g)
        elif isinstance(g, Not):
            walk(g.child)
        elif isinstance(g, (And, Or)):
            for c in g.children:
                walk(c)
        elif isinstance(g, (Until, Release)):
            walk(g.left)
            walk(g.right)

    walk(f)
    return out


# ---------------------------------------------------------------------------
# Runs and semantics


@dataclass(frozen=True)
class Run:
    """Finite state sequence: states[i] is the state at step start + i."""

    states: np.ndarray
    start: int = 0

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[0] == 0:
            raise FormulaError("run states must form a non-empty 2-D array")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "start", int(self.start))

    @property
    def steps(self) -> int:
        """N, the number of transitions (len(states) - 1)."""
        return self.states.shape[0] - 1

    @property
    def end(self) -> int:
        return self.start + self.steps

    def state(self, t: int) -> np.ndarray:
        if t < self.start or t > self.end:
            raise FormulaError(f"step {t} outside run [{self.start},{self.end}]")
        return self.states[t - self.start]


def _check_window(run: Run, t: int, f: Formula) -> None:
    if t < run.start:
        raise FormulaError(f"evaluation step {t} precedes run start {run.start}")
    if t + horizon(f) > run.end:
        raise FormulaError(
            f"formula needs steps through {t + horizon(f)} but run ends at {run.end}"
        )


def satisfies(run: Run, t: int, f: Formula) -> bool:
    """Boolean satisfaction (run, t) |= f.

    Until anchors an inclusive step t' in [t+start, t+end] where the
    right operand holds, with the left operand holding on every step of
    [t, t'].  Release is the dual: every step in the interval satisfies
    the right operand unless some earlier step (from t on) satisfied
    the left one.
    """
    _check_window(run, t, f)
    return _sat(run, t, f)


def _sat(run: Run, t: int, f: Formula) -> bool:
    if isinstance(f, TrueLiteral):
        return True
    if isinstance(f, FalseLiteral):
        return False
    if isinstance(f, Atom):
        return f.pred.value_at(run.state(t), t) >= 0.0
    if isinstance(f, NegAtom):
        return f.pred.value_at(run.state(t), t) < 0.0
    if isinstance(f, Not):
        return not _sat(run, t, f.child)
    if isinstance(f, And):
        return all(_sat(run, t, c) for c in f.children)
    if isinstance(f, Or):
        return any(_sat(run, t, c) for c in f.children)
    if isinstance(f, Until):
        for tp in range(t + f.start, t + f.end + 1):
            if _sat(run, tp, f.right) and all(
                _sat(run, ts, f.left) for ts in range(t, tp + 1)
            ):
                return True
        return False
    if isinstance(f, Release):
        for tp in range(t + f.start, t + f.end + 1):
            if not _sat(run, tp, f.right) and not any(
                _sat(run, ts, f.left) for ts in range(t, tp + 1)
            ):
                return False
        return True
    raise FormulaError(f"unknown formula node {type(f).__name__}")


def robustness(run: Run, t: int, f: Formula) -> float:
    """Quantitative satisfaction margin; requires NNF input.

    Positive values imply satisfaction, negative values imply violation
    (ties at exactly zero are not sign-decisive).
    """
    if not is_nnf(f):
        raise FormulaError("robustness requires an NNF formula (run to_nnf first)")
    _check_window(run, t, f)
    return _rob(run, t, f)


def _rob(run: Run, t: int, f: Formula) -> float:
    if isinstance(f, TrueLiteral):
        return math.inf
    if isinstance(f, FalseLiteral):
        return -math.inf
    if isinstance(f, Atom):
        return f.pred.value_at(run.state(t), t)
    if isinstance(f, NegAtom):
        return -f.pred.value_at(run.state(t), t)
    if isinstance(f, And):
        return min(_rob(run, t, c) for c in f.children)
    if isinstance(f, Or):
        return max(_rob(run, t, c) for c in f.children)
    if isinstance(f, Until):
        best = -math.inf
        for tp in range(t + f.start, t + f.end + 1):
            cand = min(
                _rob(run, tp, f.right),
                min(_rob(run, ts, f.left) for ts in range(t, tp + 1)),
            )
            best = max(best, cand)
        return best
    if isinstance(f, Release):
        worst = math.inf
        for tp in range(t + f.start, t + f.end + 1):
            cand = max(
                _rob(run, tp, f.right),
                max(_rob(run, ts, f.left) for ts in range(t, tp + 1)),
            )
            worst = min(worst, cand)
        return worst
    raise FormulaError(f"unknown formula node {type(f).__name__}")


# ---------------------------------------------------------------------------
# Canonical text form


def _format_number(x: float) -> str:
    return repr(float(x))


def _format_pred(p) -> str:
    a, b = p.coeffs_at(0) if not isinstance(p, AffinePredicate) else (p.a, p.b)
    terms = [f"{_format_number(c)}*x{i}" for i, c in enumerate(a)]
    terms.append(_format_number(b))
    return "(" + " + ".join(terms) + " >= 0)"


def format_formula(f: Formula) -> str:
    """Canonical text form; ``parse`` inverts it exactly.

    All predicate coefficients print (zeros included) so the state
    dimension survives the round trip.
    """
    if isinstance(f, TrueLiteral):
        return "top"
    if isinstance(f, FalseLiteral):
        return "bot"
    if isinstance(f, Atom):
        return _format_pred(f.pred)
    if isinstance(f, NegAtom):
        return "not " + _format_pred(f.pred)
    if isinstance(f, Not):
        return "not " + _wrap(f.child)
    if isinstance(f, And):
        return "(" + " and ".join(format_formula(c) for c in f.children) + ")"
    if isinstance(f, Or):
        return "(" + " or ".join(format_formula(c) for c in f.children) + ")"
    if isinstance(f, Until):
        if f.left is TRUE:
            return f"F[{f.start},{f.end}] {_wrap(f.right)}"
        return f"({format_formula(f.left)} U[{f.start},{f.end}] {format_formula(f.right)})"
    if isinstance(f, Release):
        if f.left is FALSE:
            return f"G[{f.start},{f.end}] {_wrap(f.right)}"
        return f"({format_formula(f.left)} R[{f.start},{f.end}] {format_formula(f.right)})"
    raise FormulaError(f"unknown formula node {type(f).__name__}")


def _wrap(f: Formula) -> str:
    # Operand of a unary operator: literals, atoms, and parenthesized
    # forms are already self-delimiting; so are nested unary prints.
    s = format_formula(f)
    if s.startswith(("(", "not", "F[", "G[", "top", "bot")):
        return s
    return "(" + s + ")"


# ---------------------------------------------------------------------------
# Parser

_TOKEN_RE = re.compile(
    r"""
    (?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<geq>>=)
  | (?P<sym>[()\[\],+\-*])
  | (?P<ws>\s+)
  | (?P<bad>.)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"top", "bot", "not", "and", "or", "U", "R", "F", "G"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    toks = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        if kind == "ws":
            continue
        if kind == "bad":
            raise FormulaError(f"unexpected character {m.group()!r} at {m.start()}")
        toks.append((kind, m.group(), m.start()))
    toks.append(("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, steps_per_unit: float):
        self.toks = _tokenize(text)
        self.pos = 0
        self.spu = steps_per_unit

    def peek(self):
        return self.toks[self.pos]

    def next(self):
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, value: str | None = None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            raise FormulaError(f"expected {want!r} at position {tok[2]}, got {tok[1]!r}")
        return tok

    def at_name(self, *names: str) -> bool:
        kind, val, _ = self.peek()
        return kind == "name" and val in names

    # grammar: formula := or_expr (('U'|'R') interval or_expr)?
    def formula(self) -> Formula:
        left = self.or_expr()
        if self.at_name("U", "R"):
            _, op, pos = self.next()
            a, b = self.interval()
            right = self.or_expr()
            if self.at_name("U", "R"):
                raise FormulaError(
                    f"chained temporal operators need parentheses (position {self.peek()[2]})"
                )
            cls = Until if op == "U" else Release
            return cls(a, b, left, right)
        return left

    def or_expr(self) -> Formula:
        items = [self.and_expr()]
        while self.at_name("or"):
            self.next()
            items.append(self.and_expr())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def and_expr(self) -> Formula:
        items = [self.unary()]
        while self.at_name("and"):
            self.next()
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self) -> Formula:
        if self.at_name("not"):
            self.next()
            return Not(self.unary())
        if self.at_name("F", "G"):
            _, op, _ = self.next()
            a, b = self.interval()
            child = self.unary()
            return eventually(a, b, child) if op == "F" else always(a, b, child)
        return self.primary()

    def primary(self) -> Formula:
        kind, val, pos = self.peek()
        if kind == "name":
            if val == "top":
                self.next()
                return TRUE
            if val == "bot":
                self.next()
                return FALSE
            raise FormulaError(f"unexpected name {val!r} at position {pos}")
        if kind == "sym" and val == "(":
            mark = self.pos
            try:
                return self.atom()
            except FormulaError:
                self.pos = mark
            self.expect("sym", "(")
            inner = self.formula()
            self.expect("sym", ")")
            return inner
        raise FormulaError(f"unexpected token {val!r} at position {pos}")

    def atom(self) -> Formula:
        self.expect("sym", "(")
        coeffs: dict[int, float] = {}
        const = 0.0
        while True:
            sign = 1.0
            while self.peek()[:2] in (("sym", "+"), ("sym", "-")):
                if self.next()[1] == "-":
                    sign = -sign
            kind, val, pos = self.next()
            if kind == "num":
                value = sign * float(val)
                if self.peek()[:2] == ("sym", "*"):
                    self.next()
                    idx = self.var_index()
                    coeffs[idx] = coeffs.get(idx, 0.0) + value
                else:
                    const += value
            elif kind == "name" and re.fullmatch(r"x\d+", val):
                idx = int(val[1:])
                coeffs[idx] = coeffs.get(idx, 0.0) + sign
            else:
                raise FormulaError(f"expected linear term at position {pos}")
            kind, val, pos = self.peek()
            if kind == "geq":
                break
            if kind == "sym" and val in "+-":
                continue
            raise FormulaError(f"expected '+', '-', or '>=' at position {pos}")
        self.expect("geq")
        kind, val, pos = self.next()
        if kind != "num" or float(val) != 0.0:
            raise FormulaError(f"predicates compare to 0, got {val!r} at position {pos}")
        self.expect("sym", ")")
        return _RawAtom(coeffs, const)

    def var_index(self) -> int:
        kind, val, pos = self.next()
        if kind != "name" or not re.fullmatch(r"x\d+", val):
            raise FormulaError(f"expected variable x<i> at position {pos}")
        return int(val[1:])

    def interval(self) -> tuple[int, int]:
        self.expect("sym", "[")
        a = self.number()
        self.expect("sym", ",")
        b = self.number()
        self.expect("sym", "]")
        if self.spu != 1.0:
            a_steps = math.floor(a * self.spu + 1e-9)
            b_steps = math.ceil(b * self.spu - 1e-9)
        else:
            if abs(a - round(a)) > 1e-9 or abs(b - round(b)) > 1e-9:
                raise FormulaError(f"interval bounds must be integers, got [{a},{b}]")
            a_steps, b_steps = int(round(a)), int(round(b))
        if a_steps < 0 or b_steps < a_steps:
            raise FormulaError(f"invalid interval [{a_steps},{b_steps}] after step conversion")
        return a_steps, b_steps

    def number(self) -> float:
        sign = 1.0
        while self.peek()[:2] in (("sym", "+"), ("sym", "-")):
            if self.next()[1] == "-":
                sign = -sign
        kind, val, pos = self.next()
        if kind != "num":
            raise FormulaError(f"expected number at position {pos}")
        return sign * float(val)


@dataclass(frozen=True, eq=False)
class _RawAtom(Formula):
    """Parse-time atom before the state dimension is known."""

    coeffs: dict
    const: float


def _finalize(f: Formula, dim: int) -> Formula:
    if isinstance(f, _RawAtom):
        a = np.zeros(dim)
        for idx, c in f.coeffs.items():
            a[idx] = c
        return Atom(AffinePredicate(a, f.const))
    if isinstance(f, Not):
        return Not(_finalize(f.child, dim))
    if isinstance(f, And):
        return And(tuple(_finalize(c, dim) for c in f.children))
    if isinstance(f, Or):
        return Or(tuple(_finalize(c, dim) for c in f.children))
    if isinstance(f, Until):
        return Until(f.start, f.end, _finalize(f.left, dim), _finalize(f.right, dim))
    if isinstance(f, Release):
        return Release(f.start, f.end, _finalize(f.left, dim), _finalize(f.right, dim))
    return f


def _needed_dim(f: Formula) -> int:
    if isinstance(f, _RawAtom):
        return 1 + max(f.coeffs.keys(), default=-1)
    if isinstance(f, Not):
        return _needed_dim(f.child)
    if isinstance(f, (And, Or)):
        return max(_needed_dim(c) for c in f.children)
    if isinstance(f, (Until, Release)):
        return max(_needed_dim(f.left), _needed_dim(f.right))
    return 0


def parse(text: str, dim: int | None = None, steps_per_unit: float = 1.0) -> Formula:
    """Parse formula text to an NNF formula tree.

    ``dim`` pads every predicate's coefficient vector to a common state
    dimension (default: the highest variable index mentioned).  When
    ``steps_per_unit`` differs from 1, interval bounds are treated as
    continuous times and converted to steps, rounding the lower bound
    down and the upper bound up.
    """
    p = _Parser(text, steps_per_unit)
    raw = p.formula()
    p.expect("end")
    need = max(_needed_dim(raw), 1)
    if dim is None:
        dim = need
    elif dim < need:
        raise FormulaError(f"formula references x{need - 1} but dim={dim}")
    return to_nnf(_finalize(raw, dim))


# ---------------------------------------------------------------------------
# Structural comparison (used by round-trip tests)


def same_formula(f: Formula, g: Formula) -> bool:
    """Structural equality; predicates compare by coefficients, not id."""
    if isinstance(f, TrueLiteral) or isinstance(f, FalseLiteral):
        return f is g or type(f) is type(g)
    if type(f) is not type(g):
        return False
    if isinstance(f, (Atom, NegAtom)):
        fa, fb = f.pred.coeffs_at(0)
        ga, gb = g.pred.coeffs_at(0)
        return fa.shape == ga.shape and np.array_equal(fa, ga) and fb == gb
    if isinstance(f, Not):
        return same_formula(f.child, g.child)
    if isinstance(f, (And, Or)):
        return len(f.children) == len(g.children) and all(
            same_formula(a, b) for a, b in zip(f.children, g.children)
        )
    if isinstance(f, (Until, Release)):
        return (
            f.start == g.start
            and f.end == g.end
            and same_formula(f.left, g.left)
            and same_formula(f.right, g.right)
        )
    raise FormulaError(f"unknown formula node {type(f).__name__}")
