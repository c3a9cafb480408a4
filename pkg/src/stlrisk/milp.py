"""Mixed-integer linear programming with an embedded dense solver.

Provides the model container and builder, a two-phase tableau simplex
(Dantzig pricing with a Bland fallback under stalling), depth-first
branch and bound on binary variables, CPLEX-style LP file export plus a
matching reader, and the big-M encoding of deterministic STL
constraints on mean trajectories.
"""

from __future__ import annotations

import math
import re
import time
import weakref
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
from .tightening import LtvSystem, SystemError_, stacked_dynamics

__all__ = [
    "MilpError",
    "MilpModel",
    "ModelBuilder",
    "LpResult",
    "solve_lp",
    "MilpSolution",
    "solve_milp",
    "lp_string",
    "write_lp",
    "parse_lp",
    "same_model",
    "EncodedStl",
    "StlEncoder",
    "encode_deterministic_stl",
]

FEAS_TOL = 1e-7
PIVOT_TOL = 1e-9
INT_TOL = 1e-6
STRICT_EPS = 1e-6

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")


class MilpError(RuntimeError):
    """Numeric failure or unsupported model handed to the solver."""


@dataclass(frozen=True, eq=False)
class MilpModel:
    """Immutable MILP in minimize form.

    Rows are (indices, coefficients, relation, rhs) with relations in
    {'<=', '>=', '='}.  Binary variables are continuous [0,1] columns
    flagged for branching.  Equality is identity; use
    :func:`same_model` for structural comparison.
    """

    names: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray
    obj: np.ndarray
    rows: tuple[tuple[np.ndarray, np.ndarray, str, float], ...]

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def binary_indices(self) -> np.ndarray:
        return np.where(self.binary)[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MilpError(f"unknown variable {name!r}") from None


class ModelBuilder:
    """Mutable accumulator; ``build`` freezes into a MilpModel.

    ``fix_var`` pins an already-added variable; fixed columns get
    substituted out of every LP relaxation, so pinning known binaries
    shrinks the search."""

    def __init__(self) -> None:
        self._names: list[str] = []
        self._seen: set[str] = set()
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._bin: list[bool] = []
        self._rows: list[tuple[np.ndarray, np.ndarray, str, float]] = []
        self._obj: dict[int, float] = {}

    def add_var(
        self,
        name: str,
        lb: float = -math.inf,
        ub: float = math.inf,
        binary: bool = False,
    ) -> int:
        if not _NAME_RE.fullmatch(name) or name[0] in "eE":
            raise MilpError(f"variable name {name!r} is not LP-safe")
        if name in self._seen:
            raise MilpError(f"duplicate variable name {name!r}")
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise MilpError(f"variable {name!r} has lb > ub")
        self._names.append(name)
        self._seen.add(name)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._bin.append(bool(binary))
        return len(self._names) - 1

    def fix_var(self, idx: int, value: float) -> None:
        # Narrowing only: conflicting fixes leave an empty box, which
        # the solver reports as infeasible rather than silently
        # overwriting one requirement with the other.
        if not (0 <= idx < len(self._names)):
            raise MilpError(f"unknown variable index {idx}")
        self._lb[idx] = max(self._lb[idx], float(value))
        self._ub[idx] = min(self._ub[idx], float(value))

    def add_constraint(self, coeffs: dict[int, float], rel: str, rhs: float) -> int:
        if rel not in ("<=", ">=", "="):
            raise MilpError(f"relation must be <=, >= or =, got {rel!r}")
        items = [(i, float(c)) for i, c in sorted(coeffs.items()) if c != 0.0]
        for i, _ in items:
            if not (0 <= i < len(self._names)):
                raise MilpError(f"constraint references unknown variable index {i}")
        idx = np.array([i for i, _ in items], dtype=np.intp)
        coef = np.array([c for _, c in items], dtype=float)
        if not np.all(np.isfinite(coef)) or not math.isfinite(float(rhs)):
            raise MilpError("constraint coefficients must be finite")
        self._rows.append((idx, coef, rel, float(rhs)))
        return len(self._rows) - 1

    def add_objective_term(self, var: int, coef: float) -> None:
        self._obj[var] = self._obj.get(var, 0.0) + float(coef)

    def set_objective(self, coeffs: dict[int, float]) -> None:
        self._obj = {int(i): float(c) for i, c in coeffs.items()}

    def build(self) -> MilpModel:
        n = len(self._names)
        obj = np.zeros(n)
        for i, c in self._obj.items():
            obj[i] = c
        return MilpModel(
            names=tuple(self._names),
            lb=np.array(self._lb),
            ub=np.array(self._ub),
            binary=np.array(self._bin, dtype=bool),
            obj=obj,
            rows=tuple(self._rows),
        )


# ---------------------------------------------------------------------------
# Dense two-phase simplex


@dataclass(frozen=True)
class LpResult:
    """LP relaxation outcome.

    ``duals`` (on request) has one multiplier per model row, in the
    convention: minimize problems give <= rows nonpositive duals and >=
    rows nonnegative ones, with strong duality obj = duals . rhs when no
    variable sits at a finite nonzero bound.

    ``reduced`` holds per-variable reduced costs at the optimum: moving
    variable j off the bound it rests on changes the objective by at
    least |reduced[j]| per unit.  Basic and fixed variables carry zero.
    """

    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    duals: np.ndarray | None = None
    reduced: np.ndarray | None = None


_LE, _GE, _EQ = 0, 1, 2


@dataclass(frozen=True)
class _DenseModel:
    A: np.ndarray  # (m0, n) dense row coefficients
    b: np.ndarray
    rel: np.ndarray  # int8 codes _LE/_GE/_EQ


_dense_cache: "weakref.WeakKeyDictionary[MilpModel, _DenseModel]" = (
    weakref.WeakKeyDictionary()
)


def _dense_of(model: MilpModel) -> _DenseModel:
    dm = _dense_cache.get(model)
    if dm is None:
        m0 = model.n_rows
        A = np.zeros((m0, model.n_vars))
        b = np.empty(m0)
        rel = np.empty(m0, dtype=np.int8)
        codes = {"<=": _LE, ">=": _GE, "=": _EQ}
        for r, (idx, coef, rl, rhs) in enumerate(model.rows):
            A[r, idx] = coef
            b[r] = rhs
            rel[r] = codes[rl]
        dm = _DenseModel(A, b, rel)
        _dense_cache[model] = dm
    return dm


def solve_lp(
    model: MilpModel,
    lb: np.ndarray | None = None,
    ub: np.ndarray | None = None,
    want_duals: bool = False,
) -> LpResult:
    """Two-phase dense simplex over the box-relaxed model."""
    lbv = model.lb if lb is None else lb
    ubv = model.ub if ub is None else ub
    n = model.n_vars
    if np.any(lbv > ubv + 1e-12):
        return LpResult("infeasible")
    dm = _dense_of(model)

    # Column mapping x_j = off[j] + sgn_j * y[c1_j] (+ extra split col
    # for doubly-free variables).
    finL = np.isfinite(lbv)
    finU = np.isfinite(ubv)
    fixed = finL & finU & (ubv - lbv <= 1e-12)
    shiftm = ~fixed & finL
    mirror = ~finL & finU
    split = ~finL & ~finU
    off = np.zeros(n)
    off[fixed] = (lbv[fixed] + ubv[fixed]) / 2.0
    off[shiftm] = lbv[shiftm]
    off[mirror] = ubv[mirror]
    sgn = np.ones(n)
    sgn[mirror] = -1.0
    kidx = np.where(~fixed)[0]
    sidx = np.where(split)[0]
    nk = kidx.size
    ncols = nk + sidx.size
    c1 = np.full(n, -1, dtype=np.intp)
    c1[kidx] = np.arange(nk)
    c2 = np.full(n, -1, dtype=np.intp)
    c2[sidx] = nk + np.arange(sidx.size)
    cy = np.empty(ncols)
    cy[:nk] = model.obj[kidx] * sgn[kidx]
    cy[nk:] = -model.obj[sidx]

    m0 = dm.A.shape[0]
    if m0:
        bshift = dm.b - dm.A @ off
        Astruct = np.empty((m0, ncols))
        Astruct[:, :nk] = dm.A[:, kidx] * sgn[kidx][None, :]
        Astruct[:, nk:] = -dm.A[:, sidx]
        support = (Astruct != 0.0).any(axis=1)
        if not support.all():
            gone = ~support
            bad = (
                ((dm.rel == _LE) & (bshift < -FEAS_TOL))
                | ((dm.rel == _GE) & (bshift > FEAS_TOL))
                | ((dm.rel == _EQ) & (np.abs(bshift) > FEAS_TOL))
            )
            if (gone & bad).any():
                return LpResult("infeasible")
            Astruct = Astruct[support]
            bshift = bshift[support]
        rel = dm.rel[support] if not support.all() else dm.rel.copy()
        orig_of_row = np.where(support)[0]
    else:
        Astruct = np.empty((0, ncols))
        bshift = np.empty(0)
        rel = np.empty(0, dtype=np.int8)
        orig_of_row = np.empty(0, dtype=np.intp)

    # Shifted columns keep their width as an implicit upper bound that
    # the ratio test enforces; no cap rows enter the tableau.
    Ucol = np.full(ncols, np.inf)
    both = np.where(shiftm & finU)[0]
    Ucol[c1[both]] = ubv[both] - lbv[both]

    m = Astruct.shape[0]
    if m == 0:
        y0 = np.zeros(ncols)
        improving = cy < -PIVOT_TOL
        if np.any(improving & ~np.isfinite(Ucol)):
            return LpResult("unbounded")
        y0[improving] = Ucol[improving]
        x = off.copy()
        x[kidx] += sgn[kidx] * y0[c1[kidx]]
        x[sidx] -= y0[c2[sidx]]
        return LpResult(
            "optimal",
            x=x,
            objective=float(model.obj @ x),
            duals=np.zeros(model.n_rows) if want_duals else None,
            reduced=np.where(fixed, 0.0, model.obj),
        )

    # Normalize to nonnegative rhs; zero-rhs >= rows flip too so their
    # slack (not an artificial) can start in the basis.
    sigma = np.ones(m)
    flip = (bshift < 0.0) | ((bshift == 0.0) & (rel == _GE))
    if flip.any():
        Astruct[flip] *= -1.0
        bshift = np.where(flip, -bshift, bshift)
        sigma[flip] = -1.0
        swap = flip & (rel != _EQ)
        rel = np.where(swap, np.int8(1) - rel, rel).astype(np.int8)

    ineq = rel != _EQ
    needs_art = rel != _LE
    n_slack = int(ineq.sum())
    n_art = int(needs_art.sum())
    ntot = ncols + n_slack + n_art
    T = np.zeros((m + 2, ntot))
    T[:m, :ncols] = Astruct
    xB = bshift.copy()  # basic values, tracked outside the tableau
    U = np.full(ntot, np.inf)
    U[:ncols] = Ucol
    at_upper = np.zeros(ntot, dtype=bool)
    slack_col_of_row = np.full(m, -1, dtype=np.intp)
    irows = np.where(ineq)[0]
    slack_col_of_row[irows] = ncols + np.arange(n_slack)
    T[irows, slack_col_of_row[irows]] = np.where(rel[irows] == _LE, 1.0, -1.0)
    art_col_of_row = np.full(m, -1, dtype=np.intp)
    arows = np.where(needs_art)[0]
    art_col_of_row[arows] = ncols + n_slack + np.arange(n_art)
    T[arows, art_col_of_row[arows]] = 1.0
    basis = np.where(rel == _LE, slack_col_of_row, art_col_of_row)
    allowed = np.ones(ntot, dtype=bool)
    art_base = ncols + n_slack
    allowed[art_base:] = False  # artificials may leave, never enter

    # Row m: phase-2 objective (structural costs); row m+1: phase-1.
    T[m, :ncols] = cy
    if n_art:
        T[m + 1] -= T[arows].sum(axis=0)

    scratch = np.empty_like(T)
    st = _SimplexState(T, basis, xB, U, at_upper, allowed, m, scratch)
    if n_art:
        status = _bounded_simplex(st, m + 1)
        if status != "optimal":
            raise MilpError("phase-1 simplex failed to converge")
        if xB[basis >= art_base].sum() > FEAS_TOL:
            return LpResult("infeasible")
        # Drive remaining artificials out of the basis where possible.
        for i in range(m):
            if basis[i] >= art_base:
                cand = np.where(allowed & (np.abs(T[i]) > FEAS_TOL))[0]
                if cand.size:
                    col = int(cand[0])
                    entering_val = U[col] if at_upper[col] else 0.0
                    _pivot(T, basis, i, col, scratch)
                    xB[i] = entering_val
                    at_upper[col] = False

    # Spent artificial columns and the phase-1 row only slow phase 2
    # down; shed them unless duals still need the artificial reduced
    # costs or a degenerate artificial is stuck in the basis.
    if not np.any(basis >= art_base) and not (want_duals and n_art):
        T = np.ascontiguousarray(T[: m + 1, :art_base])
        U = U[:art_base]
        at_upper = at_upper[:art_base]
        allowed = allowed[:art_base]
        scratch = np.empty_like(T)
        st = _SimplexState(T, basis, xB, U, at_upper, allowed, m, scratch)

    status = _bounded_simplex(st, m)
    if status == "unbounded":
        return LpResult("unbounded")
    if status != "optimal":
        raise MilpError("phase-2 simplex failed to converge")

    y = np.where(at_upper, U, 0.0)
    y[basis] = xB
    x = off.copy()
    x[kidx] += sgn[kidx] * y[c1[kidx]]
    x[sidx] -= y[c2[sidx]]
    objective = float(model.obj @ x)
    reduced = np.zeros(n)
    reduced[kidx] = sgn[kidx] * T[m, c1[kidx]]
    orig_of_col = np.concatenate([kidx, sidx])
    in_basis = basis[basis < ncols]
    reduced[orig_of_col[in_basis]] = 0.0  # basic columns carry noise only

    duals = None
    if want_duals:
        duals = np.zeros(model.n_rows)
        for i in range(m):
            r = orig_of_row[i]
            if r < 0:
                continue
            if slack_col_of_row[i] >= 0:
                red = T[m, slack_col_of_row[i]]
                # slack column entered as +e_i for <= rows, -e_i for >=
                d = -red if rel[i] == _LE else red
            else:
                d = -T[m, art_col_of_row[i]]
            duals[r] = sigma[i] * d
    return LpResult("optimal", x=x, objective=objective, duals=duals,
                    reduced=reduced)


def _pivot(T, basis, row: int, col: int, scratch) -> None:
    prow = T[row]
    prow /= prow[col]
    colvals = T[:, col].copy()
    colvals[row] = 0.0
    np.multiply(colvals[:, None], prow[None, :], out=scratch)
    T -= scratch
    T[:, col] = 0.0
    T[row, col] = 1.0
    basis[row] = col


@dataclass
class _SimplexState:
    T: np.ndarray  # (m + 2, ntot) coefficients plus two objective rows
    basis: np.ndarray
    xB: np.ndarray  # values of the basic variables
    U: np.ndarray  # per-column upper bounds (lower bounds are zero)
    at_upper: np.ndarray  # nonbasic-at-upper-bound flags
    allowed: np.ndarray
    m: int
    scratch: np.ndarray


def _bounded_simplex(st: _SimplexState, obj_row: int) -> str:
    """Pivot st to optimality of T's obj_row; returns optimal/unbounded.

    Nonbasic variables rest at either bound; an entering step may end in
    a bound flip instead of a basis exchange.
    """
    T, basis, xB = st.T, st.basis, st.xB
    U, at_upper, allowed, m = st.U, st.at_upper, st.allowed, st.m
    ntot = T.shape[1]
    bland = False
    stall = 0
    score = np.empty(ntot)
    merit = np.empty(ntot)
    weight = np.ones(ntot)  # devex reference weights
    for _ in range(20000 + 40 * (m + ntot)):
        r = T[obj_row]
        # Improvement score: lower-bound columns want negative reduced
        # cost, upper-bound columns want positive.
        np.negative(r, out=score)
        np.copyto(score, r, where=at_upper)
        score[~allowed] = -np.inf
        if bland:
            cand = np.where(score > PIVOT_TOL)[0]
            if cand.size == 0:
                return "optimal"
            col = int(cand[0])
        else:
            # Devex pricing: steepest improvement per reference weight.
            np.multiply(score, score, out=merit)
            merit /= weight
            merit[score <= PIVOT_TOL] = -np.inf
            col = int(np.argmax(merit))
            if score[col] <= PIVOT_TOL:
                return "optimal"
        dirn = -1.0 if at_upper[col] else 1.0
        d = dirn * T[:m, col]
        # Step limits: a basic variable hits zero, a basic variable hits
        # its own bound, or the entering variable flips to its other
        # bound (checked after the row limits).
        ub_b = U[basis]
        ia = np.where(d > PIVOT_TOL)[0]
        ib = np.where((d < -PIVOT_TOL) & np.isfinite(ub_b))[0]
        t_row = math.inf
        row = -1
        leave_upper = False
        if ia.size or ib.size:
            cand_rows = np.concatenate([ia, ib])
            cand_t = np.concatenate(
                [
                    np.maximum(xB[ia], 0.0) / d[ia],
                    np.maximum(ub_b[ib] - xB[ib], 0.0) / -d[ib],
                ]
            )
            t_row = cand_t.min()
            ties = cand_t <= t_row + 1e-12
            pick = int(np.argmin(np.where(ties, basis[cand_rows], np.iinfo(np.intp).max)))
            row = int(cand_rows[pick])
            leave_upper = pick >= ia.size
        if math.isfinite(U[col]) and U[col] <= t_row:
            # Bound flip: no basis change.
            step = U[col]
            xB -= dirn * step * T[:m, col]
            at_upper[col] = not at_upper[col]
        elif row >= 0:
            step = t_row
            delta = dirn * step
            entering_val = (U[col] if at_upper[col] else 0.0) + delta
            xB -= delta * T[:m, col]
            lcol = int(basis[row])
            wq = weight[col]
            piv = T[row, col]
            at_upper[lcol] = leave_upper
            _pivot(T, basis, row, col, st.scratch)
            xB[row] = entering_val
            at_upper[col] = False
            # Forrest-Goldfarb devex update off the normalized pivot row.
            np.multiply(T[row], T[row], out=merit)
            merit *= wq
            np.maximum(weight, merit, out=weight)
            weight[lcol] = max(wq / (piv * piv), 1.0)
        else:
            return "unbounded"
        # The objective drops by score * step each iteration; a stretch
        # of degenerate steps switches pricing to Bland's rule.
        if score[col] * step <= 1e-12:
            stall += 1
            if stall > 2 * (m + 10):
                bland = True
        else:
            stall = 0
            bland = False
    raise MilpError("simplex iteration limit exceeded")


# ---------------------------------------------------------------------------
# Branch and bound


@dataclass(frozen=True)
class MilpSolution:
    """status in {'optimal', 'infeasible', 'cutoff', 'iteration_limit'};
    on the limit status the incumbent (if any) rides along in
    x/objective, and 'cutoff' means no solution beat the caller's
    bound (x is None, the caller's own point stands)."""

    status: str
    objective: float | None
    x: np.ndarray | None
    nodes: int
    wall_time: float

    def value(self, model: MilpModel, name: str) -> float:
        if self.x is None:
            raise MilpError("no incumbent available")
        return float(self.x[model.index(name)])


def solve_milp(
    model: MilpModel,
    int_tol: float = INT_TOL,
    max_nodes: int = 200_000,
    time_limit: float | None = None,
    heuristic: bool = True,
    rel_gap: float = 0.0,
    branch_groups: tuple[tuple[int, ...], ...] = (),
    cutoff: float | None = None,
    incumbent: tuple[np.ndarray, float] | None = None,
) -> MilpSolution:
    """Depth-first branch and bound on the binary variables.

    Branches on the first fractional binary in declaration order and
    explores the z=1 child first, which dives quickly to feasible
    points in disjunction-heavy models.  When ``branch_groups`` names
    covering disjunctions (some member must be 1 in every feasible
    solution), unresolved groups are branched first, one child per
    member in LP-preference order with the earlier members turned off;
    that partitions the node instead of splitting one binary.  Pruning
    uses the incumbent objective with 1e-9 slack, widened to rel_gap
    when one is given (the incumbent is then optimal to within that
    relative gap).  A caller who already holds a feasible point can
    pass its objective as ``cutoff``: pruning then starts at the root,
    and status 'cutoff' with x=None means nothing beat that bound, so
    the caller's point stands.  ``incumbent`` goes further and seeds a
    full (x, objective) pair that is returned as is when the search
    finds nothing better; the point must be feasible and integral,
    which is on the caller.  Node/time caps return status
    'iteration_limit' with the best incumbent found.
    """
    t_start = time.perf_counter()
    bins = model.binary_indices
    groups = [np.asarray(g, dtype=np.intp) for g in branch_groups]
    inc_x: np.ndarray | None = None
    inc_obj = math.inf if cutoff is None else float(cutoff)
    bounded = cutoff is not None
    if incumbent is not None:
        inc_x = np.array(incumbent[0], dtype=float)
        inc_obj = min(inc_obj, float(incumbent[1]))
    nodes = 0
    capped = False
    stack: list[tuple[np.ndarray, np.ndarray, float]] = [
        (model.lb.copy(), model.ub.copy(), -math.inf)
    ]
    while stack:
        if nodes >= max_nodes or (
            time_limit is not None and time.perf_counter() - t_start > time_limit
        ):
            capped = True
            break
        lbv, ubv, parent_bound = stack.pop()
        have_bound = inc_x is not None or bounded
        slack = max(1e-9, rel_gap) * max(1.0, abs(inc_obj)) if have_bound else 0.0
        if parent_bound >= inc_obj - slack:
            continue
        res = solve_lp(model, lbv, ubv)
        nodes += 1
        if res.status == "unbounded":
            raise MilpError("relaxation is unbounded; add finite bounds")
        if res.status != "optimal":
            continue
        if have_bound and res.objective >= inc_obj - slack:
            continue
        zf = res.x[bins] if bins.size else np.empty(0)
        frac = np.abs(zf - np.round(zf))
        fractional = np.where(frac > int_tol)[0]
        if fractional.size == 0:
            inc_x = res.x.copy()
            if bins.size:
                inc_x[bins] = np.round(inc_x[bins])
            inc_obj = res.objective
            continue
        if heuristic and nodes == 1:
            hx = _round_fix_heuristic(model, lbv, ubv, bins, zf)
            if hx is not None:
                hobj = float(model.obj @ hx)
                if hobj < inc_obj:
                    inc_x, inc_obj = hx, hobj
        if have_bound and res.reduced is not None:
            # Reduced-cost fixing: flipping an integral binary off its
            # bound costs at least its reduced cost, so any flip that
            # already exceeds the incumbent is locked for the subtree.
            slack = max(1e-9, rel_gap) * max(1.0, abs(inc_obj))
            rb = res.reduced[bins]
            zi = np.round(zf)
            gain = np.where(zi == 0.0, np.maximum(rb, 0.0), np.maximum(-rb, 0.0))
            lock = (frac <= int_tol) & (res.objective + gain >= inc_obj - slack)
            if lock.any():
                lj = bins[lock]
                lbv = lbv.copy()
                ubv = ubv.copy()
                lbv[lj] = zi[lock]
                ubv[lj] = zi[lock]
        gsel = None
        for g in groups:
            if np.any(lbv[g] >= 0.5) or np.any(res.x[g] >= 1.0 - int_tol):
                continue  # a member already holds here
            gsel = g
            break
        if gsel is not None:
            # One child per member: member k true, earlier members off.
            order = gsel[np.argsort(-res.x[gsel], kind="stable")]
            children = []
            for pos in range(order.size):
                j = int(order[pos])
                if ubv[j] < 0.5:
                    continue
                clb, cub = lbv.copy(), ubv.copy()
                clb[j] = cub[j] = 1.0
                prev = order[:pos]
                clb[prev] = 0.0
                cub[prev] = 0.0
                children.append((clb, cub, res.objective))
            stack.extend(reversed(children))
            continue
        j = int(bins[fractional[0]])
        for val in (0, 1):  # z=1 side popped (explored) first
            clb, cub = lbv.copy(), ubv.copy()
            clb[j] = cub[j] = float(val)
            stack.append((clb, cub, res.objective))
    wall = time.perf_counter() - t_start
    if capped:
        return MilpSolution("iteration_limit", inc_obj if inc_x is not None else None,
                            inc_x, nodes, wall)
    if inc_x is None:
        return MilpSolution("cutoff" if bounded else "infeasible", None, None, nodes, wall)
    return MilpSolution("optimal", inc_obj, inc_x, nodes, wall)


def _round_fix_heuristic(model, lbv, ubv, bins, zf) -> np.ndarray | None:
    clb, cub = lbv.copy(), ubv.copy()
    rounded = np.round(zf)
    clb[bins] = rounded
    cub[bins] = rounded
    res = solve_lp(model, clb, cub)
    if res.status == "optimal":
        return res.x
    return None


# ---------------------------------------------------------------------------
# LP file format (CPLEX-style)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def lp_string(model: MilpModel) -> str:
    """Serialize in CPLEX LP form.

    The objective lists every variable (zero coefficients included) so
    the declaration order survives a round trip through the reader.
    """
    out: list[str] = ["\\ written by stlrisk", "Minimize"]
    terms = [_term(model.obj[j], model.names[j]) for j in range(model.n_vars)]
    out.extend(_wrap_terms(" obj:", terms))
    out.append("Subject To")
    for k, (idx, coef, rel, rhs) in enumerate(model.rows):
        terms = [_term(c, model.names[i]) for i, c in zip(idx, coef)]
        if not terms:
            terms = [_term(0.0, model.names[0])]
        lines = _wrap_terms(f" c{k}:", terms)
        lines[-1] += f" {rel} {_fmt(rhs)}"
        out.extend(lines)
    out.append("Bounds")
    for j, name in enumerate(model.names):
        l, u = model.lb[j], model.ub[j]
        if l == u:
            out.append(f" {name} = {_fmt(l)}")
        elif not math.isfinite(l) and not math.isfinite(u):
            out.append(f" {name} free")
        else:
            lo = "-infinity" if not math.isfinite(l) else _fmt(l)
            hi = "+infinity" if not math.isfinite(u) else _fmt(u)
            out.append(f" {lo} <= {name} <= {hi}")
    bnames = [model.names[j] for j in model.binary_indices]
    if bnames:
        out.append("Binary")
        for name in bnames:
            out.append(f" {name}")
    out.append("End")
    return "\n".join(out) + "\n"


def _term(c: float, name: str) -> str:
    sign = "-" if c < 0 or (c == 0 and math.copysign(1.0, c) < 0) else "+"
    return f"{sign}{_fmt(abs(c))} {name}"


def _wrap_terms(head: str, terms: list[str], per_line: int = 8) -> list[str]:
    lines = []
    for i in range(0, len(terms), per_line):
        chunk = " ".join(terms[i : i + per_line])
        lines.append((head + " " if i == 0 else "   ") + chunk)
    return lines


def write_lp(model: MilpModel, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(lp_string(model))


_LP_TOKEN = re.compile(
    r"""
    (?P<rel><=|>=|=<|=>|==|=|:)
  | (?P<num>[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?|\.[0-9]+(?:[eE][+-]?[0-9]+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<sign>[+\-])
  | (?P<ws>\s+)
  | (?P<bad>.)
    """,
    re.VERBOSE,
)

_SECTIONS = {
    "minimize": "objective",
    "minimise": "objective",
    "min": "objective",
    "maximize": "objective_max",
    "maximise": "objective_max",
    "max": "objective_max",
    "subject": "rows",
    "such": "rows",
    "st": "rows",
    "s.t.": "rows",
    "bounds": "bounds",
    "bound": "bounds",
    "binary": "binary",
    "binaries": "binary",
    "bin": "binary",
    "general": "general",
    "generals": "general",
    "gen": "general",
    "end": "end",
}


def parse_lp(text: str) -> MilpModel:
    """Read the subset of CPLEX LP format produced by :func:`lp_string`.

    Also accepts maximize objectives (negated into minimize form),
    loose whitespace, and `name:` row labels (labels are not kept).
    """
    lines = [ln.split("\\", 1)[0] for ln in text.splitlines()]
    toks: list[tuple[str, str]] = []
    for ln in lines:
        for mm in _LP_TOKEN.finditer(ln):
            kind = mm.lastgroup
            if kind == "ws":
                continue
            if kind == "bad":
                raise MilpError(f"unexpected character {mm.group()!r} in LP text")
            toks.append((kind, mm.group()))

    # Partition into sections.
    section = None
    negate_obj = False
    chunks: dict[str, list[tuple[str, str]]] = {
        "objective": [], "rows": [], "bounds": [], "binary": []
    }
    i = 0
    while i < len(toks):
        kind, val = toks[i]
        low = val.lower()
        if kind == "name" and low in _SECTIONS:
            sec = _SECTIONS[low]
            if sec == "objective_max":
                sec, negate_obj = "objective", True
            if sec == "rows" and low in ("subject", "such"):
                i += 1  # swallow "to"/"that"
            if sec == "general":
                raise MilpError("general integer variables are not supported")
            if sec == "end":
                break
            section = sec
            i += 1
            continue
        if section is None:
            raise MilpError(f"token {val!r} before any section header")
        chunks[section].append((kind, val))
        i += 1

    names: list[str] = []
    index: dict[str, int] = {}

    def var(name: str) -> int:
        if name not in index:
            index[name] = len(names)
            names.append(name)
        return index[name]

    def parse_terms(seq, pos):
        """Linear expression starting at pos; returns (coefs, const, pos)."""
        coefs: dict[int, float] = {}
        const = 0.0
        while pos < len(seq):
            kind, val = seq[pos]
            if kind == "rel":
                break
            sign = 1.0
            while pos < len(seq) and seq[pos][0] == "sign":
                if seq[pos][1] == "-":
                    sign = -sign
                pos += 1
            if pos >= len(seq):
                break
            kind, val = seq[pos]
            if kind == "num":
                coef = sign * float(val)
                pos += 1
                if pos < len(seq) and seq[pos][0] == "name":
                    j = var(seq[pos][1])
                    coefs[j] = coefs.get(j, 0.0) + coef
                    pos += 1
                else:
                    const += coef
            elif kind == "name":
                j = var(val)
                coefs[j] = coefs.get(j, 0.0) + sign
                pos += 1
            else:
                raise MilpError(f"unexpected token {val!r} in linear expression")
        return coefs, const, pos

    # Objective: optional label, then terms.
    oseq = chunks["objective"]
    pos = 0
    if len(oseq) >= 2 and oseq[0][0] == "name" and oseq[1] == ("rel", ":"):
        pos = 2
    obj_coefs, _, pos = parse_terms(oseq, pos)
    if pos != len(oseq):
        raise MilpError("trailing tokens in objective")

    rows: list[tuple[dict[int, float], str, float]] = []
    rseq = chunks["rows"]
    pos = 0
    while pos < len(rseq):
        if (
            pos + 1 < len(rseq)
            and rseq[pos][0] == "name"
            and rseq[pos + 1] == ("rel", ":")
        ):
            pos += 2
        coefs, const, pos = parse_terms(rseq, pos)
        if pos >= len(rseq) or rseq[pos][0] != "rel":
            raise MilpError("constraint missing relation")
        rel = rseq[pos][1]
        rel = {"=<": "<=", "=>": ">=", "==": "="}.get(rel, rel)
        if rel == ":":
            raise MilpError("unexpected ':' in constraint body")
        pos += 1
        sign = 1.0
        while pos < len(rseq) and rseq[pos][0] == "sign":
            if rseq[pos][1] == "-":
                sign = -sign
            pos += 1
        if pos >= len(rseq) or rseq[pos][0] != "num":
            raise MilpError("constraint missing rhs")
        rhs = sign * float(rseq[pos][1]) - const
        pos += 1
        rows.append((coefs, rel, rhs))

    lbs: dict[int, float] = {}
    ubs: dict[int, float] = {}

    def bound_num(kind, val, sign=1.0):
        if kind == "num":
            return sign * float(val)
        if kind == "name" and val.lower() in ("inf", "infinity"):
            return sign * math.inf
        raise MilpError(f"bad bound token {val!r}")

    bseq = chunks["bounds"]
    pos = 0
    while pos < len(bseq):
        # forms: name free | name = v | name <= v | name >= v | lo <= name <= hi
        kind, val = bseq[pos]
        if kind == "name" and pos + 1 < len(bseq) and bseq[pos + 1] == ("name", "free"):
            j = var(val)
            lbs[j], ubs[j] = -math.inf, math.inf
            pos += 2
            continue
        if kind == "name" and val.lower() not in ("inf", "infinity"):
            if pos + 1 >= len(bseq) or bseq[pos + 1][0] != "rel":
                raise MilpError(f"unexpected token {val!r} in bounds")
            j = var(val)
            rel = bseq[pos + 1][1]
            rel = {"=<": "<=", "=>": ">="}.get(rel, rel)
            sign = 1.0
            p = pos + 2
            while p < len(bseq) and bseq[p][0] == "sign":
                if bseq[p][1] == "-":
                    sign = -sign
                p += 1
            v = bound_num(*bseq[p], sign)
            if rel == "<=":
                ubs[j] = v
            elif rel == ">=":
                lbs[j] = v
            elif rel in ("=", "=="):
                lbs[j] = ubs[j] = v
            else:
                raise MilpError(f"bad bound relation {rel!r}")
            pos = p + 1
            continue
        # numeric (or -infinity) first: lo <= name <= hi
        sign = 1.0
        while bseq[pos][0] == "sign":
            if bseq[pos][1] == "-":
                sign = -sign
            pos += 1
        lo = bound_num(*bseq[pos], sign)
        if bseq[pos + 1][1] not in ("<=", "=<"):
            raise MilpError("expected <= in two-sided bound")
        j = var(bseq[pos + 2][1])
        if bseq[pos + 3][1] not in ("<=", "=<"):
            raise MilpError("expected <= in two-sided bound")
        sign = 1.0
        p = pos + 4
        while p < len(bseq) and bseq[p][0] == "sign":
            if bseq[p][1] == "-":
                sign = -sign
            p += 1
        hi = bound_num(*bseq[p], sign)
        lbs[j], ubs[j] = lo, hi
        pos = p + 1

    binaries = set()
    for kind, val in chunks["binary"]:
        if kind != "name":
            raise MilpError(f"unexpected token {val!r} in binary section")
        binaries.add(var(val))

    # free names referenced nowhere else default to [0, inf) per LP rules
    b = ModelBuilder()
    for j, name in enumerate(names):
        lo = lbs.get(j, 0.0)
        hi = ubs.get(j, math.inf)
        b.add_var(name, lo, hi, binary=j in binaries)
    for coefs, rel, rhs in rows:
        b.add_constraint(coefs, rel, rhs)
    b.set_objective({j: (-c if negate_obj else c) for j, c in obj_coefs.items()})
    return b.build()


def same_model(a: MilpModel, b: MilpModel) -> bool:
    """Structural equality (names, order, bounds, rows, objective)."""
    if a.names != b.names:
        return False
    if not (
        np.array_equal(a.lb, b.lb)
        and np.array_equal(a.ub, b.ub)
        and np.array_equal(a.binary, b.binary)
        and np.array_equal(a.obj, b.obj)
    ):
        return False
    if len(a.rows) != len(b.rows):
        return False
    for (ia, ca, ra, ba_), (ib, cb, rb, bb_) in zip(a.rows, b.rows):
        if ra != rb or ba_ != bb_:
            return False
        if not (np.array_equal(ia, ib) and np.array_equal(ca, cb)):
            return False
    return True


# ---------------------------------------------------------------------------
# Big-M encoding of deterministic STL on the mean system


@dataclass
class EncodedStl:
    """Encoded model plus the variable maps needed to read it back.

    In substituted mode ``x_idx`` is empty; recover mean states with
    :func:`stlrisk.tightening.mean_rollout` from the solved controls.
    ``branch_groups`` lists the member binaries of each disjunction the
    root pins true; feeding them to :func:`solve_milp` lets it branch
    on whole choices instead of single binaries.
    """

    model: MilpModel
    x_idx: np.ndarray  # (N+1, n) variable indices of the mean states
    u_idx: np.ndarray  # (N, m) variable indices of the controls
    z_root: int
    n_binaries: int
    eps: float
    branch_groups: tuple[tuple[int, ...], ...] = ()


class StlEncoder:
    """Builds the mean-dynamics MILP and big-M formula constraints.

    One binary per (subformula, step) pair, shared through memoization;
    F/G (Until/Release with a literal left operand) encode as a single
    disjunction/conjunction over their window.  Satisfaction is
    enforced only downward from the pinned root (one-sided big-M on
    disjunctions), with atoms carrying both implication directions up
    to the strictness epsilon.

    With ``substitute_states=True`` the mean states never become
    variables: atoms are written over the stacked control response, the
    dynamics equality rows disappear, and big-M constants come from the
    control box.  Conjunction chains reachable from the root get their
    binaries pinned to 1 either way, so only genuine disjunction
    choices are left to branch on.

    Whenever finite bounds prove an atom's sign over the whole
    reachable box, its binary is pinned and its rows are dropped; the
    constant then propagates through parent connectives.  With
    ``one_sided=True`` only the implications needed for a pinned-true
    root survive (atom z=0 direction and the conjunction lower bound
    are dropped), which shrinks synthesis models; leave it off when z
    values must track truth both ways.
    """

    def __init__(
        self,
        sys: LtvSystem,
        x0,
        N: int,
        state_bounds=None,
        u_bounds=None,
        eps: float = STRICT_EPS,
        big_m: float = 1e4,
        substitute_states: bool = False,
        one_sided: bool = False,
    ) -> None:
        if not (0 <= N <= sys.horizon):
            raise SystemError_(f"window length {N} outside [0,{sys.horizon}]")
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.size != sys.n:
            raise SystemError_(f"x0 must have dimension {sys.n}")
        self.sys = sys
        self.x0 = x0
        self.N = int(N)
        self.eps = float(eps)
        self.big_m = float(big_m)
        self.substituted = bool(substitute_states)
        self.one_sided = bool(one_sided)
        self.builder = ModelBuilder()
        n, m = sys.n, sys.m
        if state_bounds is None:
            s_lo, s_hi = np.full(n, -math.inf), np.full(n, math.inf)
        else:
            s_lo = np.asarray(state_bounds[0], dtype=float).reshape(-1)
            s_hi = np.asarray(state_bounds[1], dtype=float).reshape(-1)
        if u_bounds is None:
            u_lo, u_hi = np.full(m, -math.inf), np.full(m, math.inf)
        else:
            u_lo = np.asarray(u_bounds[0], dtype=float).reshape(-1)
            u_hi = np.asarray(u_bounds[1], dtype=float).reshape(-1)
        self.state_lo, self.state_hi = s_lo, s_hi
        self.u_lo, self.u_hi = u_lo, u_hi

        if self.substituted:
            self.x_idx = np.empty((0, n), dtype=np.intp)
            self.u_idx = np.empty((N, m), dtype=np.intp)
            for k in range(N):
                for i in range(m):
                    self.u_idx[k, i] = self.builder.add_var(
                        f"u_{k}_{i}", u_lo[i], u_hi[i]
                    )
            # Affine response of each step: x_t = consts[t] + resp[t] @ u_stack.
            wbar = np.concatenate([sys.w_mean[k] for k in range(N)]) if N else np.empty(0)
            self._consts: list[np.ndarray] = [x0]
            self._resp: list[np.ndarray] = [np.zeros((n, 0))]
            for t in range(1, N + 1):
                G, H, L = stacked_dynamics(sys, t)
                self._consts.append(G @ x0 + L @ wbar[: t * n])
                self._resp.append(H)
        else:
            self.x_idx = np.empty((N + 1, n), dtype=np.intp)
            self.u_idx = np.empty((N, m), dtype=np.intp)
            for i in range(n):
                self.x_idx[0, i] = self.builder.add_var(f"x_0_{i}", x0[i], x0[i])
            for k in range(1, N + 1):
                for i in range(n):
                    self.x_idx[k, i] = self.builder.add_var(
                        f"x_{k}_{i}", s_lo[i], s_hi[i]
                    )
            for k in range(N):
                for i in range(m):
                    self.u_idx[k, i] = self.builder.add_var(
                        f"u_{k}_{i}", u_lo[i], u_hi[i]
                    )
            for k in range(N):
                A, B, wm = sys.A[k], sys.B[k], sys.w_mean[k]
                for i in range(n):
                    coeffs = {int(self.x_idx[k + 1, i]): 1.0}
                    for j in range(n):
                        if A[i, j] != 0.0:
                            jj = int(self.x_idx[k, j])
                            coeffs[jj] = coeffs.get(jj, 0.0) - A[i, j]
                    for j in range(m):
                        jj = int(self.u_idx[k, j])
                        if B[i, j] != 0.0:
                            coeffs[jj] = coeffs.get(jj, 0.0) - B[i, j]
                    self.builder.add_constraint(coeffs, "=", float(wm[i]))
        self._z_memo: dict[tuple[int, int], int] = {}
        self._anchor_memo: dict[tuple[int, int, int], int] = {}
        self._z_count = 0
        self.n_binaries = 0
        self._fixed_one: set[int] = set()
        self._fixed_zero: set[int] = set()
        self._or_nodes: list[tuple[int, tuple[int, ...]]] = []
        self._root: Formula | None = None

    def _new_z(self) -> int:
        idx = self.builder.add_var(f"z{self._z_count}", binary=True)
        self._z_count += 1
        self.n_binaries += 1
        return idx

    def _new_fixed_z(self, value: int) -> int:
        lo = hi = float(value)
        idx = self.builder.add_var(f"z{self._z_count}", lo, hi, binary=True)
        self._z_count += 1
        self.n_binaries += 1
        (self._fixed_one if value else self._fixed_zero).add(idx)
        return idx

    def state_terms(self, t: int, i: int) -> tuple[dict[int, float], float]:
        """Component i of the mean state at step t as (coeffs, const)."""
        if not self.substituted:
            return {int(self.x_idx[t, i]): 1.0}, 0.0
        row = self._resp[t][i]
        coeffs = {}
        flat = self.u_idx.reshape(-1)
        for k in range(row.size):
            if row[k] != 0.0:
                coeffs[int(flat[k])] = float(row[k])
        return coeffs, float(self._consts[t][i])

    def _value_terms(
        self, a: np.ndarray, b: float, tau: int
    ) -> tuple[dict[int, float], float, float, float]:
        """Atom value a.x_tau + b as (coeffs, const, lo, hi) where
        [lo, hi] bounds the value over the reachable box."""
        if self.substituted:
            row = a @ self._resp[tau]
            const = float(a @ self._consts[tau] + b)
            flat = self.u_idx.reshape(-1)
            coeffs = {
                int(flat[k]): float(row[k]) for k in range(row.size) if row[k] != 0.0
            }
            ulo = np.tile(self.u_lo, tau)
            uhi = np.tile(self.u_hi, tau)
            hi = const + float(np.sum(np.maximum(row * ulo, row * uhi)))
            lo = const + float(np.sum(np.minimum(row * ulo, row * uhi)))
        else:
            coeffs = {
                int(self.x_idx[tau, i]): float(a[i])
                for i in range(a.size)
                if a[i] != 0.0
            }
            const = float(b)
            if tau == 0:
                v = float(a @ self.x0 + b)
                lo = hi = v
            else:
                hi = const + float(
                    np.sum(np.maximum(a * self.state_lo, a * self.state_hi))
                )
                lo = const + float(
                    np.sum(np.minimum(a * self.state_lo, a * self.state_hi))
                )
        return coeffs, const, lo, hi

    def _encode_atom(self, a: np.ndarray, b: float, tau: int, strict: bool) -> int:
        coeffs, const, lo, hi = self._value_terms(a, b, tau)
        # A sign certified over the whole reachable box pins the binary
        # and needs no rows at all.
        eps_s = self.eps if strict else 0.0
        if math.isfinite(lo) and lo >= eps_s:
            return self._new_fixed_z(1)
        if math.isfinite(hi) and hi < 0.0:
            return self._new_fixed_z(0)
        z = self._new_z()
        # Reachable-box bounds give the tightest safe big-M per side; the
        # 1e-3 pad absorbs interval-arithmetic rounding.
        m_up = max(0.0, -lo) + 1e-3 if math.isfinite(lo) else self.big_m
        # z = 1 forces value >= 0 (or >= eps on the strict side).
        up = dict(coeffs)
        up[z] = -(m_up + eps_s)
        self.builder.add_constraint(up, ">=", -m_up - const)
        if not self.one_sided:
            # z = 0 forces value below the boundary.
            m_dn = max(0.0, hi) + self.eps + 1e-3 if math.isfinite(hi) else self.big_m
            dn = dict(coeffs)
            dn[z] = -m_dn
            self.builder.add_constraint(
                dn, "<=", -const - (0.0 if strict else self.eps)
            )
        return z

    def _zvar(self, f: Formula, tau: int) -> int:
        key = (id(f), tau)
        got = self._z_memo.get(key)
        if got is not None:
            return got
        if isinstance(f, TrueLiteral):
            z = self._new_fixed_z(1)
        elif isinstance(f, FalseLiteral):
            z = self._new_fixed_z(0)
        elif isinstance(f, Atom):
            a, b = f.pred.coeffs_at(tau)
            z = self._encode_atom(np.asarray(a, dtype=float), float(b), tau, strict=False)
        elif isinstance(f, NegAtom):
            a, b = f.pred.coeffs_at(tau)
            z = self._encode_atom(-np.asarray(a, dtype=float), -float(b), tau, strict=True)
        elif isinstance(f, And):
            z = self._and([self._zvar(c, tau) for c in f.children])
        elif isinstance(f, Or):
            z = self._or([self._zvar(c, tau) for c in f.children])
        elif isinstance(f, Release) and isinstance(f.left, FalseLiteral):
            z = self._and([self._zvar(f.right, tau + i) for i in range(f.start, f.end + 1)])
        elif isinstance(f, Until) and isinstance(f.left, TrueLiteral):
            z = self._or([self._zvar(f.right, tau + i) for i in range(f.start, f.end + 1)])
        elif isinstance(f, Until):
            anchors = []
            for i in range(f.start, f.end + 1):
                kids = [self._zvar(f.right, tau + i)]
                kids += [self._zvar(f.left, tau + j) for j in range(i + 1)]
                anchors.append(self._and(kids))
                self._anchor_memo[(id(f), tau, i)] = anchors[-1]
            z = self._or(anchors)
        elif isinstance(f, Release):
            anchors = []
            for i in range(f.start, f.end + 1):
                kids = [self._zvar(f.right, tau + i)]
                kids += [self._zvar(f.left, tau + j) for j in range(i + 1)]
                anchors.append(self._or(kids))
                self._anchor_memo[(id(f), tau, i)] = anchors[-1]
            z = self._and(anchors)
        else:
            raise FormulaError(f"cannot encode node {type(f).__name__}")
        self._z_memo[key] = z
        return z

    def _and(self, kids: list[int]) -> int:
        if any(zc in self._fixed_zero for zc in kids):
            return self._new_fixed_z(0)
        live = list(dict.fromkeys(zc for zc in kids if zc not in self._fixed_one))
        if not live:
            return self._new_fixed_z(1)
        z = self._new_z()
        for zc in live:
            self.builder.add_constraint({z: 1.0, zc: -1.0}, "<=", 0.0)
        if not self.one_sided:
            coeffs = {zc: 1.0 for zc in live}
            coeffs[z] = coeffs.get(z, 0.0) - 1.0
            self.builder.add_constraint(coeffs, "<=", float(len(live) - 1))
        return z

    def _or(self, kids: list[int]) -> int:
        if any(zc in self._fixed_one for zc in kids):
            return self._new_fixed_z(1)
        live = list(dict.fromkeys(zc for zc in kids if zc not in self._fixed_zero))
        if not live:
            return self._new_fixed_z(0)
        z = self._new_z()
        coeffs: dict[int, float] = {}
        for zc in live:
            coeffs[zc] = coeffs.get(zc, 0.0) - 1.0
        coeffs[z] = coeffs.get(z, 0.0) + 1.0
        self.builder.add_constraint(coeffs, "<=", 0.0)
        self._or_nodes.append((z, tuple(live)))
        return z

    def _force_true(self, f: Formula, tau: int) -> None:
        """Pin to 1 every binary that a satisfied root already implies.

        Conjunction structure (And, and Release/G over its window)
        propagates necessity; disjunction choices stay free.  A forced
        FALSE literal is left at 0 so the model goes infeasible rather
        than silently flipping the literal.
        """
        if isinstance(f, FalseLiteral):
            return
        z = self._z_memo.get((id(f), tau))
        if z is not None:
            self.builder.fix_var(z, 1.0)
        if isinstance(f, And):
            for c in f.children:
                self._force_true(c, tau)
        elif isinstance(f, Release) and isinstance(f.left, FalseLiteral):
            for i in range(f.start, f.end + 1):
                self._force_true(f.right, tau + i)

    def encode(self, f: Formula) -> int:
        if not is_nnf(f):
            raise FormulaError("encoding requires an NNF formula")
        if horizon(f) > self.N:
            raise FormulaError(
                f"formula horizon {horizon(f)} exceeds window length {self.N}"
            )
        z_root = self._zvar(f, 0)
        self.builder.add_constraint({z_root: 1.0}, "=", 1.0)
        self._force_true(f, 0)
        self._root = f
        return z_root

    def pattern_bounds(self, model, traj):
        """Bounds freezing the discrete choices that traj suggests.

        traj is a candidate mean trajectory, (N+1, n).  Every node the
        formula requires is pinned true whether or not traj currently
        achieves it (the continuous variables get to repair that);
        traj only arbitrates disjunctions, where the member with the
        largest margin becomes the witness.  All remaining binaries are
        pinned to 0, so the model turns into an LP whose feasible
        solutions are genuine incumbents.  Returns None when a required
        node was already pinned false, i.e. no repair exists.
        """
        if self._root is None:
            raise MilpError("encode() must run before pattern_bounds()")
        lb, ub = model.lb.copy(), model.ub.copy()
        traj = np.asarray(traj, dtype=float)
        if not self._pin_witness(self._root, 0, traj, {}, lb, ub):
            return None
        bins = model.binary_indices
        rest = bins[(lb[bins] < 0.5) & (ub[bins] > 0.5)]
        ub[rest] = 0.0
        return lb, ub

    def _require(self, z: int | None, lb, ub) -> bool:
        if z is None:
            return True
        if ub[z] < 0.5:
            return False
        lb[z] = 1.0
        ub[z] = 1.0
        return True

    def _pin_witness(self, f: Formula, tau: int, traj, memo, lb, ub) -> bool:
        """Pin this node true, choosing disjunction witnesses by margin."""
        if not self._require(self._z_memo.get((id(f), tau)), lb, ub):
            return False
        if isinstance(f, (TrueLiteral, FalseLiteral, Atom, NegAtom)):
            return not isinstance(f, FalseLiteral)
        if isinstance(f, And):
            return all(self._pin_witness(c, tau, traj, memo, lb, ub) for c in f.children)
        if isinstance(f, Or):
            best = max(f.children, key=lambda c: self._margin(c, tau, traj, memo))
            return self._pin_witness(best, tau, traj, memo, lb, ub)
        if isinstance(f, Release) and isinstance(f.left, FalseLiteral):
            return all(
                self._pin_witness(f.right, tau + i, traj, memo, lb, ub)
                for i in range(f.start, f.end + 1)
            )
        if isinstance(f, Until) and isinstance(f.left, TrueLiteral):
            best = max(
                range(f.start, f.end + 1),
                key=lambda i: self._margin(f.right, tau + i, traj, memo),
            )
            return self._pin_witness(f.right, tau + best, traj, memo, lb, ub)
        if isinstance(f, Until):
            best = max(
                range(f.start, f.end + 1),
                key=lambda i: min(
                    self._margin(f.right, tau + i, traj, memo),
                    min(
                        (self._margin(f.left, tau + j, traj, memo) for j in range(i + 1)),
                        default=math.inf,
                    ),
                ),
            )
            if not self._require(self._anchor_memo.get((id(f), tau, best)), lb, ub):
                return False
            if not self._pin_witness(f.right, tau + best, traj, memo, lb, ub):
                return False
            return all(
                self._pin_witness(f.left, tau + j, traj, memo, lb, ub)
                for j in range(best + 1)
            )
        if isinstance(f, Release):
            for i in range(f.start, f.end + 1):
                if not self._require(self._anchor_memo.get((id(f), tau, i)), lb, ub):
                    return False
                cands = [(self._margin(f.right, tau + i, traj, memo), f.right, tau + i)]
                cands += [
                    (self._margin(f.left, tau + j, traj, memo), f.left, tau + j)
                    for j in range(i + 1)
                ]
                _, g, t = max(cands, key=lambda c: c[0])
                if not self._pin_witness(g, t, traj, memo, lb, ub):
                    return False
            return True
        raise FormulaError(f"cannot pin node {type(f).__name__}")

    def _margin(self, f: Formula, tau: int, traj, memo) -> float:
        """Quantitative satisfaction of f at (traj, tau); min/max semantics."""
        key = (id(f), tau)
        got = memo.get(key)
        if got is not None:
            return got
        if isinstance(f, TrueLiteral):
            got = math.inf
        elif isinstance(f, FalseLiteral):
            got = -math.inf
        elif isinstance(f, Atom):
            a, b = f.pred.coeffs_at(tau)
            got = float(np.dot(a, traj[tau])) + float(b)
        elif isinstance(f, NegAtom):
            a, b = f.pred.coeffs_at(tau)
            got = -(float(np.dot(a, traj[tau])) + float(b))
        elif isinstance(f, And):
            got = min(self._margin(c, tau, traj, memo) for c in f.children)
        elif isinstance(f, Or):
            got = max(self._margin(c, tau, traj, memo) for c in f.children)
        elif isinstance(f, Until):
            got = max(
                min(
                    self._margin(f.right, tau + i, traj, memo),
                    min(
                        (self._margin(f.left, tau + j, traj, memo) for j in range(i + 1)),
                        default=math.inf,
                    ),
                )
                for i in range(f.start, f.end + 1)
            )
        elif isinstance(f, Release):
            got = min(
                max(
                    self._margin(f.right, tau + i, traj, memo),
                    max(
                        (self._margin(f.left, tau + j, traj, memo) for j in range(i + 1)),
                        default=-math.inf,
                    ),
                )
                for i in range(f.start, f.end + 1)
            )
        else:
            raise FormulaError(f"cannot evaluate node {type(f).__name__}")
        memo[key] = got
        return got

    def branch_groups(self) -> tuple[tuple[int, ...], ...]:
        """Member binaries of every disjunction pinned true by the root.

        Each such group must contain a true member in any feasible
        solution, so a solver may branch over which member holds.
        """
        return tuple(
            kids for z, kids in self._or_nodes if self.builder._lb[z] >= 0.5
        )


def encode_deterministic_stl(
    f: Formula,
    sys: LtvSystem,
    x0,
    N: int | None = None,
    state_bounds=None,
    u_bounds=None,
    eps: float = STRICT_EPS,
    big_m: float = 1e4,
    substitute_states: bool = False,
) -> EncodedStl:
    """Feasibility MILP: mean dynamics from x0 plus big-M STL rows.

    N defaults to the formula horizon.  The objective is zero; callers
    wanting costs should drive :class:`StlEncoder` directly.
    """
    if N is None:
        N = horizon(f)
    enc = StlEncoder(
        sys, x0, N, state_bounds, u_bounds, eps, big_m,
        substitute_states=substitute_states,
    )
    z_root = enc.encode(f)
    return EncodedStl(
        model=enc.builder.build(),
        x_idx=enc.x_idx,
        u_idx=enc.u_idx,
        z_root=z_root,
        n_binaries=enc.n_binaries,
        eps=eps,
        branch_groups=enc.branch_groups(),
    )
