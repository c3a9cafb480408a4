"""Mean/deviation reformulation and risk-margin predicate tightening."""

import math

import numpy as np
import pytest
from helpers import random_formula, random_predicate, random_system

from stlrisk import (
    AffinePredicate,
    And,
    Atom,
    FormulaError,
    LtvSystem,
    NegAtom,
    PredicateSchedule,
    RiskError,
    RiskLeaf,
    Run,
    TightenedPredicate,
    Until,
    decompose,
    drvar_violation_prob,
    mean_rollout,
    prediction_covariance,
    prediction_covariances,
    satisfies,
    stacked_dynamics,
    tighten_formula,
    tighten_predicate,
    to_nnf,
    transition_matrix,
    tree_leaves,
)
from stlrisk.semantics import ALWAYS_FALSE, ALWAYS_TRUE, RiskAnd, RiskOr
from stlrisk.tightening import SystemError_, describe_tightened


def _ltv(rng, n, m, horizon):
    """Time-varying system with distinct per-step matrices."""
    A = rng.normal(size=(horizon, n, n)) * 0.6
    B = rng.normal(size=(horizon, n, m))
    w_mean = rng.normal(size=n) * 0.02
    R = rng.normal(size=(n, n)) * 0.15
    return LtvSystem(A=A, B=B, w_mean=w_mean, w_cov=R @ R.T + 1e-4 * np.eye(n), horizon=horizon)


# ---------------------------------------------------------------------------
# System container and rollouts


def test_system_validation():
    with pytest.raises(SystemError_):
        LtvSystem(A=np.eye(2), B=np.zeros((2, 1)), horizon=0)
    with pytest.raises(SystemError_):
        LtvSystem(A=np.zeros((2, 3)), B=np.zeros((2, 1)))
    with pytest.raises(SystemError_):
        LtvSystem(A=np.eye(2), B=np.zeros((3, 1)))
    with pytest.raises(SystemError_):
        LtvSystem(A=np.eye(2), B=np.zeros((2, 1)), w_cov=-np.eye(2))
    with pytest.raises(SystemError_):
        LtvSystem(A=np.eye(2), B=np.zeros((2, 1)), w_mean=np.zeros(3))


def test_system_broadcasting():
    sys = LtvSystem(A=np.eye(2) * 0.5, B=np.ones((2, 1)), horizon=4)
    assert len(sys.A) == 4 and len(sys.B) == 4 and len(sys.w_cov) == 4
    assert sys.n == 2 and sys.m == 1
    np.testing.assert_array_equal(sys.w_mean[2], np.zeros(2))


def test_transition_matrix_order():
    # time-varying product must apply later matrices on the left
    rng = np.random.default_rng(20)
    sys = _ltv(rng, 3, 1, 4)
    np.testing.assert_array_equal(transition_matrix(sys, 2, 2), np.eye(3))
    expect = sys.A[2] @ sys.A[1]
    np.testing.assert_allclose(transition_matrix(sys, 3, 1), expect, atol=1e-14)
    with pytest.raises(SystemError_):
        transition_matrix(sys, 1, 2)
    with pytest.raises(SystemError_):
        transition_matrix(sys, 5, 0)


def test_stacked_dynamics_match_iteration():
    """G x0 + H u + L w reproduces the step-by-step rollout exactly."""
    rng = np.random.default_rng(21)
    for _ in range(25):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        N = int(rng.integers(1, 6))
        sys = _ltv(rng, n, m, N)
        x0 = rng.normal(size=n)
        u = rng.normal(size=(N, m))
        w = rng.normal(size=(N, n)) + np.array(sys.w_mean)
        # realized iteration
        xs = [x0]
        for k in range(N):
            xs.append(sys.A[k] @ xs[-1] + sys.B[k] @ u[k] + w[k])
        for t in range(N + 1):
            G, H, L = stacked_dynamics(sys, t)
            assert G.shape == (n, n) and H.shape == (n, t * m) and L.shape == (n, t * n)
            got = G @ x0 + H @ u[:t].ravel() + L @ w[:t].ravel()
            np.testing.assert_allclose(got, xs[t], atol=1e-12)


def test_mean_rollout_matches_stacked_mean():
    rng = np.random.default_rng(22)
    for _ in range(15):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        N = int(rng.integers(1, 6))
        sys = _ltv(rng, n, m, N)
        x0 = rng.normal(size=n)
        u = rng.normal(size=(N, m))
        traj = mean_rollout(sys, x0, u)
        assert traj.shape == (N + 1, n)
        wbar = np.array(sys.w_mean)
        for t in range(N + 1):
            G, H, L = stacked_dynamics(sys, t)
            expect = G @ x0 + H @ u[:t].ravel() + L @ wbar[:t].ravel()
            np.testing.assert_allclose(traj[t], expect, atol=1e-12)


def test_mean_rollout_validation():
    sys = LtvSystem(A=np.eye(2), B=np.ones((2, 1)), horizon=3)
    with pytest.raises(SystemError_):
        mean_rollout(sys, np.zeros(3), np.zeros((3, 1)))
    with pytest.raises(SystemError_):
        mean_rollout(sys, np.zeros(2), np.zeros((3, 2)))
    with pytest.raises(SystemError_):
        mean_rollout(sys, np.zeros(2), np.zeros((4, 1)))
    traj = mean_rollout(sys, np.zeros(2), np.zeros((0, 1)))
    assert traj.shape == (1, 2)


def test_prediction_covariance_matches_stacked_form():
    """Recursion equals L blockdiag(Sigma_W) L' for every step."""
    rng = np.random.default_rng(23)
    for _ in range(15):
        n = int(rng.integers(1, 4))
        N = int(rng.integers(1, 6))
        sys = _ltv(rng, n, 1, N)
        covs = prediction_covariances(sys)
        assert len(covs) == N + 1
        np.testing.assert_array_equal(covs[0], np.zeros((n, n)))
        block = np.zeros((N * n, N * n))
        for k in range(N):
            block[k * n : (k + 1) * n, k * n : (k + 1) * n] = sys.w_cov[k]
        for t in range(N + 1):
            _, _, L = stacked_dynamics(sys, t)
            expect = L @ block[: t * n, : t * n] @ L.T
            np.testing.assert_allclose(covs[t], expect, atol=1e-12)
        np.testing.assert_array_equal(prediction_covariance(sys, N), covs[N])


# ---------------------------------------------------------------------------
# Single-predicate tightening


def test_margin_factor_values():
    # sqrt((1-delta)/delta): 0.5 -> 1, 0.1 -> 3
    sys = LtvSystem(A=np.eye(1), B=np.ones((1, 1)), w_cov=np.eye(1), horizon=2)
    p = AffinePredicate([1.0], 0.0)
    tp = tighten_predicate(sys, p, "-", 1, 0.5)
    assert tp.margin == pytest.approx(1.0)
    tp = tighten_predicate(sys, p, "-", 1, 0.1)
    assert tp.margin == pytest.approx(3.0)
    with pytest.raises(RiskError):
        tighten_predicate(sys, p, "-", 1, 0.0)
    with pytest.raises(RiskError):
        tighten_predicate(sys, p, "-", 1, 1.0)
    with pytest.raises(SystemError_):
        tighten_predicate(sys, AffinePredicate([1.0, 0.0], 0.0), "-", 1, 0.5)


def test_scalar_margin_hand_case():
    # variance a' cov a = 0.09 at step 1, delta 0.5: margin 0.3
    sys = LtvSystem(
        A=np.eye(2), B=np.zeros((2, 1)), w_cov=np.diag([0.09, 4.0]), horizon=1
    )
    p = AffinePredicate([1.0, 0.0], -2.0)
    tp = tighten_predicate(sys, p, "-", 1, 0.5)
    assert tp.margin == pytest.approx(0.3, abs=1e-12)
    m = tp.mean_pred()
    np.testing.assert_allclose(m.a, [1.0, 0.0])
    assert m.b == pytest.approx(-2.3)
    assert tp.holds([2.3, 0.0]) and not tp.holds([2.299, 0.0])
    # '+' sign flips the predicate and pushes the margin the other way
    tn = tighten_predicate(sys, p, "+", 1, 0.5)
    m = tn.mean_pred()
    np.testing.assert_allclose(m.a, [-1.0, 0.0])
    assert m.b == pytest.approx(2.0 - 0.3)
    assert tn.holds([1.7, 0.0]) and not tn.holds([1.701, 0.0])


def test_boundary_sits_exactly_on_violation_probability():
    """A mean on the tightened boundary has worst-case violation = delta."""
    rng = np.random.default_rng(24)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        p = random_predicate(rng, n)
        R = rng.normal(size=(n, n))
        cov = R @ R.T + 1e-6 * np.eye(n)
        delta = float(rng.uniform(0.02, 0.98))
        sigma = math.sqrt(float(p.a @ cov @ p.a))
        margin = math.sqrt((1 - delta) / delta) * sigma
        # sign '-': predicate value at the tightened boundary
        prob = drvar_violation_prob(-margin, sigma * sigma)
        assert prob == pytest.approx(delta, abs=1e-9)


def test_tightened_holds_iff_violation_bounded():
    """Off the boundary, holds() agrees with the worst-case probability."""
    rng = np.random.default_rng(25)
    checked = 0
    for _ in range(300):
        n = int(rng.integers(1, 4))
        sys = _ltv(rng, n, 1, 3)
        p = random_predicate(rng, n)
        delta = float(rng.uniform(0.05, 0.95))
        t = int(rng.integers(1, 4))
        xbar = rng.normal(size=n) * 2
        cov = prediction_covariance(sys, t)
        var = float(p.a @ cov @ p.a)
        value = float(p.a @ xbar + p.b)
        for sign, viol_mean in (("-", -value), ("+", value)):
            tp = tighten_predicate(sys, p, sign, t, delta)
            if abs(abs(value) - tp.margin) < 1e-7:
                continue
            ok = tp.holds(xbar)
            prob = drvar_violation_prob(viol_mean, var)
            assert ok == (prob <= delta)
            checked += 1
    assert checked > 400


# ---------------------------------------------------------------------------
# Formula-level tightening


def test_reach_avoid_tightening_structure():
    """p1 U (p2 and not p3) keeps its shape with signs (-, -, +)."""
    rng = np.random.default_rng(26)
    sys = random_system(rng, n=2, m=1, horizon=6)
    p1, p2, p3 = (random_predicate(rng, 2) for _ in range(3))
    f = Until(3, 5, Atom(p1), And((Atom(p2), NegAtom(p3))))
    tf = tighten_formula(f, sys, 0.3)
    assert isinstance(tf, Until) and (tf.start, tf.end) == (3, 5)
    assert isinstance(tf.left, Atom) and isinstance(tf.left.pred, PredicateSchedule)
    assert tf.left.pred.base is p1 and tf.left.pred.sign == "-"
    assert isinstance(tf.right, And) and len(tf.right.children) == 2
    s2, s3 = (c.pred for c in tf.right.children)
    assert (s2.base, s2.sign) == (p2, "-")
    assert (s3.base, s3.sign) == (p3, "+")
    # every atom is positive after tightening; negation lives in the sign
    assert all(isinstance(c, Atom) for c in tf.right.children)


def test_tighten_formula_validation():
    rng = np.random.default_rng(27)
    sys = random_system(rng, n=2, m=1, horizon=4)
    p = random_predicate(rng, 2)
    from stlrisk import Not

    with pytest.raises(FormulaError):
        tighten_formula(Not(Atom(p)), sys, 0.3)
    with pytest.raises(RiskError):
        tighten_formula(Atom(p), sys, {})
    with pytest.raises(SystemError_):
        tighten_formula(Atom(random_predicate(rng, 3)), sys, 0.3)
    with pytest.raises(SystemError_):
        tighten_formula(Atom(p), sys, 0.3, saturation_step=9)


def test_zero_covariance_margins_vanish():
    rng = np.random.default_rng(28)
    sys = random_system(rng, n=2, m=1, horizon=5, noisy=False)
    f = to_nnf(random_formula(rng, dim=2, depth=3))
    tf = tighten_formula(f, sys, 0.2)

    def schedules(g):
        if isinstance(g, Atom) and isinstance(g.pred, PredicateSchedule):
            yield g.pred
        for c in getattr(g, "children", ()) or ():
            yield from schedules(c)
        for side in ("left", "right"):
            c = getattr(g, side, None)
            if c is not None:
                yield from schedules(c)

    found = list(schedules(tf))
    assert found
    for s in found:
        np.testing.assert_array_equal(s.margins, np.zeros(6))
    # with zero margins the tightened formula is the original in disguise
    x0 = rng.normal(size=2)
    u = rng.normal(size=(5, 1))
    run = Run(mean_rollout(sys, x0, u))
    from stlrisk import horizon as fh

    if fh(f) <= 5:
        assert satisfies(run, 0, tf) == satisfies(run, 0, f)


def test_margins_nondecreasing_under_identity_dynamics():
    # A = I accumulates covariance, so margins can only grow with t
    rng = np.random.default_rng(29)
    R = rng.normal(size=(2, 2)) * 0.2
    sys = LtvSystem(
        A=np.eye(2), B=np.ones((2, 1)), w_cov=R @ R.T + 1e-5 * np.eye(2), horizon=6
    )
    p = random_predicate(rng, 2)
    tf = tighten_formula(Atom(p), sys, 0.25)
    margins = tf.pred.margins
    assert margins[0] == 0.0
    assert np.all(np.diff(margins) > 0)


def test_saturation_clamps_schedule():
    rng = np.random.default_rng(30)
    sys = LtvSystem(
        A=np.eye(2), B=np.ones((2, 1)), w_cov=0.1 * np.eye(2), horizon=6
    )
    p = random_predicate(rng, 2)
    tf = tighten_formula(Atom(p), sys, 0.25, saturation_step=3)
    margins = tf.pred.margins
    assert np.all(np.diff(margins[:4]) > 0)
    np.testing.assert_array_equal(margins[3:], margins[3])
    full = tighten_formula(Atom(p), sys, 0.25).pred.margins
    np.testing.assert_allclose(margins[:4], full[:4])


def test_schedule_time_dispatch():
    sys = LtvSystem(A=np.eye(1), B=np.ones((1, 1)), w_cov=np.eye(1), horizon=3)
    p = AffinePredicate([1.0], -1.0, label="gate")
    tf = tighten_formula(Atom(p), sys, 0.5)
    sched = tf.pred
    assert sched.label == "gate"
    for t in range(4):
        a, b = sched.coeffs_at(t)
        assert b == pytest.approx(-1.0 - math.sqrt(t))
        tp = sched.at(t)
        assert isinstance(tp, TightenedPredicate)
        assert tp.margin == pytest.approx(math.sqrt(t))
    with pytest.raises(FormulaError):
        sched.margin_at(4)
    with pytest.raises(FormulaError):
        sched.margin_at(-1)


def test_delta_map_reaches_schedules():
    rng = np.random.default_rng(31)
    sys = random_system(rng, n=2, m=1, horizon=4)
    p1 = random_predicate(rng, 2)
    p2 = random_predicate(rng, 2)
    tf = tighten_formula(And((Atom(p1), NegAtom(p2))), sys, {p1: 0.1, p2: 0.4})
    s1, s2 = (c.pred for c in tf.children)
    assert (s1.delta, s2.delta) == (0.1, 0.4)
    # same base covariance, smaller delta, strictly larger margins
    assert np.all(s1.margins[1:] / np.linalg.norm(s1.base.a) > 0)


def test_describe_tightened_shows_signs():
    rng = np.random.default_rng(32)
    sys = random_system(rng, n=2, m=1, horizon=6)
    p1 = AffinePredicate(rng.normal(size=2), 0.0, label="keep")
    p2 = AffinePredicate(rng.normal(size=2), 0.0, label="ban")
    f = Until(3, 5, Atom(p1), And((Atom(p1), NegAtom(p2))))
    text = describe_tightened(tighten_formula(f, sys, 0.3))
    assert "keep~-" in text and "ban~+" in text and "U[3,5]" in text


def test_mean_trajectory_decides_decomposed_risk():
    """Tightened satisfaction == per-leaf worst-case checks on the mean.

    Valid without saturation and away from constraint boundaries.
    """
    rng = np.random.default_rng(33)
    agree = 0
    outcomes = {True: 0, False: 0}
    trials = 0
    while agree < 120 and trials < 600:
        trials += 1
        n = 2
        sys = _ltv(rng, n, 1, 6)
        f = to_nnf(random_formula(rng, dim=n, depth=3))
        from stlrisk import horizon as fh

        if fh(f) > 6:
            continue
        deltas = {}

        def assign(g):
            if isinstance(g, (Atom, NegAtom)):
                deltas.setdefault(g.pred, float(rng.uniform(0.08, 0.6)))
            for c in getattr(g, "children", ()) or ():
                assign(c)
            for side in ("left", "right"):
                c = getattr(g, side, None)
                if c is not None:
                    assign(c)

        assign(f)
        x0 = rng.normal(size=n)
        u = rng.normal(size=(6, 1))
        xbar = mean_rollout(sys, x0, u)
        covs = prediction_covariances(sys)
        tree = decompose(f, 0, deltas)
        if tree is ALWAYS_TRUE or tree is ALWAYS_FALSE:
            continue

        near_boundary = False

        def leaf_ok(lf: RiskLeaf) -> bool:
            nonlocal near_boundary
            value = float(lf.pred.a @ xbar[lf.time] + lf.pred.b)
            var = float(lf.pred.a @ covs[lf.time] @ lf.pred.a)
            margin = math.sqrt((1 - lf.delta) / lf.delta * var)
            if abs(abs(value) - margin) < 1e-7:
                near_boundary = True
            viol_mean = -value if lf.sign == "-" else value
            return drvar_violation_prob(viol_mean, var) <= lf.delta

        def fold(node) -> bool:
            if isinstance(node, RiskLeaf):
                return leaf_ok(node)
            if isinstance(node, RiskAnd):
                return all(fold(c) for c in node.children)
            if isinstance(node, RiskOr):
                return any(fold(c) for c in node.children)
            return node is ALWAYS_TRUE

        want = fold(tree)
        if near_boundary:
            continue
        tf = tighten_formula(f, sys, deltas)
        got = satisfies(Run(xbar), 0, tf)
        assert got == want
        agree += 1
        outcomes[got] += 1
    assert agree >= 120
    assert min(outcomes.values()) > 15
