"""Ensemble risk semantics, decomposition trees, threshold equivalence."""

import numpy as np
import pytest
from helpers import random_formula, random_predicate

from stlrisk import (
    AffinePredicate,
    And,
    Atom,
    Ensemble,
    FalseLiteral,
    FormulaError,
    NegAtom,
    Not,
    Or,
    RiskAnd,
    RiskError,
    RiskLeaf,
    RiskOr,
    RiskSpec,
    Run,
    TrueLiteral,
    Until,
    decompose,
    evaluate_tree,
    horizon,
    robustness,
    stl_risk,
    to_nnf,
    tree_leaves,
)
from stlrisk.semantics import ALWAYS_FALSE, ALWAYS_TRUE

SAMPLING_SPECS = (
    RiskSpec("expectation"),
    RiskSpec("worst_case"),
    RiskSpec("mean_variance", weight=0.7),
    RiskSpec("var", level=0.3),
    RiskSpec("cvar", level=0.3),
    RiskSpec("evar", level=0.3),
)


def _ensemble(rng, dim, length, m, scale=1.0):
    return Ensemble(rng.normal(size=(m, length, dim)) * scale)


# ---------------------------------------------------------------------------
# Ensemble container


def test_ensemble_validation():
    with pytest.raises(FormulaError):
        Ensemble(np.zeros((0, 3, 2)))
    with pytest.raises(FormulaError):
        Ensemble(np.zeros((2, 0, 2)))
    with pytest.raises(FormulaError):
        Ensemble(np.zeros(5))
    e = Ensemble(np.zeros((4, 3)))  # scalar states get a unit last axis
    assert e.size == 4 and e.steps == 2 and e.states.shape == (4, 3, 1)


def test_ensemble_window_and_sampling():
    arr = np.arange(24, dtype=float).reshape(2, 4, 3)
    e = Ensemble(arr, start=5)
    assert e.end == 8
    np.testing.assert_array_equal(e.state_sample(5), arr[:, 0])
    np.testing.assert_array_equal(e.state_sample(8), arr[:, 3])
    with pytest.raises(FormulaError):
        e.state_sample(4)
    with pytest.raises(FormulaError):
        e.state_sample(9)


# ---------------------------------------------------------------------------
# Risk value of a formula


def test_atom_risk_is_measure_of_negated_margin():
    p = AffinePredicate([1.0], -1.0)
    e = Ensemble(np.array([[[2.0]], [[4.0]]]))
    assert stl_risk(e, 0, Atom(p), RiskSpec("expectation")) == pytest.approx(-2.0)
    assert stl_risk(e, 0, NegAtom(p), RiskSpec("expectation")) == pytest.approx(2.0)
    assert stl_risk(e, 0, Atom(p), RiskSpec("worst_case")) == pytest.approx(-1.0)


def test_risk_input_validation():
    p = AffinePredicate([1.0], 0.0)
    e = Ensemble(np.zeros((2, 3, 1)))
    with pytest.raises(RiskError):
        stl_risk(e, 0, Atom(p), RiskSpec("drvar", level=0.3))
    with pytest.raises(FormulaError):
        stl_risk(e, 0, Not(Atom(p)), RiskSpec("expectation"))
    with pytest.raises(FormulaError):
        stl_risk(e, 0, Until(0, 3, Atom(p), Atom(p)), RiskSpec("expectation"))
    with pytest.raises(FormulaError):
        stl_risk(e, 3, Atom(p), RiskSpec("expectation"))


def test_duality_single_run():
    """With one member every tail measure collapses onto -robustness."""
    rng = np.random.default_rng(10)
    specs = (RiskSpec("expectation"), RiskSpec("worst_case"), RiskSpec("cvar", level=0.3))
    for spec in specs:
        for _ in range(100):
            f = to_nnf(random_formula(rng, dim=2, depth=3))
            length = horizon(f) + int(rng.integers(1, 4))
            x = rng.normal(size=(length, 2)) * 2
            risk = stl_risk(Ensemble(x[None]), 0, f, spec)
            rob = robustness(Run(x), 0, f)
            assert risk == pytest.approx(-rob, abs=1e-12)


def test_until_risk_hand_case():
    # members (x0, x1): (1, 1.5) and (3, 0.5); left x >= 0, right x <= 2.
    # atom risks (expectation): left@0 -2, left@1 -1, right@0 0, right@1 -1;
    # anchors give max(0, -2) = 0 and max(-1, -2, -1) = -1, so risk -1.
    # Note this is not the mean of per-member robustness (-0.75): atoms
    # aggregate across members before the min/max recursion.
    p = AffinePredicate([1.0], 0.0)
    q = AffinePredicate([-1.0], 2.0)
    x1 = np.array([[1.0], [1.5]])
    x2 = np.array([[3.0], [0.5]])
    e = Ensemble(np.stack([x1, x2]))
    f = Until(0, 1, Atom(p), Atom(q))
    assert stl_risk(e, 0, f, RiskSpec("expectation")) == pytest.approx(-1.0)
    assert stl_risk(e, 0, f, RiskSpec("worst_case")) == pytest.approx(-0.5)
    assert (-robustness(Run(x1), 0, f) - robustness(Run(x2), 0, f)) / 2 == -0.75


def test_risk_not_samplewise():
    # operators combine member-aggregated risks, not per-member margins:
    # expectation of an Or can be lower than both runs' own robustness
    p = AffinePredicate([1.0], 0.0)
    q = AffinePredicate([-1.0], 0.0)
    e = Ensemble(np.array([[[4.0]], [[-4.0]]]))
    f = Or((Atom(p), Atom(q)))
    # each member satisfies one disjunct with margin 4, fails the other
    assert stl_risk(e, 0, f, RiskSpec("expectation")) == pytest.approx(0.0)
    assert stl_risk(e, 0, f, RiskSpec("worst_case")) == pytest.approx(4.0)


def test_risk_monotone_in_measure():
    rng = np.random.default_rng(11)
    lo = RiskSpec("cvar", level=0.6)
    hi = RiskSpec("cvar", level=0.2)
    top = RiskSpec("worst_case")
    for _ in range(60):
        f = to_nnf(random_formula(rng, dim=2, depth=3))
        e = _ensemble(rng, 2, horizon(f) + 2, int(rng.integers(2, 12)))
        assert (
            stl_risk(e, 0, f, lo)
            <= stl_risk(e, 0, f, hi) + 1e-9
            <= stl_risk(e, 0, f, top) + 2e-9
        )


# ---------------------------------------------------------------------------
# Decomposition trees


def _leaf_set(node):
    return {(lf.pred, lf.sign, lf.time) for lf in tree_leaves(node)}


def test_decompose_atom_signs():
    p = random_predicate(np.random.default_rng(0), 2)
    t = decompose(Atom(p), 0, 0.3)
    assert isinstance(t, RiskLeaf)
    assert (t.sign, t.time, t.delta) == ("-", 0, 0.3)
    t = decompose(NegAtom(p), 2, 0.3)
    assert isinstance(t, RiskLeaf)
    assert (t.sign, t.time) == ("+", 2)


def test_leaf_delta_must_be_positive():
    p = random_predicate(np.random.default_rng(1), 2)
    with pytest.raises(RiskError):
        decompose(Atom(p), 0, 0.0)
    with pytest.raises(RiskError):
        RiskLeaf(p, "-", 0, -0.5)
    with pytest.raises(RiskError):
        RiskLeaf(p, "<", 0, 0.5)


def test_decompose_until_reach_avoid_shape():
    """p1 U[3,5] (p2 and not p3) opens into an Or over anchor steps."""
    rng = np.random.default_rng(2)
    p1, p2, p3 = (random_predicate(rng, 2) for _ in range(3))
    f = Until(3, 5, Atom(p1), And((Atom(p2), NegAtom(p3))))
    tree = decompose(f, 0, 0.2)
    assert isinstance(tree, RiskOr)
    assert len(tree.children) == 3
    for k, child in enumerate(tree.children):
        tp = 3 + k
        assert isinstance(child, RiskAnd)
        leaves = _leaf_set(child)
        assert (p2, "-", tp) in leaves
        assert (p3, "+", tp) in leaves
        for j in range(tp + 1):
            assert (p1, "-", j) in leaves
        assert len(leaves) == tp + 3


def test_decompose_simplifies_literals():
    p = random_predicate(np.random.default_rng(3), 2)
    assert isinstance(decompose(And((Atom(p), TrueLiteral())), 0, 0.1), RiskLeaf)
    assert decompose(And((Atom(p), FalseLiteral())), 0, 0.1) is ALWAYS_FALSE
    assert decompose(Or((Atom(p), TrueLiteral())), 0, 0.1) is ALWAYS_TRUE
    assert decompose(TrueLiteral(), 0, 0.1) is ALWAYS_TRUE


def test_decompose_delta_map_and_callable():
    rng = np.random.default_rng(4)
    p1 = random_predicate(rng, 2)
    p2 = random_predicate(rng, 2)
    f = And((Atom(p1), NegAtom(p2)))
    tree = decompose(f, 0, {p1: 0.1, p2: 0.4})
    assert {lf.pred: lf.delta for lf in tree_leaves(tree)} == {p1: 0.1, p2: 0.4}
    with pytest.raises(RiskError):
        decompose(f, 0, {p1: 0.1})
    tree = decompose(f, 0, lambda pred: 0.25)
    assert all(lf.delta == 0.25 for lf in tree_leaves(tree))


def test_evaluate_tree_leaf_semantics():
    p = AffinePredicate([1.0], 0.0)
    e = Ensemble(np.array([[[1.0]], [[3.0]]]))
    spec = RiskSpec("expectation")
    # atom risk is -2, negated-atom risk is +2
    assert evaluate_tree(decompose(Atom(p), 0, 0.5), e, spec)
    assert not evaluate_tree(decompose(NegAtom(p), 0, 0.5), e, spec)
    # the threshold itself is accepted
    assert evaluate_tree(decompose(NegAtom(p), 0, 2.0), e, spec)
    assert evaluate_tree(ALWAYS_TRUE, e, spec)
    assert not evaluate_tree(ALWAYS_FALSE, e, spec)


def test_tree_threshold_equivalence_exact():
    """Tree evaluation equals thresholding the aggregate risk, exactly."""
    rng = np.random.default_rng(12)
    outcomes = {True: 0, False: 0}
    for trial in range(180):
        f = to_nnf(random_formula(rng, dim=2, depth=3))
        m = int(rng.integers(1, 30))
        e = _ensemble(rng, 2, horizon(f) + int(rng.integers(1, 3)), m)
        spec = SAMPLING_SPECS[trial % len(SAMPLING_SPECS)]
        delta = float(rng.uniform(0.02, 1.5))
        val = stl_risk(e, 0, f, spec)
        got = evaluate_tree(decompose(f, 0, delta), e, spec)
        assert got == (val <= delta)
        outcomes[got] += 1
    assert min(outcomes.values()) > 25


def test_tree_threshold_equivalence_at_boundary():
    # delta placed exactly on the computed risk: both sides accept
    rng = np.random.default_rng(13)
    hits = 0
    for _ in range(200):
        f = to_nnf(random_formula(rng, dim=2, depth=2))
        e = _ensemble(rng, 2, horizon(f) + 1, 7)
        spec = RiskSpec("cvar", level=0.4)
        val = stl_risk(e, 0, f, spec)
        if not (np.isfinite(val) and val > 0):
            continue
        assert evaluate_tree(decompose(f, 0, val), e, spec)
        hits += 1
    assert hits > 40


def test_duplication_invariance():
    """Tiling the ensemble leaves every measure's value unchanged."""
    rng = np.random.default_rng(14)
    for _ in range(40):
        f = to_nnf(random_formula(rng, dim=2, depth=2))
        runs = rng.normal(size=(5, horizon(f) + 1, 2))
        e1 = Ensemble(runs)
        e3 = Ensemble(np.concatenate([runs, runs, runs]))
        for spec in SAMPLING_SPECS:
            tol = 1e-10 if spec.measure == "evar" else 1e-12
            assert stl_risk(e1, 0, f, spec) == pytest.approx(
                stl_risk(e3, 0, f, spec), abs=tol
            )


def test_atomic_var_matches_violation_frequency():
    """For a single atom, VaR risk < 0 iff at most delta of members violate.

    Only atoms admit this frequency reading: composite formulas
    aggregate risk at the atoms, not over member robustness.
    """
    rng = np.random.default_rng(15)
    checked = 0
    for _ in range(120):
        p = random_predicate(rng, 2)
        f = Atom(p) if rng.integers(2) else NegAtom(p)
        t = int(rng.integers(0, 4))
        e = _ensemble(rng, 2, t + 2, int(rng.integers(3, 25)))
        delta = float(rng.uniform(0.05, 0.95))
        val = stl_risk(e, t, f, RiskSpec("var", level=delta))
        robs = np.array([robustness(Run(x), t, f) for x in e.states])
        if np.any(np.abs(robs) < 1e-9) or abs(val) < 1e-9:
            continue
        frac_violate = float(np.mean(robs < 0))
        if val < 0:
            assert frac_violate <= delta
        else:
            assert frac_violate > delta
        checked += 1
    assert checked > 80
