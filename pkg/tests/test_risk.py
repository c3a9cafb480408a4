"""Risk measures: frozen values, coherence axioms, orderings, DR bound."""

import math

import numpy as np
import pytest
from scipy import optimize

from stlrisk import MEASURES, RiskError, RiskSpec, drvar_violation_prob, eval_risk

TOL = 1e-9


def _risk(measure, sample, level=None, weight=None):
    return eval_risk(RiskSpec(measure, level=level, weight=weight), sample)


# ---------------------------------------------------------------------------
# Spec validation


def test_measure_catalogue():
    assert set(MEASURES) == {
        "expectation",
        "worst_case",
        "mean_variance",
        "var",
        "cvar",
        "evar",
        "drvar",
    }


def test_spec_validation():
    with pytest.raises(RiskError):
        RiskSpec("median")
    with pytest.raises(RiskError):
        RiskSpec("var")  # level required
    with pytest.raises(RiskError):
        RiskSpec("cvar", level=0.0)
    with pytest.raises(RiskError):
        RiskSpec("cvar", level=1.5)
    with pytest.raises(RiskError):
        RiskSpec("expectation", level=0.5)
    with pytest.raises(RiskError):
        RiskSpec("mean_variance")  # weight required
    with pytest.raises(RiskError):
        RiskSpec("mean_variance", weight=-1.0)
    with pytest.raises(RiskError):
        RiskSpec("var", level=0.5, weight=1.0)
    # cvar admits the full-mass level, drvar does not
    RiskSpec("cvar", level=1.0)
    with pytest.raises(RiskError):
        RiskSpec("drvar", level=1.0)


def test_sample_validation():
    spec = RiskSpec("expectation")
    with pytest.raises(RiskError):
        eval_risk(spec, [])
    with pytest.raises(RiskError):
        eval_risk(spec, [[1.0, 2.0]])
    with pytest.raises(RiskError):
        eval_risk(spec, [1.0, math.nan])
    with pytest.raises(RiskError):
        eval_risk(RiskSpec("drvar", level=0.5), [1.0])


# ---------------------------------------------------------------------------
# Frozen point values


def test_expectation_and_worst_case():
    assert _risk("expectation", [1.0, 2.0, 3.0]) == pytest.approx(2.0)
    assert _risk("worst_case", [1.0, 5.0, 3.0]) == 5.0


def test_mean_variance_value():
    x = [1.0, 2.0, 3.0, 4.0]
    # population variance of 1..4 is 1.25
    assert _risk("mean_variance", x, weight=2.0) == pytest.approx(2.5 + 2.0 * 1.25)
    assert _risk("mean_variance", x, weight=0.0) == pytest.approx(2.5)


def test_var_order_statistic():
    x = list(range(1, 11))
    assert _risk("var", x, level=0.2) == 8.0
    assert _risk("var", x, level=0.5) == 5.0
    assert _risk("var", [3.0, 1.0, 2.0], level=0.5) == 2.0
    # full tail mass: the empirical CDF condition is met before any point
    assert _risk("var", x, level=1.0) == -math.inf


def test_var_float_level_boundaries():
    # (1 - 0.7) * 10 lands a hair above 3; the index must still be 3
    x = list(range(1, 11))
    assert _risk("var", x, level=0.7) == 3.0
    assert _risk("var", x, level=0.3) == 7.0


def test_cvar_values():
    assert _risk("cvar", [1.0, 2.0, 3.0, 4.0], level=0.5) == pytest.approx(3.5)
    rng = np.random.default_rng(0)
    x = rng.normal(size=17)
    assert _risk("cvar", x, level=1.0) == pytest.approx(float(np.mean(x)), abs=TOL)
    # tail of one sample point
    assert _risk("cvar", [1.0, 2.0, 3.0, 4.0], level=0.25) == pytest.approx(4.0)


def test_cvar_against_scalar_minimization():
    """Rockafellar form cross-checked by a generic 1-D optimizer."""
    rng = np.random.default_rng(1)
    for _ in range(40):
        x = rng.normal(size=int(rng.integers(3, 25))) * float(rng.uniform(0.5, 3))
        delta = float(rng.uniform(0.05, 1.0))

        def obj(t):
            return t + np.mean(np.maximum(x - t, 0.0)) / delta

        res = optimize.minimize_scalar(
            obj, bounds=(float(x.min()) - 1.0, float(x.max()) + 1.0), method="bounded",
            options={"xatol": 1e-12},
        )
        assert _risk("cvar", x, level=delta) <= obj(res.x) + 1e-9
        # scanning order statistics is exact, the smooth optimizer is not
        assert _risk("cvar", x, level=delta) == pytest.approx(res.fun, abs=1e-7)


def test_evar_against_scalar_minimization():
    rng = np.random.default_rng(2)
    for _ in range(40):
        x = rng.normal(size=int(rng.integers(3, 25)))
        delta = float(rng.uniform(0.05, 0.95))

        def obj(z):
            return (np.log(np.mean(np.exp(z * x))) - np.log(delta)) / z

        res = optimize.minimize_scalar(
            obj, bounds=(1e-8, 500.0 / (np.ptp(x) + 1e-12)), method="bounded",
            options={"xatol": 1e-12},
        )
        ours = _risk("evar", x, level=delta)
        assert ours == pytest.approx(min(res.fun, float(x.max())), abs=1e-7)


def test_evar_degenerate_and_tail_levels():
    assert _risk("evar", [2.0, 2.0, 2.0], level=0.3) == 2.0
    x = [1.0, 2.0, 5.0]
    # a tail mass below 1/M collapses the optimum onto the maximum
    assert _risk("evar", x, level=1e-12) == pytest.approx(5.0, abs=1e-9)


def test_evar_limit_at_full_mass_is_mean():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(size=int(rng.integers(3, 30)))
        v = _risk("evar", x, level=1.0 - 1e-9)
        assert v == pytest.approx(float(np.mean(x)), abs=1e-4)


def test_ordering_var_cvar_evar_worst_case():
    rng = np.random.default_rng(4)
    for _ in range(300):
        x = rng.normal(size=int(rng.integers(2, 40))) * float(rng.uniform(0.1, 5))
        delta = float(rng.uniform(0.02, 0.98))
        var = _risk("var", x, level=delta)
        cvar = _risk("cvar", x, level=delta)
        evar = _risk("evar", x, level=delta)
        top = _risk("worst_case", x)
        assert var <= cvar + TOL
        assert cvar <= evar + TOL
        assert evar <= top + TOL


# ---------------------------------------------------------------------------
# Coherence axioms

COHERENT = (
    ("expectation", {}),
    ("worst_case", {}),
    ("cvar", {"level": 0.3}),
    ("evar", {"level": 0.3}),
)


@pytest.mark.parametrize("measure,kw", COHERENT, ids=[m for m, _ in COHERENT])
def test_coherence_axioms(measure, kw):
    """Monotone, cash-additive, positively homogeneous, subadditive."""
    rng = np.random.default_rng(5)
    for _ in range(250):
        m = int(rng.integers(2, 30))
        x = rng.normal(size=m) * float(rng.uniform(0.2, 3))
        y = rng.normal(size=m) * float(rng.uniform(0.2, 3))
        rx = _risk(measure, x, **kw)
        ry = _risk(measure, y, **kw)
        # monotonicity on an elementwise dominated pair
        up = x + np.abs(rng.normal(size=m))
        assert rx <= _risk(measure, up, **kw) + TOL
        # translation invariance
        c = float(rng.normal() * 2)
        assert _risk(measure, x + c, **kw) == pytest.approx(rx + c, abs=TOL)
        # positive homogeneity
        beta = float(rng.uniform(0, 3))
        assert _risk(measure, beta * x, **kw) == pytest.approx(beta * rx, abs=TOL)
        # subadditivity on the shared scenario index
        assert _risk(measure, x + y, **kw) <= rx + ry + TOL


def test_var_subadditivity_counterexample():
    x1 = np.array([0.0, 0.0, 0.0, 10.0])
    x2 = np.array([0.0, 0.0, 10.0, 0.0])
    lv = 0.25
    assert _risk("var", x1, level=lv) == 0.0
    assert _risk("var", x2, level=lv) == 0.0
    assert _risk("var", x1 + x2, level=lv) == 10.0  # exceeds the sum of parts


def test_mean_variance_monotonicity_counterexample():
    x1 = np.array([0.0, 10.0])
    x2 = np.array([10.0, 10.0])
    assert np.all(x1 <= x2)
    assert _risk("mean_variance", x1, weight=1.0) > _risk(
        "mean_variance", x2, weight=1.0
    )


# ---------------------------------------------------------------------------
# Distributionally robust violation probability


def test_drvar_frozen_values():
    assert drvar_violation_prob(1.0, 4.0) == 1.0
    assert drvar_violation_prob(0.0, 0.5) == 1.0
    assert drvar_violation_prob(-3.0, 1.0) == pytest.approx(0.1)
    assert drvar_violation_prob(-1.0, 0.0) == 0.0


def test_drvar_matches_tightening_factor():
    # the margin multiplier sqrt((1-d)/d) sits exactly on the d contour
    for delta in (0.05, 0.1, 0.3, 0.5, 0.9):
        factor = math.sqrt((1.0 - delta) / delta)
        sigma = 1.7
        assert drvar_violation_prob(-factor * sigma, sigma * sigma) == pytest.approx(
            delta, abs=1e-12
        )


def test_drvar_monotone_in_mean_and_variance():
    rng = np.random.default_rng(6)
    for _ in range(300):
        mean = float(rng.uniform(-5, 1))
        var = float(rng.uniform(0, 5))
        dm = float(rng.uniform(0, 1))
        dv = float(rng.uniform(0, 1))
        base = drvar_violation_prob(mean, var)
        assert base <= drvar_violation_prob(mean + dm, var) + 1e-15
        assert base <= drvar_violation_prob(mean, var + dv) + 1e-15
        assert 0.0 <= base <= 1.0


def test_drvar_rejects_bad_moments():
    with pytest.raises(RiskError):
        drvar_violation_prob(0.0, -1.0)
    with pytest.raises(RiskError):
        drvar_violation_prob(math.nan, 1.0)
    with pytest.raises(RiskError):
        drvar_violation_prob(0.0, math.inf)
