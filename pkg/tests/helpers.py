"""Shared generators for randomized tests."""

import numpy as np

from stlrisk import (
    AffinePredicate,
    And,
    Atom,
    LtvSystem,
    NegAtom,
    Or,
    Release,
    Until,
    always,
    eventually,
)


def random_predicate(rng, dim, scale=1.0):
    a = rng.normal(size=dim)
    # keep atoms away from degenerate all-zero rows
    while np.all(np.abs(a) < 1e-3):
        a = rng.normal(size=dim)
    return AffinePredicate(a * scale, float(rng.normal() * scale))


def random_formula(rng, dim=2, depth=3, max_anchor=2, max_width=2):
    """Random NNF formula tree over random affine atoms.

    max_anchor bounds each temporal interval's end point, so the
    horizon is at most depth * max_anchor.
    """
    if depth <= 0 or rng.random() < 0.25:
        pred = random_predicate(rng, dim)
        return Atom(pred) if rng.random() < 0.5 else NegAtom(pred)
    kind = int(rng.integers(6))
    if kind <= 1:
        width = int(rng.integers(2, 2 + max_width))
        kids = tuple(
            random_formula(rng, dim, depth - 1, max_anchor, max_width)
            for _ in range(width)
        )
        return And(kids) if kind == 0 else Or(kids)
    a = int(rng.integers(0, max_anchor))
    b = int(rng.integers(a, max_anchor + 1))
    child = random_formula(rng, dim, depth - 1, max_anchor, max_width)
    if kind == 2:
        return eventually(a, b, child)
    if kind == 3:
        return always(a, b, child)
    left = random_formula(rng, dim, depth - 1, max_anchor, max_width)
    if kind == 4:
        return Until(a, b, left, child)
    return Release(a, b, left, child)


def random_system(rng, n=2, m=1, horizon=6, noisy=True, stable=True):
    """Random LTI system; dynamics scaled toward the unit disk when stable."""
    A = rng.normal(size=(n, n))
    if stable:
        radius = max(np.abs(np.linalg.eigvals(A)))
        A = A / max(radius / 0.95, 1.0)
    B = rng.normal(size=(n, m))
    w_mean = rng.normal(size=n) * 0.05
    if noisy:
        R = rng.normal(size=(n, n)) * 0.1
        w_cov = R @ R.T + 1e-4 * np.eye(n)
    else:
        w_cov = np.zeros((n, n))
        w_mean = np.zeros(n)
    return LtvSystem(A=A, B=B, w_mean=w_mean, w_cov=w_cov, horizon=horizon)
