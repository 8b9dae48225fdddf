from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binomial_sigma, cantelli_factor, normal_quantile_bisection
from riskplan.control import TrajectorySegment
from riskplan.env_model import Obstacle, Polytope
from riskplan.risk import (
    DR,
    GAUSSIAN,
    FacetConstraint,
    RiskContext,
    allocate_risk,
    allocate_stage_risk,
    dr_feasible,
    dr_tightening_factor,
    environment_feasible,
    facet_satisfied,
    gaussian_tightening_factor,
    min_clearance,
    obstacle_feasible,
    segment_clearance,
    segment_intersects,
)

BOX = Polytope.box(-0.5, 0.5, -0.5, 0.5)
# frozen from the independent oracles in tests/oracles.py
DR_005 = 4.358898943540674
GAUSS_005 = 1.6448536269514729


def test_frozen_constants_match_oracles():
    assert DR_005 == pytest.approx(math.sqrt(19.0), abs=1e-15)
    assert DR_005 == pytest.approx(cantelli_factor(0.05), abs=1e-15)
    assert GAUSS_005 == pytest.approx(normal_quantile_bisection(0.95), abs=1e-10)


def test_tightening_factors():
    assert dr_tightening_factor(0.5) == 1.0
    assert gaussian_tightening_factor(0.5) == 0.0
    assert dr_tightening_factor(0.05) == pytest.approx(DR_005, abs=1e-12)
    assert gaussian_tightening_factor(0.05) == pytest.approx(GAUSS_005, abs=1e-10)
    for bad in (0.0, -0.1, 0.51, 1.0):
        with pytest.raises(ValueError):
            dr_tightening_factor(bad)
        with pytest.raises(ValueError):
            gaussian_tightening_factor(bad)


@given(st.floats(1e-9, 0.5, exclude_max=True), st.floats(1e-9, 0.5, exclude_max=True))
def test_dr_factor_decreasing_and_dominates(a, b):
    lo, hi = min(a, b), max(a, b)
    assert dr_tightening_factor(lo) >= dr_tightening_factor(hi)
    assert gaussian_tightening_factor(a) < dr_tightening_factor(a)


def test_allocation_examples():
    alloc = allocate_risk(0.1, 999, 4, [4])
    assert alloc.stage_risk == pytest.approx(1e-4)
    alloc = allocate_risk(0.2, 1, 4, [4])
    assert alloc.stage_risk == pytest.approx(0.1)
    alloc = allocate_stage_risk(1e-4, 4, [4])
    assert alloc.per_constraint == pytest.approx(1.25e-5)
    assert alloc.per_obstacle[0] == pytest.approx(5e-5)
    assert alloc.environment == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        allocate_risk(0.1, 10, 0, [])
    with pytest.raises(ValueError):
        allocate_risk(0.6, 10, 4, [4])


@given(st.floats(1e-6, 0.5), st.integers(0, 2000), st.integers(0, 8), st.lists(st.integers(0, 12), max_size=5))
def test_allocation_sums_to_budget(beta, horizon, n_env, counts):
    if n_env + sum(counts) == 0:
        return
    alloc = allocate_risk(beta, horizon, n_env, counts)
    assert alloc.stage_risk * (horizon + 1) == pytest.approx(beta, rel=1e-12)
    assert sum(alloc.per_obstacle) + alloc.environment == pytest.approx(alloc.stage_risk, rel=1e-12)
    assert all(0 < r <= 0.5 for r in alloc.per_obstacle if r > 0)


def test_facet_examples():
    facet = FacetConstraint([1.0, 0.0], [0.0, 0.0], None)
    assert facet_satisfied([0.0, 3.0], np.zeros((2, 2)), facet, 0.05)
    assert not facet_satisfied([-1e-12, 3.0], np.zeros((2, 2)), facet, 0.05)
    sigma = 0.3
    D = sigma**2 * np.eye(2)
    for mode, k in ((DR, DR_005), (GAUSSIAN, GAUSS_005)):
        assert facet_satisfied([k * sigma * (1 + 1e-9), 0.0], D, facet, 0.05, mode)
        assert not facet_satisfied([k * sigma * (1 - 1e-9), 0.0], D, facet, 0.05, mode)


def test_facet_point_covariance_adds():
    facet = FacetConstraint([1.0, 0.0], [0.0, 0.0], 0.16 * np.eye(2))
    D = 0.09 * np.eye(2)
    # combined std 0.5
    assert facet_satisfied([DR_005 * 0.5 + 1e-9, 0.0], D, facet, 0.05)
    assert not facet_satisfied([DR_005 * 0.5 - 1e-9, 0.0], D, facet, 0.05)


def test_obstacle_feasible_examples():
    obs = Obstacle(BOX, [0.0, 0.0])
    assert obstacle_feasible([10.0, 10.0], np.zeros((2, 2)), obs, 0.05)
    assert not obstacle_feasible([0.0, 0.0], 0.01 * np.eye(2), obs, 0.05)
    assert not obstacle_feasible([0.0, 0.0], np.zeros((2, 2)), obs, 0.05)
    sigma = 0.1
    D = sigma**2 * np.eye(2)
    for d in np.linspace(0.0, 1.0, 41):
        feasible = obstacle_feasible([0.5 + d, 0.0], D, obs, 0.05)
        assert feasible == (d >= DR_005 * sigma)


def test_single_facet_reduction_monte_carlo():
    # a Gaussian position placed exactly at the single-facet margin
    sigma, alpha = 0.1, 0.05
    d = DR_005 * sigma
    rng = np.random.default_rng(3)
    g = rng.normal(0.5 + d, sigma, 100_000)
    assert np.mean(g <= 0.5) <= alpha + 3 * binomial_sigma(alpha, 100_000)


def test_environment_examples():
    env = Polytope.box(-1, 1, -1, 1)
    assert environment_feasible([0.999, 0.0], np.zeros((2, 2)), env, 0.2)
    assert not environment_feasible([1.001, 0.0], np.zeros((2, 2)), env, 0.2)
    sigma = 0.05
    D = sigma**2 * np.eye(2)
    # alpha_env = 0.2 over 4 rows gives 0.05 per row
    shrink = DR_005 * sigma
    assert environment_feasible([1 - shrink - 1e-9, 0.0], D, env, 0.2)
    assert not environment_feasible([1 - shrink + 1e-9, 0.0], D, env, 0.2)
    assert environment_feasible([1 - 1e-9, 0.0], D, env, 0.2, probabilistic=False)


def test_segment_intersection_examples():
    assert segment_intersects([-1, 0], [1, 0], BOX)
    assert not segment_intersects([2, 2], [3, 3], BOX)
    assert segment_intersects([0.5, 2.0], [0.5, 0.5], BOX)
    assert segment_intersects([0.5, 0.5], [0.5, 0.5], BOX)
    assert not segment_intersects([0.6, 0.6], [0.6, 0.6], BOX)


@settings(max_examples=300, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_segment_intersection_matches_dense_sampling(x0, y0, x1, y1):
    p0, p1 = np.array([x0, y0]), np.array([x1, y1])
    hit = segment_intersects(p0, p1, BOX)
    t = np.linspace(0, 1, 2001)[:, None]
    pts = p0 + t * (p1 - p0)
    inside = np.all(np.abs(pts) <= 0.5 - 1e-3, axis=1).any()
    if inside:
        assert hit
    clearance = segment_clearance(p0, p1, BOX)
    if hit:
        assert clearance == 0.0
    else:
        sampled = np.min(np.hypot(np.maximum(np.abs(pts[:, 0]) - 0.5, 0), np.maximum(np.abs(pts[:, 1]) - 0.5, 0)))
        assert clearance == pytest.approx(sampled, abs=2e-3)


def _context(mode=DR, alpha=0.05, env=None, probabilistic=False):
    env = Polytope.box(-10, 10, -10, 10) if env is None else env
    alloc = allocate_stage_risk(alpha, env.n_facets if probabilistic else 0, [4])
    return RiskContext((Obstacle(BOX, [0.0, 0.0]),), env, alloc, mode, probabilistic, 3)


def _segment(xs, ys, var):
    means = np.column_stack([xs, ys, np.zeros(len(xs))])
    covs = np.array([np.diag([var, var, 0.0])] * len(xs))
    return TrajectorySegment(means, covs, np.zeros((len(xs) - 1, 2)), 0.0, True)


def test_dr_feasible_examples():
    empty = RiskContext((), Polytope.box(-10, 10, -10, 10), allocate_stage_risk(0.05, 4, []), DR, False, 3)
    assert dr_feasible(_segment([0, 1, 2], [0, 0, 0], 0.0), empty)
    # mean path crossing the obstacle between two far samples
    assert not dr_feasible(_segment([-3, 3], [0, 0], 0.0), _context())
    sigma = 0.1
    ok_gauss = _segment(np.linspace(-3, 3, 61), np.full(61, 0.5 + 3.0 * sigma), sigma**2)
    assert dr_feasible(ok_gauss, _context(GAUSSIAN))
    assert not dr_feasible(ok_gauss, _context(DR))
    clear = _segment(np.linspace(-3, 3, 61), np.full(61, 0.5 + 4.5 * sigma), sigma**2)
    assert dr_feasible(clear, _context(DR))


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 0.2), st.floats(1e-4, 0.49))
def test_mode_dominance(x, y, s, alpha):
    obs = Obstacle(BOX, [0.0, 0.0])
    D = s * s * np.eye(2)
    if obstacle_feasible([x, y], D, obs, alpha, DR):
        assert obstacle_feasible([x, y], D, obs, alpha, GAUSSIAN)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(0.5, 1.5), st.floats(0, 0.1), st.floats(1e-4, 0.2), st.integers(0, 1))
def test_enlarging_covariance_never_restores_feasibility(x, y, s, gamma, m):
    ctx = _context(DR if m == 0 else GAUSSIAN, env=Polytope.box(-4, 4, -2, 2), probabilistic=True)
    seg = _segment(np.linspace(x, x + 1, 5), np.full(5, y), s * s)
    bigger = TrajectorySegment(seg.means, seg.covs + gamma * np.eye(3), seg.inputs, 0.0, True)
    if not dr_feasible(seg, ctx):
        assert not dr_feasible(bigger, ctx)


def test_min_clearance():
    obs = (Obstacle(BOX, [0.0, 0.0]),)
    path = np.array([[-2.0, 1.0], [2.0, 1.0]])
    assert min_clearance(path, obs) == pytest.approx(0.5)
    assert min_clearance(np.array([[0.0, 0.0], [1.0, 0.0]]), obs) == 0.0
