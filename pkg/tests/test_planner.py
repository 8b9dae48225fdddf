from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import nonholonomic
from riskplan.env_model import Polytope
from riskplan.planner import (
    PlannerContext,
    Pose,
    egocentric_coords,
    expand,
    near_radius,
    new_tree,
    nonholonomic_distance,
    plan,
    revalidate,
    sample_state,
)
from riskplan.scenario import MetricParams, load_bundled

PARAMS = MetricParams(k_phi=1.2, k_delta=3.0, gamma=30.0, mu_max=5.0)
# frozen from the scalar oracle: sqrt(16 + 1.44 (pi/2)^2) + 3 pi / 4
NONHOL_EXAMPLE = 6.77807843082129


def test_egocentric_examples():
    assert egocentric_coords(Pose(0, 0, 0.3), Pose(2 * math.cos(0.3), 2 * math.sin(0.3), 0.3)) == pytest.approx((2, 0, 0))
    r, phi, delta = egocentric_coords(Pose(0, 0, 0), Pose(0, 1, 0))
    assert (r, phi, delta) == pytest.approx((1.0, -math.pi / 2, -math.pi / 2))
    a = egocentric_coords(Pose(0, 0, 0), Pose(1, 1, 1.0))
    b = egocentric_coords(Pose(1, 1, 1.0), Pose(0, 0, 0))
    assert a != pytest.approx(b)


def test_egocentric_coincident_positions():
    assert egocentric_coords(Pose(1, 1, 0.2), Pose(1, 1, 0.7)) == pytest.approx((0.0, 0.5, 0.0))


def test_nonholonomic_examples():
    p = Pose(1, 2, 0.4)
    assert nonholonomic_distance(p, p, PARAMS) == 0.0
    assert nonholonomic_distance(Pose(0, 0, 0), Pose(3, 0, 0), PARAMS) == pytest.approx(3.0)
    assert nonholonomic(4.0, math.pi / 2, math.pi / 4, 1.2, 3.0) == pytest.approx(NONHOL_EXAMPLE, abs=1e-12)
    # r = 4 along x, phi = pi/2 via the final heading, delta = pi/4 via the initial heading
    d = nonholonomic_distance(Pose(0, 0, math.pi / 4), Pose(4, 0, math.pi / 2), PARAMS)
    assert d == pytest.approx(NONHOL_EXAMPLE, abs=1e-12)


@given(
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-4, 4),
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-4, 4),
)
def test_nonholonomic_nonnegative(x0, y0, h0, x1, y1, h1):
    assert nonholonomic_distance(Pose(x0, y0, h0), Pose(x1, y1, h1), PARAMS) >= 0.0
    assert nonholonomic_distance(Pose(x0, y0, h0), Pose(x0, y0, h0), PARAMS) == 0.0


def test_near_radius():
    assert 30 * (math.log(100) / 100) ** (1 / 3) == pytest.approx(10.753, abs=1e-3)
    assert near_radius(100, PARAMS) == 5.0
    assert near_radius(1, PARAMS) == 5.0
    assert near_radius(10**9, PARAMS) == pytest.approx(30 * (math.log(1e9) / 1e9) ** (1 / 3))
    with pytest.raises(ValueError):
        near_radius(0, PARAMS)
    # crossover where the formula drops below mu_max
    n = 2
    while 30 * (math.log(n) / n) ** (1 / 3) >= 5.0:
        n += 1
    assert near_radius(n - 1, PARAMS) == 5.0
    assert near_radius(n, PARAMS) < 5.0


@pytest.fixture(scope="module")
def unicycle():
    return load_bundled("unicycle-10x10")


def test_sampled_states_are_free(unicycle):
    ctx = PlannerContext(unicycle, "dr")
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = sample_state(ctx, rng)
        assert ctx.free(s[:2])
        assert -math.pi < s[2] <= math.pi


def test_expand_invariants(unicycle):
    ctx = PlannerContext(unicycle, "dr")
    tree = new_tree(unicycle, 4)
    rng = np.random.default_rng(4)
    for _ in range(40):
        before = {node.id: node.cost for node in tree.nodes}
        expand(tree, ctx, rng)
        for k, c in before.items():
            assert tree.nodes[k].cost <= c
        roots = [node.id for node in tree.nodes if node.parent is None]
        assert roots == [0]
        for node in tree.nodes:
            assert node.id not in tree.ancestors(node.id) if node.parent is not None else True
            if node.parent is not None:
                parent = tree.nodes[node.parent]
                assert node.id in parent.children
                assert abs(node.cost - parent.cost - node.segment.cost) <= 1e-9
                np.testing.assert_array_equal(node.segment.means[0], parent.terminal_mean)
    assert len(tree) > 1
    assert revalidate(tree, ctx) == []
    root = tree.nodes[0]
    assert root.cost == 0.0 and len(root.segment) == 1


def test_plan_is_deterministic(unicycle):
    a = plan(unicycle, max_iters=15, seed=9)
    b = plan(unicycle, max_iters=15, seed=9)
    assert a.tree.dumps(3) == b.tree.dumps(3)


def test_goal_containing_root_gives_trivial_reference(unicycle):
    sc = replace(unicycle, goal_region=Polytope.box(0.2, 1.0, 0.95, 1.05))
    result = plan(sc, max_iters=5, seed=0)
    assert result.found and result.iterations == 0
    assert len(result.reference) == 1 and result.reference.cost == 0.0


def test_no_goal_is_flagged(unicycle):
    result = plan(unicycle, max_iters=2, seed=0)
    assert not result.found and result.reference is None and result.goal_node is None


def test_tree_dump_fields(unicycle):
    import json

    result = plan(unicycle, max_iters=5, seed=1)
    data = json.loads(result.tree.dumps(3))
    assert data["rng_seed"] == 1 and data["root"] == 0
    assert len(data["nodes"]) == len(result.tree)
    node = data["nodes"][0]
    assert {"id", "parent", "cost", "segment_cost", "target", "terminal_mean", "terminal_cov", "robot_means", "inputs"} <= set(node)
