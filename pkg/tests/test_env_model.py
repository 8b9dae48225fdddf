from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bicycle_step, unicycle_step
from riskplan.env_model import (
    BICYCLE,
    RANGE_BEARING,
    UNICYCLE,
    EnvironmentState,
    MeasurementError,
    ModelError,
    NoiseModel,
    Obstacle,
    Polytope,
    RobotModel,
    SensorModel,
    System,
    extract_robot_state,
    measure,
    step_environment,
    step_robot,
    wrap_angle,
)

UNI = RobotModel(UNICYCLE, 0.2, [-0.5, -math.pi], [0.5, math.pi])
BIC = RobotModel(BICYCLE, 0.2, [-3.0, -1.2], [3.0, 1.2], wheelbase=2.9)
BOX = Polytope.box(-0.5, 0.5, -0.5, 0.5)


def test_unicycle_straight_line():
    np.testing.assert_allclose(step_robot(UNI, [0, 0, 0], [1, 0]), [0.1, 0, 0])
    wide = RobotModel(UNICYCLE, 0.2, [-2, -2], [2, 2])
    np.testing.assert_allclose(step_robot(wide, [0, 0, 0], [1, 0]), [0.2, 0, 0])
    np.testing.assert_allclose(step_robot(wide, [0, 0, math.pi / 2], [1, 0]), [0, 0.2, math.pi / 2], atol=1e-15)


def test_bicycle_zero_steer():
    np.testing.assert_allclose(step_robot(BIC, [0, 0, 0, 1], [0, 0]), [0.2, 0, 0, 1])


def test_inputs_clamped_to_bounds():
    # v = 5 is clamped to 0.5
    np.testing.assert_allclose(step_robot(UNI, [0, 0, 0], [5, 0]), [0.1, 0, 0])


def test_noise_scaled_by_dt():
    out = step_robot(UNI, [0, 0, 0], [0, 0], w=[1.0, -2.0, 0.5])
    np.testing.assert_allclose(out, [0.2, -0.4, 0.1])


def test_dimension_mismatch_raises():
    with pytest.raises(ModelError):
        step_robot(UNI, [0, 0], [0, 0])
    with pytest.raises(ModelError):
        step_robot(BIC, [0, 0, 0, 0], [0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-20, 20), st.floats(-5, 5),
    st.floats(-3, 3), st.floats(-1.2, 1.2),
)
def test_robot_step_matches_scalar_oracle_and_wraps(x, y, psi, v, a, d):
    out = step_robot(BIC, [x, y, psi, v], [a, d])
    ref = bicycle_step([x, y, psi, v], [a, d], 0.2, 2.9)
    assert -math.pi < out[2] <= math.pi
    np.testing.assert_allclose(out[[0, 1, 3]], ref[[0, 1, 3]], atol=1e-12)
    assert abs(wrap_angle(out[2] - ref[2])) < 1e-12
    u_out = step_robot(UNI, [x, y, psi], [a / 6, d])
    u_ref = unicycle_step([x, y, psi], [a / 6, d], 0.2)
    np.testing.assert_allclose(u_out[:2], u_ref[:2], atol=1e-12)
    assert -math.pi < u_out[2] <= math.pi
    # repeated evaluation is bit-identical
    assert np.array_equal(out, step_robot(BIC, [x, y, psi, v], [a, d]))


@given(st.floats(-1e3, 1e3))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert abs(math.sin(w) - math.sin(a)) < 1e-9 and abs(math.cos(w) - math.cos(a)) < 1e-9


def test_wrap_angle_pi_maps_to_pi():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi


def test_static_obstacle_holds_position_and_layout():
    obs = Obstacle(BOX, [5.0, 5.0])
    system = System(UNI, (obs,))
    assert system.n_z == 5
    Z = system.initial_state([0, 0, 0])
    Z1 = step_environment(system, Z, [0.5, 0.1])
    np.testing.assert_array_equal(Z1.obstacles[0], [5.0, 5.0])
    np.testing.assert_array_equal(Z1.robot, step_robot(UNI, Z.robot, [0.5, 0.1]))
    np.testing.assert_array_equal(extract_robot_state(Z1), Z1.robot)


def test_no_obstacles_environment_step_is_robot_step():
    system = System(UNI)
    Z = system.initial_state([1, 2, 0.3])
    np.testing.assert_array_equal(step_environment(system, Z, [0.4, -0.2]).vector, step_robot(UNI, [1, 2, 0.3], [0.4, -0.2]))
    np.testing.assert_array_equal(extract_robot_state(Z.vector, 3), Z.vector)


def test_extract_robot_state_block():
    Z = EnvironmentState([1, 2, 3], (np.array([5.0, 5.0]),))
    np.testing.assert_array_equal(extract_robot_state(Z), [1, 2, 3])
    np.testing.assert_array_equal(extract_robot_state(Z.vector, 3), [1, 2, 3])


def test_static_obstacle_rejects_process_noise():
    with pytest.raises(ModelError):
        Obstacle(BOX, [0, 0], process_cov=np.eye(2))


def test_process_covariance_block_diagonal():
    moving = Obstacle(BOX, [0, 0, 1, 0], dynamics="constant_velocity", process_cov=2 * np.eye(4))
    system = System(UNI, (Obstacle(BOX, [5, 5]), moving))
    P = system.process_cov(np.diag([1.0, 2.0, 3.0]))
    expected = np.zeros((9, 9))
    expected[:3, :3] = np.diag([1.0, 2.0, 3.0])
    expected[5:, 5:] = 2 * np.eye(4)
    np.testing.assert_array_equal(P, expected)


def test_full_state_sensor_identity():
    system = System(UNI, (Obstacle(BOX, [5, 5]),))
    Z = system.initial_state([1, 2, 0.3])
    np.testing.assert_array_equal(measure(system, Z), Z.vector)


def test_range_bearing_values():
    sensor = SensorModel(RANGE_BEARING, landmark=(0.0, 0.0), distortion=0.0)
    system = System(BIC, (Obstacle(BOX, [5, 6]),), sensor)
    assert system.p == 4
    y = measure(system, system.initial_state([3, 4, 0.0, 1]))
    assert y[0] == pytest.approx(5.0)
    y = measure(system, system.initial_state([3, 4, 0.1, 1]))
    # line-of-sight angle of (robot - landmark), relative to heading
    assert y[1] == pytest.approx(math.atan2(4.0, 3.0) - 0.1, abs=1e-15)
    np.testing.assert_allclose(y[2:], [5.0, 0.0])


def test_range_bearing_at_landmark_raises():
    system = System(BIC, (Obstacle(BOX, [5, 6]),), SensorModel(RANGE_BEARING, landmark=(3.0, 4.0)))
    with pytest.raises(MeasurementError):
        measure(system, system.initial_state([3, 4, 0, 1]))


def test_noise_model_rejects_indefinite_joint():
    NoiseModel([[2.0]], [[1.0]], [[1.0]])
    with pytest.raises(ModelError):
        NoiseModel([[1.0]], [[1.0]], [[2.0]])


def test_noise_model_rejects_rank_two_cross_correlation():
    with pytest.raises(ModelError):
        NoiseModel(10 * np.eye(2), np.eye(2), 0.5 * np.eye(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_noise_model_acceptance_matches_cholesky(seed):
    rng = np.random.default_rng(seed)
    n, p = 3, 2
    G = rng.normal(size=(n, n))
    Sw = G @ G.T + 0.1 * np.eye(n)
    H = rng.normal(size=(p, p))
    Sv = H @ H.T + 0.1 * np.eye(p)
    M = np.outer(rng.normal(size=n), rng.normal(size=p)) * rng.uniform(0.1, 3.0)
    joint = np.block([[Sw, M], [M.T, Sv]])
    try:
        np.linalg.cholesky(joint)
        pd = True
    except np.linalg.LinAlgError:
        pd = False
    min_eig = np.linalg.eigvalsh(joint).min()
    if abs(min_eig) < 1e-8:
        return
    try:
        NoiseModel(Sw, Sv, M)
        accepted = True
    except ModelError:
        accepted = False
    assert accepted == pd


def test_polytope_vertices_and_bounds():
    poly = Polytope.box(1, 3, -2, 5)
    assert poly.bounds() == (1, 3, -2, 5)
    assert poly.contains([1, 5]) and not poly.contains([0.999, 0])
    assert len(poly.vertices()) == 4
