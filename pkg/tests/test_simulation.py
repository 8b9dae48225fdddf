from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from oracles import excess_kurtosis
from riskplan.control import steer
from riskplan.env_model import GAUSSIAN, LAPLACIAN, Polytope
from riskplan.scenario import load_bundled
from riskplan.simulation import collision_step, monte_carlo, sample_noise, track


def test_sample_noise_zero_covariance():
    rng = np.random.default_rng(0)
    for family in (GAUSSIAN, LAPLACIAN):
        np.testing.assert_array_equal(sample_noise(family, np.zeros((3, 3)), rng, 10), np.zeros((10, 3)))
    with pytest.raises(ValueError):
        sample_noise("cauchy", np.eye(2), rng)


@pytest.mark.parametrize("family", [GAUSSIAN, LAPLACIAN])
def test_sample_noise_moments(family):
    n = 100_000
    cov = np.diag([2.0, 3.0])
    x = sample_noise(family, cov, np.random.default_rng(1), n)
    emp = np.cov(x.T)
    assert np.all(np.abs(np.diag(emp) - np.diag(cov)) <= 0.05 * np.diag(cov))
    assert abs(emp[0, 1]) <= 0.05 * 2.0
    assert np.linalg.norm(x.mean(axis=0)) <= 4 * np.sqrt(np.trace(cov) / n)
    # excess kurtosis standard error is about sqrt(24 / n)
    kurt = excess_kurtosis(x[:, 0])
    if family == GAUSSIAN:
        assert abs(kurt) <= 3 * np.sqrt(24 / n)
    else:
        # a Gaussian scale mixture with Exp(1) variance has excess kurtosis 3
        assert kurt > 3 * np.sqrt(24 / n)


def test_sample_noise_correlated_covariance():
    cov = np.array([[2.0, 0.6], [0.6, 0.5]])
    x = sample_noise(LAPLACIAN, cov, np.random.default_rng(2), 200_000)
    assert np.all(np.abs(np.cov(x.T) - cov) <= 0.05 * np.abs(cov).max())


@pytest.fixture(scope="module")
def short_run():
    """Unicycle scenario with a goal 1.5 m ahead of the start and a reference steered there."""
    sc = load_bundled("unicycle-10x10")
    x0 = sc.start.mean[:3]
    target = x0 + np.array([1.5, 0.0, 0.0])
    sc = replace(sc, goal_region=Polytope.box(target[0] - 0.1, target[0] + 0.1, target[1] - 0.1, target[1] + 0.1), max_track_steps=200)
    ref = steer(sc.start_belief, target, sc.planning_nmpc, sc.steer_models())
    assert ref.reached
    return sc, ref


def test_zero_process_noise_replays_the_inputs(short_run):
    sc, ref = short_run
    quiet = replace(sc, robot_process_cov=np.zeros((3, 3)), sensor_cov=1e-12 * np.eye(sc.sensor_cov.shape[0]), cross_corr=None)
    quiet = quiet.with_noise_family(GAUSSIAN)
    result = track(ref, quiet, np.random.default_rng(0))
    assert result.reached_goal and not result.collided and result.failure == ""
    system = quiet.system
    for t in range(result.steps):
        np.testing.assert_allclose(result.path[t + 1], system.transition(result.path[t], result.inputs[t]), atol=1e-12)
    np.testing.assert_allclose(result.estimates, result.path, atol=1e-4)


def test_monte_carlo_seeding(short_run):
    sc, ref = short_run
    summary = monte_carlo(sc, ref, 3, base_seed=5)
    single = track(ref, sc, np.random.default_rng(6))
    np.testing.assert_array_equal(summary.trials[1].path, single.path)
    rows = summary.rows()
    assert [r["seed"] for r in rows] == [5, 6, 7]
    assert summary.collisions == sum(r["collided"] for r in rows)
    assert summary.reached == sum(r["reached_goal"] for r in rows)
    # a longer campaign shares its prefix with a shorter one
    longer = monte_carlo(sc, ref, 4, base_seed=5)
    for a, b in zip(summary.trials, longer.trials):
        np.testing.assert_array_equal(a.path, b.path)
    with pytest.raises(ValueError):
        monte_carlo(sc, ref, 0)


def test_collision_flag_is_recheckable_from_path(short_run):
    sc, ref = short_run
    for seed in range(3):
        r = track(ref, sc, np.random.default_rng(seed))
        hit = collision_step(sc, r.path)
        assert r.collided == (hit is not None)
        if hit is not None:
            assert hit == len(r.path) - 1


def test_collision_step_examples():
    sc = load_bundled("unicycle-10x10")
    z = sc.start.mean.copy()
    free = np.array([z, z + np.r_[0.5, 0.0, np.zeros(z.size - 2)]])
    assert collision_step(sc, free) is None
    # corridor point to a point past the wall: both ends free, segment blocked
    a, b = z.copy(), z.copy()
    a[:2] = [5.0, 1.0]
    b[:2] = [9.0, 5.0]
    assert collision_step(sc, np.array([a])) is None
    assert collision_step(sc, np.array([b])) is None
    assert collision_step(sc, np.array([a, b])) == 1
    out = z.copy()
    out[:2] = [-1.0, 1.0]
    assert collision_step(sc, np.array([out])) == 0
