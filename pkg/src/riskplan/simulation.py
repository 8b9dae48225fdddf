"""Noise sampling, closed-loop tracking of a reference, and Monte-Carlo campaigns."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .control import TrajectorySegment, nmpc_solve, shift_warm_start
from .env_model import GAUSSIAN, HEADING, LAPLACIAN, wrap_angle
from .estimation import BeliefState, psd_cholesky, ukf_step
from .risk import segment_intersects
from .scenario import ScenarioConfig

WAYPOINT_WINDOW = 25
STALL_STEPS = 10


def sample_noise(family: str, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Zero-mean draw(s) with covariance ``cov``.

    ``laplacian`` is the Gaussian scale mixture ``sqrt(E) L z`` with
    ``E ~ Exp(1)``, which has covariance exactly ``cov`` and heavier tails.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L = psd_cholesky(cov)
    shape = (cov.shape[0],) if size is None else (size, cov.shape[0])
    z = rng.standard_normal(shape) @ L.T
    if family == GAUSSIAN:
        return z
    if family == LAPLACIAN:
        e = rng.exponential(1.0, None if size is None else (size, 1))
        return np.sqrt(e) * z
    raise ValueError(f"unknown noise family {family!r}")


@dataclass(eq=False)
class TrialResult:
    collided: bool
    reached_goal: bool
    steps: int
    runtime: float
    path: np.ndarray = field(repr=False)
    estimates: np.ndarray = field(repr=False)
    inputs: np.ndarray = field(repr=False)
    failure: str = ""


def collision_step(scenario: ScenarioConfig, states: np.ndarray) -> int | None:
    """First index whose true position, or the segment reaching it, is not in free space.

    Obstacle positions are read from each row's obstacle block.
    """
    system = scenario.system
    env = scenario.environment
    for t in range(states.shape[0]):
        z = states[t]
        p = z[:2]
        if not env.contains(p):
            return t
        for i, obs in enumerate(scenario.obstacles):
            sl = system.obstacle_slice(i)
            poly = obs.shape.translated(z[sl][:2])
            if poly.contains(p):
                return t
            if t >= 1 and segment_intersects(states[t - 1][:2], p, poly):
                return t
    return None


def _targets(ref: np.ndarray, i: int, horizon: int) -> np.ndarray:
    """Per-stage targets ``ref[i .. i+N]``, holding the last waypoint."""
    idx = np.clip(np.arange(i, i + horizon + 1), 0, ref.shape[0] - 1)
    return ref[idx]


def _feedforward(inputs: np.ndarray, i: int, horizon: int) -> np.ndarray:
    """Reference inputs ``inputs[i .. i+N-1]``; zero past the end of the reference."""
    out = np.zeros((horizon, inputs.shape[1]))
    idx = np.arange(i, i + horizon)
    ok = idx < inputs.shape[0]
    out[ok] = inputs[idx[ok]]
    return out


def _progress_index(ref: np.ndarray, i: int, x_hat: np.ndarray, weight: np.ndarray) -> int:
    """Reference index closest to ``x_hat`` in a forward window starting at ``i``.

    Closeness is the ``weight``-norm of the wrapped state error, so a
    turn-in-place stretch of the reference is still resolved by heading.
    """
    window = ref[i : i + WAYPOINT_WINDOW]
    e = x_hat[None, :] - window
    e[:, HEADING] = wrap_angle(e[:, HEADING])
    return i + int(np.argmin(np.einsum("ij,jk,ik->i", e, weight, e)))


def track(reference: TrajectorySegment, scenario: ScenarioConfig, rng: np.random.Generator) -> TrialResult:
    """Simulate one noisy closed-loop run along ``reference``.

    The true initial state is drawn from the start distribution.  Each step
    the NMPC tracks the reference waypoints ahead of the closest not-yet-passed
    one, the true state advances with a fresh process-noise draw and the UKF
    is updated with a fresh measurement.  The run ends at the first
    collision, on entering the goal region, or after ``max_track_steps``.
    """
    t_start = time.perf_counter()
    system = scenario.system
    n = system.n
    family = scenario.noise_family
    noise = scenario.noise
    decorr = scenario.filter_noise
    cfg = scenario.tracking_nmpc
    ref = np.asarray(reference.means, dtype=float)[:, :n]
    if ref.shape[0] == 0:
        raise ValueError("empty reference")
    K = ref.shape[0]
    ref_inputs = np.asarray(reference.inputs, dtype=float).reshape(-1, system.robot.m)

    start = scenario.start
    z = start.mean + sample_noise(family, start.covariance, rng)
    z[HEADING] = wrap_angle(z[HEADING])
    belief = BeliefState(start.mean, start.covariance)
    path, estimates, inputs = [z.copy()], [belief.mean.copy()], []
    joint_L = psd_cholesky(noise.joint_cov)
    nz = system.n_z
    warm = None
    y_prev = None
    k = 0
    stalled = 0
    collided = reached = False
    failure = ""
    if scenario.goal_region.contains(z[:2]):
        reached = True
    steps = 0
    while not reached and steps < scenario.max_track_steps:
        x_hat = belief.mean[:n]
        k_prev = k
        k = _progress_index(ref, k, x_hat, cfg.state_penalty)
        stalled = stalled + 1 if k == k_prev else 0
        if stalled >= STALL_STEPS and k < K - 1:
            # liveness guard against receding-horizon deadlock
            k += 1
            stalled = 0
        try:
            seq = nmpc_solve(
                x_hat,
                _targets(ref, k, cfg.horizon),
                cfg,
                system.robot,
                warm_start=warm,
                input_reference=_feedforward(ref_inputs, k, cfg.horizon),
            )
            u = seq.inputs[0]
            warm = shift_warm_start(seq)
            # joint draw keeps the process/sensor cross-correlation
            g = rng.standard_normal(joint_L.shape[0]) @ joint_L.T
            if family == LAPLACIAN:
                g = np.sqrt(rng.exponential(1.0)) * g
            w, v = g[:nz], g[nz:]
            z_next = system.transition(z, u) + system.robot.dt * w
            z_next[HEADING] = wrap_angle(z_next[HEADING])
            y = system.observe(z_next) + v
            belief = ukf_step(belief, u, y, decorr, system, scenario.ut, y_prev=y_prev)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            failure = f"{type(exc).__name__}: {exc}"
            break
        y_prev = y
        steps += 1
        path.append(z_next.copy())
        estimates.append(belief.mean.copy())
        inputs.append(u)
        if collision_step(scenario, np.array([z, z_next])) is not None:
            collided = True
            break
        z = z_next
        if scenario.goal_region.contains(z[:2]):
            reached = True
    if failure:
        collided = reached = False
    return TrialResult(
        collided,
        reached,
        steps,
        time.perf_counter() - t_start,
        np.array(path),
        np.array(estimates),
        np.array(inputs).reshape(-1, system.robot.m),
        failure,
    )


@dataclass(eq=False)
class CampaignSummary:
    n_trials: int
    base_seed: int
    collisions: int
    reached: int
    failures: int
    mean_runtime: float
    trials: list[TrialResult] = field(repr=False)

    def rows(self) -> list[dict]:
        return [
            {
                "trial": i,
                "seed": self.base_seed + i,
                "collided": int(t.collided),
                "reached_goal": int(t.reached_goal),
                "steps": t.steps,
                "runtime_s": t.runtime,
                "failure": t.failure,
            }
            for i, t in enumerate(self.trials)
        ]


def monte_carlo(scenario: ScenarioConfig, reference: TrajectorySegment, n_trials: int, base_seed: int = 0) -> CampaignSummary:
    """Independent trials, trial ``i`` seeded with ``base_seed + i``."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    trials = [track(reference, scenario, np.random.default_rng(base_seed + i)) for i in range(n_trials)]
    return CampaignSummary(
        n_trials,
        base_seed,
        sum(t.collided for t in trials),
        sum(t.reached_goal for t in trials),
        sum(bool(t.failure) for t in trials),
        float(np.mean([t.runtime for t in trials])),
        trials,
    )
