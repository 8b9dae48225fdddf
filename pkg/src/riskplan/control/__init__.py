"""Multiple-shooting NMPC and the closed-loop steering rollout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..env_model import BICYCLE, HEADING, UNICYCLE, RobotModel, System, wrap_angle
from ..estimation import BeliefState, DecorrelatedModel, UtParams, ukf_predict_planning, ukf_step
from . import _kernel

PLANNING = "planning"
TRACKING = "tracking"

STEER_TOLERANCE = 0.1

_KINDS = {UNICYCLE: _kernel.KIND_UNICYCLE, BICYCLE: _kernel.KIND_BICYCLE}


def _matrix(m, dim, name):
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = np.diag(m)
    if m.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}")
    if not np.allclose(m, m.T):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (m + m.T)


@dataclass(frozen=True, eq=False)
class NmpcConfig:
    """Horizon, penalties and solver limits.  1-D penalties are read as diagonals."""

    horizon: int
    state_penalty: np.ndarray
    input_penalty: np.ndarray
    terminal_penalty: np.ndarray | None = None
    max_iters: int = 100
    opt_tolerance: float = 1e-6
    defect_tolerance: float = 1e-6

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "horizon", int(self.horizon))
        Q = np.asarray(self.state_penalty, dtype=float)
        n = Q.shape[0]
        Q = _matrix(Q, n, "state_penalty")
        R = _matrix(self.input_penalty, 2, "input_penalty")
        QT = Q if self.terminal_penalty is None else _matrix(self.terminal_penalty, n, "terminal_penalty")
        for name, mat in (("state_penalty", Q), ("terminal_penalty", QT)):
            if np.linalg.eigvalsh(mat).min() < -1e-12 * max(1.0, np.abs(mat).max()):
                raise ValueError(f"{name} must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("input_penalty must be positive definite")
        if self.max_iters < 1 or self.opt_tolerance <= 0 or self.defect_tolerance <= 0:
            raise ValueError("solver limits must be positive")
        object.__setattr__(self, "state_penalty", Q)
        object.__setattr__(self, "input_penalty", R)
        object.__setattr__(self, "terminal_penalty", QT)

    @property
    def n(self) -> int:
        return self.state_penalty.shape[0]

    def stage_cost(self, error, u) -> float:
        error = np.asarray(error, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(error @ self.state_penalty @ error + u @ self.input_penalty @ u)


@dataclass(frozen=True, eq=False)
class ControlSequence:
    """Solver output.

    ``merit_history`` holds the augmented-Lagrangian merit of every accepted
    iterate and ``merit_stages`` the multiplier/penalty stage it was evaluated
    under; within a stage the history is nonincreasing.
    """

    inputs: np.ndarray
    predicted_states: np.ndarray
    objective: float
    max_defect: float
    iterations: int
    converged: bool
    merit_history: np.ndarray = field(repr=False)
    merit_stages: np.ndarray = field(repr=False)


def state_error(x, target) -> np.ndarray:
    """``x - target`` with the heading difference wrapped."""
    e = np.asarray(x, dtype=float) - np.asarray(target, dtype=float)
    e[..., HEADING] = wrap_angle(e[..., HEADING])
    return e


def rollout(model: RobotModel, x0, inputs) -> np.ndarray:
    """Noise-free open-loop states for an input sequence (heading unwrapped)."""
    return _kernel.rollout(
        _KINDS[model.kind], model.dt, model.wheelbase, np.asarray(x0, dtype=float), np.asarray(inputs, dtype=float)
    )


def shift_warm_start(seq: ControlSequence) -> np.ndarray:
    """Inputs of ``seq`` advanced one step, repeating the last input."""
    U = seq.inputs
    return np.vstack([U[1:], U[-1:]])


def nmpc_solve(
    x_hat, target, cfg: NmpcConfig, model: RobotModel, warm_start=None, input_reference=None
) -> ControlSequence:
    """Minimise ``sum ||e_k||_Q^2 + ||u_k - r_k||_R^2 + ||e_N||_QT^2`` over box-bounded inputs.

    Parameters
    ----------
    x_hat : (n,) initial robot state.
    target : (n,) constant target or (N+1, n) per-stage targets.
    warm_start : optional (N, m) initial inputs; states are initialised by a
        noise-free rollout so the initial iterate is dynamically feasible.
    input_reference : optional (N, m) feedforward inputs ``r_k`` (zero by default).

    Non-convergence within ``cfg.max_iters`` is reported through
    ``converged=False``; the best iterate is still returned.
    """
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    n, m, N = model.n, model.m, cfg.horizon
    if x_hat.shape != (n,) or cfg.n != n:
        raise ValueError("state dimension does not match the robot model")
    targets = np.asarray(target, dtype=float)
    if targets.ndim == 1:
        if targets.shape != (n,):
            raise ValueError("target dimension does not match the robot model")
        targets = np.broadcast_to(targets, (N + 1, n))
    elif targets.shape != (N + 1, n):
        raise ValueError("per-stage targets must have shape (N+1, n)")
    targets = np.ascontiguousarray(targets)
    U0 = np.zeros((N, m)) if warm_start is None else model.clamp(np.asarray(warm_start, dtype=float))
    if U0.shape != (N, m):
        raise ValueError("warm start must have shape (N, m)")
    uref = np.zeros((N, m)) if input_reference is None else np.ascontiguousarray(input_reference, dtype=float)
    if uref.shape != (N, m):
        raise ValueError("input reference must have shape (N, m)")
    X0 = rollout(model, x_hat, U0)[1:]
    hist = np.empty(2 * cfg.max_iters + 2)
    stages = np.empty(2 * cfg.max_iters + 2, dtype=np.int64)
    U, X, cost, max_def, iters, conv, nh = _kernel.solve(
        _KINDS[model.kind],
        float(model.dt),
        float(model.wheelbase),
        x_hat,
        targets,
        uref,
        cfg.state_penalty,
        cfg.input_penalty,
        cfg.terminal_penalty,
        model.input_lower,
        model.input_upper,
        U0,
        np.ascontiguousarray(X0),
        HEADING,
        cfg.max_iters,
        cfg.opt_tolerance,
        cfg.defect_tolerance,
        hist,
        stages,
    )
    return ControlSequence(U, X, float(cost), float(max_def), int(iters), bool(conv), hist[:nh].copy(), stages[:nh].copy())


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    """Belief sequence produced by steering.

    ``means``/``covs`` have one more entry than ``inputs``; ``true_states`` is
    only filled in tracking mode.
    """

    means: np.ndarray
    covs: np.ndarray
    inputs: np.ndarray
    cost: float
    reached: bool
    true_states: np.ndarray | None = None

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def terminal(self) -> BeliefState:
        return BeliefState(self.means[-1], self.covs[-1])


def concatenate_segments(segments) -> TrajectorySegment:
    """Join consecutive segments; the shared boundary belief appears once."""
    segments = list(segments)
    if not segments:
        raise ValueError("nothing to concatenate")
    means = [segments[0].means]
    covs = [segments[0].covs]
    inputs = [segments[0].inputs]
    for seg in segments[1:]:
        means.append(seg.means[1:])
        covs.append(seg.covs[1:])
        inputs.append(seg.inputs)
    m = segments[0].inputs.shape[1] if segments[0].inputs.ndim == 2 else 2
    return TrajectorySegment(
        np.vstack(means),
        np.concatenate(covs, axis=0),
        np.vstack([i.reshape(-1, m) for i in inputs]),
        float(sum(s.cost for s in segments)),
        bool(segments[-1].reached),
    )


@dataclass(frozen=True, eq=False)
class SteerModels:
    """Everything steering needs besides the NMPC penalties."""

    system: System
    decorr: DecorrelatedModel
    ut_params: UtParams = UtParams()
    max_steps: int = 30
    tolerance: float = STEER_TOLERANCE


@dataclass(frozen=True, eq=False)
class NoiseDraws:
    """Realisations for tracking-mode steering.

    ``process`` is (T, n_z) and ``sensor`` (T, p); ``initial_state`` defaults
    to the belief mean.
    """

    process: np.ndarray
    sensor: np.ndarray
    initial_state: np.ndarray | None = None


def _position_error(mean, target) -> float:
    return float(np.hypot(mean[0] - target[0], mean[1] - target[1]))


def steer(
    belief: BeliefState,
    target,
    cfg: NmpcConfig,
    models: SteerModels,
    mode: str = PLANNING,
    noise_draws: NoiseDraws | None = None,
) -> TrajectorySegment:
    """Receding-horizon rollout from ``belief`` towards the robot state ``target``.

    Each step solves :func:`nmpc_solve` from the current robot mean, applies the
    first input and advances the belief.  The loop stops once the position
    error is within ``models.tolerance`` or after ``models.max_steps`` steps.
    """
    system = models.system
    n = system.n
    target = np.asarray(target, dtype=float).reshape(-1)
    if target.shape != (n,):
        raise ValueError("target must be a robot state")
    if mode not in (PLANNING, TRACKING):
        raise ValueError(f"unknown steering mode {mode!r}")
    if mode == TRACKING and noise_draws is None:
        raise ValueError("tracking mode needs noise draws")

    means = [belief.mean.copy()]
    covs = [belief.cov.copy()]
    inputs = []
    truth = None
    if mode == TRACKING:
        z0 = belief.mean if noise_draws.initial_state is None else noise_draws.initial_state
        truth = [np.asarray(z0, dtype=float).copy()]
    cost = 0.0
    warm = None
    y_prev = None
    current = belief
    for t in range(models.max_steps):
        x = current.mean[:n]
        if _position_error(x, target) <= models.tolerance:
            break
        seq = nmpc_solve(x, target, cfg, system.robot, warm_start=warm)
        u = seq.inputs[0]
        warm = shift_warm_start(seq)
        cost += cfg.stage_cost(state_error(x, target), u)
        if mode == PLANNING:
            current = ukf_predict_planning(current, u, models.decorr, system, models.ut_params)
        else:
            z = truth[-1]
            z_next = system.transition(z, u) + system.robot.dt * noise_draws.process[t]
            z_next[HEADING] = wrap_angle(z_next[HEADING])
            y = system.observe(z_next) + noise_draws.sensor[t]
            current = ukf_step(current, u, y, models.decorr, system, models.ut_params, y_prev=y_prev)
            y_prev = y
            truth.append(z_next)
        means.append(current.mean.copy())
        covs.append(current.cov.copy())
        inputs.append(u)
    reached = _position_error(current.mean[:n], target) <= models.tolerance
    return TrajectorySegment(
        np.array(means),
        np.array(covs),
        np.array(inputs).reshape(-1, system.robot.m),
        float(cost),
        bool(reached),
        None if truth is None else np.array(truth),
    )
