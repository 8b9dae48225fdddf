"""Robot, obstacle, sensor and noise models.

All model types are immutable value objects; the step/measure functions are
pure.  States are plain 1-D ``numpy`` arrays.  The concatenated environmental
state stacks the robot state followed by each obstacle state::

    Z = [x_robot | X_obs_1 | ... | X_obs_F]

Vectorised versions used by the filter live on :class:`System` and accept a
leading batch axis (one row per sigma point).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNICYCLE = "unicycle"
BICYCLE = "bicycle"
STATIC = "static"
CONSTANT_VELOCITY = "constant_velocity"
FULL_STATE = "full_state"
RANGE_BEARING = "range_bearing"
GAUSSIAN = "gaussian"
LAPLACIAN = "laplacian"

HEADING = 2  # heading index for both robot kinds


class ModelError(ValueError):
    """Raised for invalid model construction or dimension mismatches."""


class MeasurementError(ValueError):
    """Raised when a measurement is undefined at the given state."""


def wrap_angle(a):
    """Wrap angle(s) to the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def _as_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ModelError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    return arr


def _as_square(m, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.shape != (dim, dim):
        raise ModelError(f"{name} has shape {arr.shape}, expected {(dim, dim)}")
    return arr


def check_psd(m: np.ndarray, name: str, tol: float = 1e-12) -> None:
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-14):
        raise ModelError(f"{name} is not symmetric")
    if m.size == 0:
        return
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.linalg.eigvalsh(m).min() < -tol * scale:
        raise ModelError(f"{name} is not positive semidefinite")


# ---------------------------------------------------------------------------
# robot


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Discrete-time kinematic robot with box input bounds.

    ``unicycle``: state (x, y, theta), input (v, omega).
    ``bicycle``: state (x, y, psi, v), input (a, delta), wheelbase ``wheelbase``.
    """

    kind: str
    dt: float
    input_lower: np.ndarray
    input_upper: np.ndarray
    wheelbase: float = 2.9

    def __post_init__(self):
        if self.kind not in (UNICYCLE, BICYCLE):
            raise ModelError(f"unknown robot kind {self.kind!r}")
        if not self.dt > 0:
            raise ModelError("dt must be positive")
        lo = _as_vector(self.input_lower, 2, "input_lower")
        hi = _as_vector(self.input_upper, 2, "input_upper")
        if np.any(lo >= hi):
            raise ModelError("input_lower must be strictly below input_upper")
        if self.kind == BICYCLE and not self.wheelbase > 0:
            raise ModelError("wheelbase must be positive")
        object.__setattr__(self, "input_lower", lo)
        object.__setattr__(self, "input_upper", hi)

    @property
    def n(self) -> int:
        return 3 if self.kind == UNICYCLE else 4

    @property
    def m(self) -> int:
        return 2

    def clamp(self, u) -> np.ndarray:
        return np.clip(u, self.input_lower, self.input_upper)

    def drift(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Continuous-time drift, batched over leading axes of ``x``/``u``."""
        if self.kind == UNICYCLE:
            th = x[..., 2]
            v, om = u[..., 0], u[..., 1]
            return np.stack([v * np.cos(th), v * np.sin(th), om * np.ones_like(th)], axis=-1)
        psi, v = x[..., 2], x[..., 3]
        a, delta = u[..., 0], u[..., 1]
        return np.stack(
            [
                v * np.cos(psi),
                v * np.sin(psi),
                v / self.wheelbase * np.tan(delta),
                a * np.ones_like(psi),
            ],
            axis=-1,
        )


def step_robot(model: RobotModel, x, u, w=None) -> np.ndarray:
    """One Euler step ``x + dt*drift(x, u) + dt*w`` with clamped input.

    The heading of the result is wrapped to (-pi, pi].
    """
    x = _as_vector(x, model.n, "state")
    u = model.clamp(_as_vector(u, model.m, "input"))
    w = np.zeros(model.n) if w is None else _as_vector(w, model.n, "noise")
    out = x + model.dt * model.drift(x, u) + model.dt * w
    out[HEADING] = wrap_angle(out[HEADING])
    return out


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True, eq=False)
class Polytope:
    """Closed polytope ``{p : A p <= b}``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ModelError("A and b row counts differ")
        if A.shape[0] == 0:
            raise ModelError("polytope needs at least one facet")
        if np.any(np.linalg.norm(A, axis=1) == 0):
            raise ModelError("polytope has a zero facet normal")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def box(cls, xmin: float, xmax: float, ymin: float, ymax: float) -> "Polytope":
        if not (xmin < xmax and ymin < ymax):
            raise ModelError("empty box")
        A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        return cls(A, np.array([xmax, -xmin, ymax, -ymin]))

    @property
    def n_facets(self) -> int:
        return self.A.shape[0]

    def contains(self, p, tol: float = 0.0) -> bool:
        return bool(np.all(self.A @ np.asarray(p, dtype=float) <= self.b + tol))

    def translated(self, offset) -> "Polytope":
        return Polytope(self.A, self.b + self.A @ np.asarray(offset, dtype=float))

    def facet_points(self) -> np.ndarray:
        """One point on each facet hyperplane (closest to the origin)."""
        norms2 = np.sum(self.A**2, axis=1)
        return self.A * (self.b / norms2)[:, None]

    def vertices(self) -> np.ndarray:
        """Counter-clockwise vertices of a bounded 2-D polytope."""
        A, b = self.A, self.b
        pts = []
        for i in range(len(b)):
            for j in range(i + 1, len(b)):
                M = A[[i, j]]
                if abs(np.linalg.det(M)) < 1e-12:
                    continue
                p = np.linalg.solve(M, b[[i, j]])
                if np.all(A @ p <= b + 1e-9):
                    pts.append(p)
        if not pts:
            raise ModelError("polytope is empty or unbounded")
        pts = np.unique(np.round(np.array(pts), 12), axis=0)
        c = pts.mean(axis=0)
        order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
        return pts[order]

    def bounds(self) -> tuple[float, float, float, float]:
        v = self.vertices()
        return float(v[:, 0].min()), float(v[:, 0].max()), float(v[:, 1].min()), float(v[:, 1].max())


@dataclass(frozen=True, eq=False)
class Obstacle:
    """Convex obstacle described by a centred shape and a centroid state.

    ``static`` obstacles have state (px, py); ``constant_velocity`` obstacles
    have state (px, py, vx, vy).  The occupied set at state X is
    ``shape`` translated by the position part of X (no rotation).
    """

    shape: Polytope
    state: np.ndarray
    dynamics: str = STATIC
    process_cov: np.ndarray | None = None
    facet_point_cov: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.dynamics not in (STATIC, CONSTANT_VELOCITY):
            raise ModelError(f"unknown obstacle dynamics {self.dynamics!r}")
        l = 2 if self.dynamics == STATIC else 4
        state = _as_vector(self.state, l, "obstacle state")
        pc = np.zeros((l, l)) if self.process_cov is None else _as_square(self.process_cov, l, "process_cov")
        check_psd(pc, "obstacle process_cov")
        if self.dynamics == STATIC and np.any(pc != 0):
            raise ModelError("static obstacles must have zero process covariance")
        fc = np.zeros((2, 2)) if self.facet_point_cov is None else np.asarray(self.facet_point_cov, dtype=float)
        if fc.shape == (2, 2):
            fc = np.broadcast_to(fc, (self.shape.n_facets, 2, 2)).copy()
        if fc.shape != (self.shape.n_facets, 2, 2):
            raise ModelError("facet_point_cov must be 2x2 or one 2x2 block per facet")
        for k in range(fc.shape[0]):
            check_psd(fc[k], "facet_point_cov")
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "process_cov", pc)
        object.__setattr__(self, "facet_point_cov", fc)

    @property
    def l(self) -> int:
        return self.state.shape[0]

    def step(self, X: np.ndarray, dt: float) -> np.ndarray:
        """Noise-free obstacle dynamics, batched over leading axes."""
        if self.dynamics == STATIC:
            return np.array(X, dtype=float, copy=True)
        out = np.array(X, dtype=float, copy=True)
        out[..., 0:2] = X[..., 0:2] + dt * X[..., 2:4]
        return out

    def nominal_translation(self, X: np.ndarray, dt: float) -> np.ndarray:
        if self.dynamics == STATIC:
            return np.zeros(2)
        return dt * np.asarray(X, dtype=float)[2:4]

    def occupied(self, X=None) -> Polytope:
        X = self.state if X is None else np.asarray(X, dtype=float)
        return self.shape.translated(X[0:2])


# ---------------------------------------------------------------------------
# sensors and noise


@dataclass(frozen=True, eq=False)
class SensorModel:
    """Output map ``S(Z)``.

    ``full_state`` returns Z itself.  ``range_bearing`` returns range and
    bearing (relative to heading) to ``landmark`` followed by the distorted
    obstacle positions ``cos(theta*) x_obs, sin(theta*) y_obs`` for each
    obstacle.
    """

    kind: str = FULL_STATE
    landmark: tuple[float, float] = (0.0, 0.0)
    distortion: float = 0.0

    def __post_init__(self):
        if self.kind not in (FULL_STATE, RANGE_BEARING):
            raise ModelError(f"unknown sensor kind {self.kind!r}")
        object.__setattr__(self, "landmark", tuple(float(v) for v in self.landmark))

    def output_dim(self, n_z: int, n_obstacles: int) -> int:
        return n_z if self.kind == FULL_STATE else 2 + 2 * n_obstacles


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Joint zero-mean process/sensor noise with cross-correlation ``M``.

    The joint covariance ``[[Sw, M], [M^T, Sv]]`` must be positive
    semidefinite with ``Sv`` positive definite, which is checked through the
    Schur complement ``Sw - M Sv^-1 M^T``.
    """

    process_cov: np.ndarray
    sensor_cov: np.ndarray
    cross_corr: np.ndarray | None = None
    family: str = GAUSSIAN

    def __post_init__(self):
        Sw = np.atleast_2d(np.asarray(self.process_cov, dtype=float))
        Sv = np.atleast_2d(np.asarray(self.sensor_cov, dtype=float))
        nz, p = Sw.shape[0], Sv.shape[0]
        Sw = _as_square(Sw, nz, "process_cov")
        Sv = _as_square(Sv, p, "sensor_cov")
        M = np.zeros((nz, p)) if self.cross_corr is None else np.asarray(self.cross_corr, dtype=float).reshape(nz, p)
        if self.family not in (GAUSSIAN, LAPLACIAN):
            raise ModelError(f"unknown noise family {self.family!r}")
        check_psd(Sw, "process_cov")
        try:
            np.linalg.cholesky(Sv)
        except np.linalg.LinAlgError:
            raise ModelError("sensor_cov is not positive definite") from None
        if not np.allclose(Sv, Sv.T, rtol=1e-10, atol=0):
            raise ModelError("sensor_cov is not symmetric")
        sv = np.linalg.svd(M, compute_uv=False)
        if sv.size > 1 and sv[1] > 1e-9 * max(sv[0], 1e-300):
            raise ModelError("cross-correlation M must have rank at most one")
        schur = Sw - M @ np.linalg.solve(Sv, M.T)
        schur = 0.5 * (schur + schur.T)
        scale = max(float(np.max(np.abs(Sw))), float(np.max(np.abs(M))) ** 2 / float(np.max(np.abs(Sv))), 1e-300)
        if np.linalg.eigvalsh(schur).min() < -1e-10 * scale:
            raise ModelError("joint noise covariance is not positive semidefinite")
        object.__setattr__(self, "process_cov", Sw)
        object.__setattr__(self, "sensor_cov", Sv)
        object.__setattr__(self, "cross_corr", M)

    @property
    def joint_cov(self) -> np.ndarray:
        return np.block([[self.process_cov, self.cross_corr], [self.cross_corr.T, self.sensor_cov]])

    def scaled_process(self, factor: float) -> "NoiseModel":
        """Noise model of ``factor * w`` (the filter sees ``dt * w``)."""
        return NoiseModel(
            self.process_cov * factor**2, self.sensor_cov, self.cross_corr * factor, self.family
        )


@dataclass(frozen=True, eq=False)
class AmbiguitySet:
    """Moment-based ambiguity set: all distributions with this mean/covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, name="mean")
        cov = _as_square(self.covariance, mean.shape[0], "covariance")
        check_psd(cov, "ambiguity covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


# ---------------------------------------------------------------------------
# environmental state


@dataclass(frozen=True, eq=False)
class EnvironmentState:
    """Robot state plus per-obstacle states; ``vector`` is the stacked Z."""

    robot: np.ndarray
    obstacles: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "robot", _as_vector(self.robot, name="robot state"))
        object.__setattr__(self, "obstacles", tuple(_as_vector(o, name="obstacle state") for o in self.obstacles))

    @property
    def n_z(self) -> int:
        return self.robot.shape[0] + sum(o.shape[0] for o in self.obstacles)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.robot, *self.obstacles])

    @classmethod
    def from_vector(cls, Z, n: int, obstacle_dims=()) -> "EnvironmentState":
        Z = _as_vector(Z, n + sum(obstacle_dims), "environment state")
        blocks, k = [], n
        for l in obstacle_dims:
            blocks.append(Z[k : k + l])
            k += l
        return cls(Z[:n], tuple(blocks))


def extract_robot_state(Z, n: int | None = None) -> np.ndarray:
    """Robot block ``C_xr Z`` of an environmental state."""
    if isinstance(Z, EnvironmentState):
        return Z.robot.copy()
    if n is None:
        raise ModelError("robot dimension required for a raw state vector")
    return _as_vector(Z)[:n].copy()


@dataclass(frozen=True, eq=False)
class System:
    """Robot, obstacles and sensor bundled with the state layout."""

    robot: RobotModel
    obstacles: tuple[Obstacle, ...] = ()
    sensor: SensorModel = field(default_factory=SensorModel)

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.sensor.kind == RANGE_BEARING and not self.obstacles:
            raise ModelError("range_bearing sensor needs at least one obstacle")

    @property
    def n(self) -> int:
        return self.robot.n

    @property
    def obstacle_dims(self) -> tuple[int, ...]:
        return tuple(o.l for o in self.obstacles)

    @property
    def n_z(self) -> int:
        return self.n + sum(self.obstacle_dims)

    @property
    def p(self) -> int:
        return self.sensor.output_dim(self.n_z, len(self.obstacles))

    def obstacle_slice(self, i: int) -> slice:
        start = self.n + sum(self.obstacle_dims[:i])
        return slice(start, start + self.obstacle_dims[i])

    @property
    def state_angles(self) -> tuple[int, ...]:
        return (HEADING,)

    @property
    def output_angles(self) -> tuple[int, ...]:
        return (HEADING,) if self.sensor.kind == FULL_STATE else (1,)

    def initial_state(self, robot_state) -> EnvironmentState:
        return EnvironmentState(robot_state, tuple(o.state for o in self.obstacles))

    def transition(self, Z: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Noise-free ``f~(Z, u)`` for a batch of stacked states (rows)."""
        Z = np.asarray(Z, dtype=float)
        out = np.empty_like(Z)
        n, dt = self.n, self.robot.dt
        x = Z[..., :n]
        out[..., :n] = x + dt * self.robot.drift(x, np.broadcast_to(u, x.shape[:-1] + (2,)))
        out[..., HEADING] = wrap_angle(out[..., HEADING])
        for i, obs in enumerate(self.obstacles):
            sl = self.obstacle_slice(i)
            out[..., sl] = obs.step(Z[..., sl], dt)
        return out

    def observe(self, Z: np.ndarray) -> np.ndarray:
        """Noise-free ``S(Z)`` for a batch of stacked states (rows)."""
        Z = np.asarray(Z, dtype=float)
        if self.sensor.kind == FULL_STATE:
            return Z.copy()
        lx, ly = self.sensor.landmark
        dx, dy = Z[..., 0] - lx, Z[..., 1] - ly
        rng = np.hypot(dx, dy)
        if np.any(rng == 0.0):
            raise MeasurementError("bearing undefined: robot is at the landmark")
        cols = [rng, wrap_angle(np.arctan2(dy, dx) - Z[..., HEADING])]
        c, s = math.cos(self.sensor.distortion), math.sin(self.sensor.distortion)
        for i in range(len(self.obstacles)):
            sl = self.obstacle_slice(i)
            cols.append(c * Z[..., sl.start])
            cols.append(s * Z[..., sl.start + 1])
        return np.stack(cols, axis=-1)

    def process_cov(self, robot_cov) -> np.ndarray:
        """Block-diagonal process covariance diag(robot, obstacle_1..F)."""
        blocks = [np.atleast_2d(np.asarray(robot_cov, dtype=float))] + [o.process_cov for o in self.obstacles]
        out = np.zeros((self.n_z, self.n_z))
        k = 0
        for b in blocks:
            out[k : k + b.shape[0], k : k + b.shape[0]] = b
            k += b.shape[0]
        return out


def step_environment(system: System, Z: EnvironmentState, u, w=None) -> EnvironmentState:
    """Advance robot and obstacles one step; ``w`` is the stacked noise.

    As for the robot, the obstacle noise block enters scaled by ``dt``.
    """
    if Z.robot.shape[0] != system.n or tuple(o.shape[0] for o in Z.obstacles) != system.obstacle_dims:
        raise ModelError("environment state does not match the system layout")
    w = np.zeros(system.n_z) if w is None else _as_vector(w, system.n_z, "noise")
    robot = step_robot(system.robot, Z.robot, u, w[: system.n])
    blocks = []
    for i, (obs, X) in enumerate(zip(system.obstacles, Z.obstacles)):
        blocks.append(obs.step(X, system.robot.dt) + system.robot.dt * w[system.obstacle_slice(i)])
    return EnvironmentState(robot, tuple(blocks))


def measure(system: System, Z: EnvironmentState, v=None) -> np.ndarray:
    """Noisy output ``S(Z) + v``."""
    Zv = Z.vector if isinstance(Z, EnvironmentState) else _as_vector(Z, system.n_z, "environment state")
    y = system.observe(Zv)
    if v is not None:
        y = y + _as_vector(v, system.p, "sensor noise")
    return y
