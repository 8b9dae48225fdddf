"""Scenario configuration: YAML text with unit-suffixed keys.

Validation errors carry the dotted field path and, when the text was parsed
from a file, the line of the offending entry::

    ConfigError: planning_controller.state_penalty (line 41): missing required field
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .control import NmpcConfig, SteerModels
from .env_model import (
    BICYCLE,
    CONSTANT_VELOCITY,
    FULL_STATE,
    GAUSSIAN,
    LAPLACIAN,
    RANGE_BEARING,
    STATIC,
    UNICYCLE,
    AmbiguitySet,
    ModelError,
    NoiseModel,
    Obstacle,
    Polytope,
    RobotModel,
    SensorModel,
    System,
)
from .estimation import BeliefState, CovarianceError, DecorrelatedModel, UtParams, decorrelate
from .risk import DR, MODES, RiskAllocation, RiskContext, allocate_risk, allocate_stage_risk

EUCLIDEAN = "euclidean"
NONHOLONOMIC = "nonholonomic"


class ConfigError(ValueError):
    """Invalid scenario configuration."""

    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        where = path if line is None else f"{path} (line {line})"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# parameter groups


@dataclass(frozen=True)
class RiskSpec:
    """``stage_risk`` (if set) overrides the uniform split of ``plan_risk``."""

    plan_risk: float = 0.1
    horizon: int = 999
    mode: str = DR
    stage_risk: float | None = None


@dataclass(frozen=True)
class MetricParams:
    k_phi: float = 1.2
    k_delta: float = 3.0
    gamma: float = 30.0
    mu_max: float = 2.0
    dimension: int = 2

    def __post_init__(self):
        for name in ("k_phi", "k_delta", "gamma", "mu_max", "dimension"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PlannerParams:
    steer_horizon: int = 30
    metric: str = EUCLIDEAN
    metric_params: MetricParams = field(default_factory=MetricParams)
    max_extend: float = 2.0
    goal_bias: float = 0.05
    max_speed: float = 0.0
    steer_tolerance: float = 0.1
    max_iterations: int = 1000
    stop_after_goal_nodes: int = 1


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    name: str
    robot: RobotModel
    environment: Polytope
    probabilistic_boundaries: bool
    goal_region: Polytope
    obstacles: tuple[Obstacle, ...]
    sensor: SensorModel
    robot_process_cov: np.ndarray
    sensor_cov: np.ndarray
    cross_corr: np.ndarray | None
    noise_family: str
    start: AmbiguitySet
    ut: UtParams
    planning_nmpc: NmpcConfig
    tracking_nmpc: NmpcConfig
    risk: RiskSpec
    planner: PlannerParams
    max_track_steps: int = 1000

    # -- derived models -------------------------------------------------

    @property
    def system(self) -> System:
        return System(self.robot, self.obstacles, self.sensor)

    @property
    def noise(self) -> NoiseModel:
        """Full environmental noise model (block-diagonal process covariance)."""
        return NoiseModel(self.system.process_cov(self.robot_process_cov), self.sensor_cov, self.cross_corr, self.noise_family)

    @property
    def filter_noise(self) -> DecorrelatedModel:
        """Decorrelated model of the noise as the filter sees it (``dt * w``)."""
        return decorrelate(self.noise.scaled_process(self.robot.dt))

    @property
    def start_belief(self) -> BeliefState:
        return BeliefState(self.start.mean, self.start.covariance)

    def steer_models(self) -> SteerModels:
        return SteerModels(
            self.system, self.filter_noise, self.ut, self.planner.steer_horizon, self.planner.steer_tolerance
        )

    def allocation(self) -> RiskAllocation:
        n_env = self.environment.n_facets if self.probabilistic_boundaries else 0
        counts = [o.shape.n_facets for o in self.obstacles]
        if self.risk.stage_risk is not None:
            return allocate_stage_risk(self.risk.stage_risk, n_env, counts, self.risk.horizon)
        return allocate_risk(self.risk.plan_risk, self.risk.horizon, n_env, counts)

    def risk_context(self, mode: str | None = None) -> RiskContext:
        system = self.system
        return RiskContext(
            self.obstacles,
            self.environment,
            self.allocation(),
            self.risk.mode if mode is None else mode,
            self.probabilistic_boundaries,
            system.n,
            tuple(system.obstacle_slice(i) for i in range(len(self.obstacles))),
        )

    # -- variants ---------------------------------------------------------

    def with_mode(self, mode: str) -> "ScenarioConfig":
        if mode not in MODES:
            raise ConfigError("risk.mode", f"must be one of {MODES}")
        return replace(self, risk=replace(self.risk, mode=mode))

    def with_noise_scale(self, scale: float) -> "ScenarioConfig":
        """Replace robot process and sensor covariances by ``scale * I``."""
        if not scale > 0:
            raise ConfigError("noise_scale", "must be positive")
        n, p = self.robot.n, self.sensor_cov.shape[0]
        return replace(
            self, robot_process_cov=scale * np.eye(n), sensor_cov=scale * np.eye(p), cross_corr=None
        )

    def with_noise_family(self, family: str) -> "ScenarioConfig":
        if family not in (GAUSSIAN, LAPLACIAN):
            raise ConfigError("noise.family", f"unknown family {family!r}")
        return replace(self, noise_family=family)

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        robot = {
            "kind": self.robot.kind,
            "dt_seconds": float(self.robot.dt),
            "input_lower": _floats(self.robot.input_lower),
            "input_upper": _floats(self.robot.input_upper),
        }
        if self.robot.kind == BICYCLE:
            robot["wheelbase_m"] = float(self.robot.wheelbase)
        obstacles = []
        for o in self.obstacles:
            entry = {"name": o.name, "center_m": _floats(o.state[:2]), "A": _matrix_out(o.shape.A), "b_m": _floats(o.shape.b)}
            entry["dynamics"] = o.dynamics
            if o.dynamics == CONSTANT_VELOCITY:
                entry["velocity_mps"] = _floats(o.state[2:4])
                entry["process_cov"] = _cov_out(o.process_cov)
            entry["facet_point_cov"] = _cov_out(o.facet_point_cov[0]) if _uniform(o.facet_point_cov) else [
                _cov_out(c) for c in o.facet_point_cov
            ]
            obstacles.append(entry)
        sensor = {"kind": self.sensor.kind}
        if self.sensor.kind == RANGE_BEARING:
            sensor["landmark_m"] = _floats(self.sensor.landmark)
            sensor["distortion_rad"] = float(self.sensor.distortion)
        noise = {
            "family": self.noise_family,
            "process_cov": _cov_out(self.robot_process_cov),
            "sensor_cov": _cov_out(self.sensor_cov),
        }
        if self.cross_corr is not None and np.any(self.cross_corr != 0):
            noise["cross_corr"] = _matrix_out(self.cross_corr)
        mp = self.planner.metric_params
        return {
            "name": self.name,
            "robot": robot,
            "environment": {"A": _matrix_out(self.environment.A), "b_m": _floats(self.environment.b), "probabilistic_boundaries": bool(self.probabilistic_boundaries)},
            "goal_region": {"A": _matrix_out(self.goal_region.A), "b_m": _floats(self.goal_region.b)},
            "obstacles": obstacles,
            "sensor": sensor,
            "noise": noise,
            "start": {"robot_state": _floats(self.start.mean[: self.robot.n]), "covariance": _cov_out(self.start.covariance)},
            "unscented": {"alpha": float(self.ut.alpha), "beta": float(self.ut.beta), "kappa": None if self.ut.kappa is None else float(self.ut.kappa)},
            "planning_controller": _nmpc_out(self.planning_nmpc),
            "tracking_controller": _nmpc_out(self.tracking_nmpc),
            "risk": {
                "plan_risk": float(self.risk.plan_risk),
                "horizon_steps": int(self.risk.horizon),
                "mode": self.risk.mode,
                "stage_risk": None if self.risk.stage_risk is None else float(self.risk.stage_risk),
            },
            "planner": {
                "steer_horizon_steps": int(self.planner.steer_horizon),
                "metric": self.planner.metric,
                "k_phi": float(mp.k_phi),
                "k_delta": float(mp.k_delta),
                "gamma": float(mp.gamma),
                "mu_max_m": float(mp.mu_max),
                "max_extend_m": float(self.planner.max_extend),
                "goal_bias": float(self.planner.goal_bias),
                "max_speed_mps": float(self.planner.max_speed),
                "steer_tolerance_m": float(self.planner.steer_tolerance),
                "max_iterations": int(self.planner.max_iterations),
                "stop_after_goal_nodes": int(self.planner.stop_after_goal_nodes),
            },
            "simulation": {"max_steps": int(self.max_track_steps)},
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None, width=120)


def _floats(v) -> list:
    return [float(x) for x in np.asarray(v, dtype=float).reshape(-1)]


def _matrix_out(m) -> list:
    return [_floats(row) for row in np.atleast_2d(m)]


def _cov_out(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if np.all(m == np.diag(np.diag(m))):
        return {"diag": _floats(np.diag(m))}
    return _matrix_out(m)


def _uniform(blocks) -> bool:
    return bool(np.all(blocks == blocks[0]))


def _nmpc_out(cfg: NmpcConfig) -> dict:
    return {
        "horizon_steps": cfg.horizon,
        "state_penalty": _cov_out(cfg.state_penalty),
        "input_penalty": _cov_out(cfg.input_penalty),
        "terminal_penalty": _cov_out(cfg.terminal_penalty),
        "max_iters": int(cfg.max_iters),
        "opt_tolerance": float(cfg.opt_tolerance),
        "defect_tolerance": float(cfg.defect_tolerance),
    }


# ---------------------------------------------------------------------------
# parsing


class _Reader:
    """Typed accessors over a nested dict with path/line bookkeeping."""

    def __init__(self, data, lines: dict):
        self.data = data
        self.lines = lines

    def line(self, path: tuple) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return None

    def fail(self, path: tuple, message: str):
        raise ConfigError(".".join(str(p) for p in path) or "<root>", message, self.line(path))

    def get(self, path: tuple, default=..., kind=None):
        node = self.data
        for i, key in enumerate(path):
            if isinstance(node, dict) and key in node:
                node = node[key]
            elif isinstance(node, list) and isinstance(key, int) and key < len(node):
                node = node[key]
            else:
                if default is ...:
                    self.fail(path[: i + 1], "missing required field")
                return default
        if kind is not None and node is not None and not isinstance(node, kind):
            self.fail(path, f"expected {_kind_name(kind)}")
        return node

    def number(self, path, default=..., positive=False, nonneg=False) -> float:
        v = self.get(path, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, "expected a number")
        v = float(v)
        if not math.isfinite(v):
            self.fail(path, "must be finite")
        if positive and not v > 0:
            self.fail(path, "must be positive")
        if nonneg and v < 0:
            self.fail(path, "must be nonnegative")
        return v

    def integer(self, path, default=..., minimum=None) -> int:
        v = self.get(path, default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(path, "expected an integer")
        if minimum is not None and v < minimum:
            self.fail(path, f"must be at least {minimum}")
        return int(v)

    def vector(self, path, dim=None, default=...) -> np.ndarray:
        v = self.get(path, default)
        if not isinstance(v, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
            self.fail(path, "expected a list of numbers")
        if dim is not None and len(v) != dim:
            self.fail(path, f"expected {dim} entries, got {len(v)}")
        return np.asarray(v, dtype=float)

    def matrix(self, path, rows=None, cols=None) -> np.ndarray:
        v = self.get(path)
        if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
            self.fail(path, "expected a list of rows")
        try:
            m = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "rows must be equal-length lists of numbers")
        if m.ndim != 2 or (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
            self.fail(path, f"expected a {rows or '?'}x{cols or '?'} matrix")
        return m

    def cov(self, path, dim: int, default=...) -> np.ndarray:
        """Square matrix given as ``{diag: [...]}``, ``{scale: s}`` or a list of rows."""
        v = self.get(path, default)
        if v is default and default is not ...:
            return default
        if isinstance(v, dict):
            if "diag" in v:
                return np.diag(self.vector(path + ("diag",), dim))
            if "scale" in v:
                return self.number(path + ("scale",), nonneg=True) * np.eye(dim)
            self.fail(path, "expected 'diag', 'scale' or a list of rows")
        return self.matrix(path, dim, dim)

    def choice(self, path, options, default=...) -> str:
        v = self.get(path, default)
        if v not in options:
            self.fail(path, f"must be one of {', '.join(map(str, options))}")
        return v


def _kind_name(kind) -> str:
    if isinstance(kind, tuple):
        return " or ".join(k.__name__ for k in kind)
    return {dict: "a mapping", list: "a list", str: "a string"}.get(kind, kind.__name__)


def _node_lines(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _node_lines(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _node_lines(v, path + (i,), out)
    return out


def _polytope(r: _Reader, path: tuple) -> Polytope:
    if r.get(path + ("bounds_m",), None) is not None:
        xmin, xmax, ymin, ymax = r.vector(path + ("bounds_m",), 4)
        if not (xmin < xmax and ymin < ymax):
            r.fail(path + ("bounds_m",), "expected [xmin, xmax, ymin, ymax] with min < max")
        return Polytope.box(xmin, xmax, ymin, ymax)
    A = r.matrix(path + ("A",), cols=2)
    b = r.vector(path + ("b_m",), A.shape[0])
    try:
        poly = Polytope(A, b)
        poly.vertices()
    except ModelError as exc:
        r.fail(path, str(exc))
    return poly


def _obstacle(r: _Reader, path: tuple) -> Obstacle:
    name = r.get(path + ("name",), "", str)
    dyn = r.choice(path + ("dynamics",), (STATIC, CONSTANT_VELOCITY), STATIC)
    if r.get(path + ("box_m",), None) is not None:
        xmin, xmax, ymin, ymax = r.vector(path + ("box_m",), 4)
        if not (xmin < xmax and ymin < ymax):
            r.fail(path + ("box_m",), "expected [xmin, xmax, ymin, ymax] with min < max")
        center = np.array([0.5 * (xmin + xmax), 0.5 * (ymin + ymax)])
        hx, hy = 0.5 * (xmax - xmin), 0.5 * (ymax - ymin)
        shape = Polytope.box(-hx, hx, -hy, hy)
    else:
        center = r.vector(path + ("center_m",), 2)
        shape = _polytope(r, path)
    state = center
    pc = None
    if dyn == CONSTANT_VELOCITY:
        state = np.concatenate([center, r.vector(path + ("velocity_mps",), 2)])
        pc = r.cov(path + ("process_cov",), 4, np.zeros((4, 4)))
    fpath = path + ("facet_point_cov",)
    raw = r.get(fpath, None)
    if raw is None:
        fc = np.zeros((2, 2))
    elif isinstance(raw, list) and raw and isinstance(raw[0], dict):
        if len(raw) != shape.n_facets:
            r.fail(fpath, f"expected {shape.n_facets} per-facet covariances")
        fc = np.array([r.cov(fpath + (j,), 2) for j in range(len(raw))])
    else:
        fc = r.cov(fpath, 2)
    try:
        return Obstacle(shape, state, dyn, pc, fc, name)
    except ModelError as exc:
        r.fail(path, str(exc))


def _nmpc(r: _Reader, path: tuple, n: int) -> NmpcConfig:
    Q = r.cov(path + ("state_penalty",), n)
    R = r.cov(path + ("input_penalty",), 2)
    QT = r.cov(path + ("terminal_penalty",), n, None)
    try:
        return NmpcConfig(
            r.integer(path + ("horizon_steps",), minimum=1),
            Q,
            R,
            QT,
            r.integer(path + ("max_iters",), 100, minimum=1),
            r.number(path + ("opt_tolerance",), 1e-6, positive=True),
            r.number(path + ("defect_tolerance",), 1e-6, positive=True),
        )
    except ValueError as exc:
        r.fail(path, str(exc))


def scenario_from_dict(data, lines: dict | None = None) -> ScenarioConfig:
    r = _Reader(data, lines or {})
    if not isinstance(data, dict):
        r.fail((), "expected a mapping at the top level")
    name = r.get(("name",), "scenario", str)

    kind = r.choice(("robot", "kind"), (UNICYCLE, BICYCLE))
    n = 3 if kind == UNICYCLE else 4
    try:
        robot = RobotModel(
            kind,
            r.number(("robot", "dt_seconds"), positive=True),
            r.vector(("robot", "input_lower"), 2),
            r.vector(("robot", "input_upper"), 2),
            r.number(("robot", "wheelbase_m"), 2.9, positive=True),
        )
    except ModelError as exc:
        r.fail(("robot",), str(exc))

    environment = _polytope(r, ("environment",))
    probabilistic = r.get(("environment", "probabilistic_boundaries"), True, bool)
    goal = _polytope(r, ("goal_region",))
    gx0, gx1, gy0, gy1 = goal.bounds()
    for corner in ((gx0, gy0), (gx0, gy1), (gx1, gy0), (gx1, gy1)):
        if not environment.contains(corner, 1e-9):
            r.fail(("goal_region",), "goal region must lie inside the environment")

    raw_obs = r.get(("obstacles",), [], list)
    obstacles = tuple(_obstacle(r, ("obstacles", i)) for i in range(len(raw_obs)))

    skind = r.choice(("sensor", "kind"), (FULL_STATE, RANGE_BEARING), FULL_STATE)
    sensor = SensorModel(
        skind,
        tuple(r.vector(("sensor", "landmark_m"), 2, [0.0, 0.0])),
        r.number(("sensor", "distortion_rad"), 0.0),
    )
    try:
        system = System(robot, obstacles, sensor)
    except ModelError as exc:
        r.fail(("sensor",), str(exc))
    n_z, p = system.n_z, system.p

    family = r.choice(("noise", "family"), (GAUSSIAN, LAPLACIAN), GAUSSIAN)
    Sw = r.cov(("noise", "process_cov"), n)
    Sv = r.cov(("noise", "sensor_cov"), p)
    M = None
    if r.get(("noise", "cross_corr"), None) is not None:
        M = r.matrix(("noise", "cross_corr"), n_z, p)
    try:
        NoiseModel(system.process_cov(Sw), Sv, M, family)
        if M is not None:
            decorrelate(NoiseModel(system.process_cov(Sw), Sv, M, family))
    except (ModelError, CovarianceError) as exc:
        r.fail(("noise",), str(exc))

    x0 = r.vector(("start", "robot_state"), n)
    z0 = system.initial_state(x0).vector
    try:
        start = AmbiguitySet(z0, r.cov(("start", "covariance"), n_z))
    except ModelError as exc:
        r.fail(("start", "covariance"), str(exc))

    kappa = r.get(("unscented", "kappa"), None)
    ut = UtParams(
        r.number(("unscented", "alpha"), 1.0, positive=True),
        r.number(("unscented", "beta"), 2.0),
        None if kappa is None else r.number(("unscented", "kappa")),
    )
    try:
        ut.lam(n_z)
    except ValueError as exc:
        r.fail(("unscented",), str(exc))

    planning = _nmpc(r, ("planning_controller",), n)
    tracking = _nmpc(r, ("tracking_controller",), n)

    beta = r.number(("risk", "plan_risk"), 0.1, positive=True)
    if beta > 0.5:
        r.fail(("risk", "plan_risk"), "must lie in (0, 0.5]")
    stage = r.get(("risk", "stage_risk"), None)
    if stage is not None:
        stage = r.number(("risk", "stage_risk"), positive=True)
        if stage > 0.5:
            r.fail(("risk", "stage_risk"), "must lie in (0, 0.5]")
    risk = RiskSpec(
        beta,
        r.integer(("risk", "horizon_steps"), 999, minimum=0),
        r.choice(("risk", "mode"), MODES, DR),
        stage,
    )

    pp = ("planner",)
    try:
        metric_params = MetricParams(
            r.number(pp + ("k_phi",), 1.2, positive=True),
            r.number(pp + ("k_delta",), 3.0, positive=True),
            r.number(pp + ("gamma",), 30.0, positive=True),
            r.number(pp + ("mu_max_m",), 2.0, positive=True),
        )
    except ValueError as exc:
        r.fail(pp, str(exc))
    goal_bias = r.number(pp + ("goal_bias",), 0.05, nonneg=True)
    if goal_bias > 1:
        r.fail(pp + ("goal_bias",), "must lie in [0, 1]")
    planner = PlannerParams(
        r.integer(pp + ("steer_horizon_steps",), 30, minimum=1),
        r.choice(pp + ("metric",), (EUCLIDEAN, NONHOLONOMIC), EUCLIDEAN),
        metric_params,
        r.number(pp + ("max_extend_m",), 2.0, positive=True),
        goal_bias,
        r.number(pp + ("max_speed_mps",), 0.0, nonneg=True),
        r.number(pp + ("steer_tolerance_m",), 0.1, positive=True),
        r.integer(pp + ("max_iterations",), 1000, minimum=1),
        r.integer(pp + ("stop_after_goal_nodes",), 1, minimum=1),
    )
    max_steps = r.integer(("simulation", "max_steps"), 1000, minimum=1)

    return ScenarioConfig(
        name, robot, environment, bool(probabilistic), goal, obstacles, sensor, Sw, Sv, M, family, start, ut,
        planning, tracking, risk, planner, max_steps,
    )


def loads_scenario(text: str) -> ScenarioConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<document>", f"not valid YAML: {getattr(exc, 'problem', exc)}", None if mark is None else mark.line + 1) from None
    lines = {} if node is None else _node_lines(node)
    return scenario_from_dict(data, lines)


def load_scenario(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read scenario: {exc.strerror}") from None
    return loads_scenario(text)


BUNDLED = {
    "unicycle-10x10": "unicycle-10x10.yaml",
    "bicycle-rangebearing": "bicycle-rangebearing.yaml",
}


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise KeyError(f"no bundled scenario {name!r}")
    return Path(__file__).parent / "scenarios" / BUNDLED[name]


def load_bundled(name: str) -> ScenarioConfig:
    return load_scenario(bundled_path(name))
