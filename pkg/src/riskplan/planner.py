"""NRB-RRT*: an RRT* over belief states with risk-checked steering edges.

Each node stores the belief segment that steering produced from its parent,
the target the steering law was aimed at, and the cumulative cost
``J[node] = J[parent] + segment.cost``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .control import PLANNING, TrajectorySegment, concatenate_segments, steer
from .env_model import BICYCLE, HEADING, Polytope, wrap_angle
from .estimation import BeliefState
from .risk import dr_feasible
from .scenario import EUCLIDEAN, MetricParams, ScenarioConfig


# ---------------------------------------------------------------------------
# metric


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @classmethod
    def of(cls, state) -> "Pose":
        return cls(float(state[0]), float(state[1]), float(state[HEADING]))


def egocentric_coords(p0: Pose, pT: Pose) -> tuple[float, float, float]:
    """``(r, phi, delta)`` of ``pT`` seen from ``p0`` along the line of sight."""
    dx, dy = pT.x - p0.x, pT.y - p0.y
    r = math.hypot(dx, dy)
    if r == 0.0:
        return 0.0, float(wrap_angle(pT.heading - p0.heading)), 0.0
    sight = math.atan2(dy, dx)
    return r, float(wrap_angle(pT.heading - sight)), float(wrap_angle(p0.heading - sight))


def nonholonomic_distance(p0: Pose, pT: Pose, params: MetricParams) -> float:
    """``sqrt(r^2 + k_phi^2 phi^2) + k_delta |delta|``; asymmetric in its arguments."""
    r, phi, delta = egocentric_coords(p0, pT)
    return math.sqrt(r * r + (params.k_phi * phi) ** 2) + params.k_delta * abs(delta)


def near_radius(tree_size: int, params: MetricParams) -> float:
    """``min(gamma (log N / N)^(1/(d+1)), mu_max)``."""
    if tree_size < 1:
        raise ValueError("tree_size must be at least 1")
    if tree_size == 1:
        return params.mu_max
    r = params.gamma * (math.log(tree_size) / tree_size) ** (1.0 / (params.dimension + 1))
    return min(r, params.mu_max)


def _distances(poses: np.ndarray, target: np.ndarray, metric: str, params: MetricParams) -> np.ndarray:
    """Distance from every pose row (x, y, heading) to ``target``."""
    dx = target[0] - poses[:, 0]
    dy = target[1] - poses[:, 1]
    r = np.hypot(dx, dy)
    if metric == EUCLIDEAN:
        return r
    sight = np.where(r > 0, np.arctan2(dy, dx), poses[:, 2])
    phi = np.where(r > 0, wrap_angle(target[2] - sight), wrap_angle(target[2] - poses[:, 2]))
    delta = np.where(r > 0, wrap_angle(poses[:, 2] - sight), 0.0)
    return np.sqrt(r * r + (params.k_phi * phi) ** 2) + params.k_delta * np.abs(delta)


def _distances_from(pose: np.ndarray, targets: np.ndarray, metric: str, params: MetricParams) -> np.ndarray:
    """Distance from ``pose`` to every target row."""
    if metric == EUCLIDEAN:
        return np.hypot(targets[:, 0] - pose[0], targets[:, 1] - pose[1])
    return np.array([nonholonomic_distance(Pose.of(pose), Pose.of(t), params) for t in targets])


# ---------------------------------------------------------------------------
# tree


@dataclass(eq=False)
class TreeNode:
    id: int
    parent: int | None
    segment: TrajectorySegment
    target: np.ndarray
    cost: float
    children: list[int] = field(default_factory=list)

    @property
    def terminal_mean(self) -> np.ndarray:
        return self.segment.means[-1]

    @property
    def terminal_cov(self) -> np.ndarray:
        return self.segment.covs[-1]

    @property
    def belief(self) -> BeliefState:
        return BeliefState(self.terminal_mean, self.terminal_cov)


@dataclass(eq=False)
class Tree:
    nodes: list[TreeNode]
    goal_region: Polytope
    rng_seed: int
    root: int = 0
    goal_nodes: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def poses(self) -> np.ndarray:
        return np.array([[n.terminal_mean[0], n.terminal_mean[1], n.terminal_mean[HEADING]] for n in self.nodes])

    def ancestors(self, node_id: int) -> set[int]:
        out = set()
        p = self.nodes[node_id].parent
        while p is not None:
            out.add(p)
            p = self.nodes[p].parent
        return out

    def path(self, node_id: int) -> list[int]:
        ids = []
        k: int | None = node_id
        while k is not None:
            ids.append(k)
            k = self.nodes[k].parent
        return ids[::-1]

    def best_goal(self) -> int | None:
        if not self.goal_nodes:
            return None
        return min(self.goal_nodes, key=lambda k: (self.nodes[k].cost, k))

    def reference(self, node_id: int) -> TrajectorySegment:
        """Root-to-node concatenation of segments."""
        return concatenate_segments(self.nodes[k].segment for k in self.path(node_id))

    def to_dict(self, robot_dim: int) -> dict:
        n = robot_dim
        nodes = []
        for node in self.nodes:
            seg = node.segment
            nodes.append(
                {
                    "id": node.id,
                    "parent": node.parent,
                    "cost": node.cost,
                    "segment_cost": seg.cost,
                    "target": node.target.tolist(),
                    "terminal_mean": node.terminal_mean.tolist(),
                    "terminal_cov": node.terminal_cov.tolist(),
                    "robot_means": seg.means[:, :n].tolist(),
                    "inputs": seg.inputs.tolist(),
                }
            )
        return {
            "rng_seed": self.rng_seed,
            "root": self.root,
            "goal_nodes": list(self.goal_nodes),
            "best_goal": self.best_goal(),
            "nodes": nodes,
        }

    def dumps(self, robot_dim: int) -> str:
        return json.dumps(self.to_dict(robot_dim), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# expansion


@dataclass(eq=False)
class PlannerContext:
    """Everything a tree expansion needs, derived from a scenario and a risk mode."""

    scenario: ScenarioConfig
    mode: str

    def __post_init__(self):
        sc = self.scenario
        self.models = sc.steer_models()
        self.cfg = sc.planning_nmpc
        self.risk = sc.risk_context(self.mode)
        self.params = sc.planner.metric_params
        self.metric = sc.planner.metric
        self.n = sc.robot.n
        self.bounds = sc.environment.bounds()
        self.goal_bounds = sc.goal_region.bounds()
        self.raw_obstacles = [o.occupied() for o in sc.obstacles]
        # per-step travel bound for the cost lower bound (unicycle only)
        if sc.robot.kind == BICYCLE:
            self.step_travel = math.inf
        else:
            self.step_travel = sc.robot.dt * float(max(abs(sc.robot.input_lower[0]), abs(sc.robot.input_upper[0])))
        Qp = self.cfg.state_penalty[:2, :2]
        self.q_min = max(0.0, float(np.linalg.eigvalsh(Qp).min()))

    def free(self, p) -> bool:
        if not self.scenario.environment.contains(p):
            return False
        return not any(poly.contains(p) for poly in self.raw_obstacles)

    def cost_lower_bound(self, distance: float) -> float:
        """Exact lower bound on the steering cost over a position gap ``distance``.

        While the position error exceeds the steering tolerance the error at
        step ``k`` is at least ``distance - k * step_travel``.
        """
        if self.q_min == 0.0 or not math.isfinite(self.step_travel):
            return 0.0
        eps = self.models.tolerance
        ks = np.arange(self.models.max_steps)
        e = distance - ks * self.step_travel
        e = e[e > eps]
        return float(self.q_min * np.sum(e * e)) * (1.0 - 1e-9)

    def steer(self, belief: BeliefState, target: np.ndarray) -> TrajectorySegment:
        return steer(belief, target, self.cfg, self.models, PLANNING)

    def feasible(self, seg: TrajectorySegment) -> bool:
        return seg.reached and dr_feasible(seg, self.risk, start=1)


def sample_state(ctx: PlannerContext, rng: np.random.Generator) -> np.ndarray:
    """Free-space robot state; the number of draws depends only on the map."""
    xmin, xmax, ymin, ymax = ctx.bounds
    goal_draw = rng.random()
    if goal_draw < ctx.scenario.planner.goal_bias:
        gx0, gx1, gy0, gy1 = ctx.goal_bounds
        while True:
            p = rng.uniform((gx0, gy0), (gx1, gy1))
            if ctx.scenario.goal_region.contains(p) and ctx.free(p):
                break
    else:
        while True:
            p = rng.uniform((xmin, ymin), (xmax, ymax))
            if ctx.free(p):
                break
    # heading uniform on (-pi, pi]
    heading = math.pi - rng.random() * 2.0 * math.pi
    state = [p[0], p[1], heading]
    if ctx.n == 4:
        state.append(rng.uniform(0.0, ctx.scenario.planner.max_speed))
    return np.array(state)


def _crop(ctx: PlannerContext, origin: np.ndarray, state: np.ndarray) -> np.ndarray:
    d = math.hypot(state[0] - origin[0], state[1] - origin[1])
    limit = ctx.scenario.planner.max_extend
    if d <= limit:
        return state
    out = state.copy()
    out[:2] = origin[:2] + (state[:2] - origin[:2]) * (limit / d)
    return out


def _resteer_subtree(tree: Tree, ctx: PlannerContext, node_id: int, segment: TrajectorySegment, cost: float):
    """Proposed (segment, cost) for ``node_id`` and all its descendants, or ``None``.

    Descendants are re-steered breadth-first from their parent's new terminal
    belief towards their stored targets.  The proposal is rejected if any
    re-steered segment fails or any descendant's cost would increase.
    """
    updates = {node_id: (segment, cost)}
    queue = deque((c, node_id) for c in tree.nodes[node_id].children)
    while queue:
        k, parent = queue.popleft()
        p_seg, p_cost = updates[parent]
        node = tree.nodes[k]
        seg = ctx.steer(BeliefState(p_seg.means[-1], p_seg.covs[-1]), node.target)
        c = p_cost + seg.cost
        if c > node.cost or not ctx.feasible(seg):
            return None
        updates[k] = (seg, c)
        queue.extend((j, k) for j in node.children)
    return updates


def _refresh_goal(tree: Tree, ids) -> None:
    for k in ids:
        inside = tree.goal_region.contains(tree.nodes[k].terminal_mean[:2])
        if inside and k not in tree.goal_nodes:
            tree.goal_nodes.append(k)
        elif not inside and k in tree.goal_nodes:
            tree.goal_nodes.remove(k)


def expand(tree: Tree, ctx: PlannerContext, rng: np.random.Generator) -> int | None:
    """One tree-expansion iteration; returns the new node id or ``None``."""
    n = ctx.n
    x_rand = sample_state(ctx, rng)
    poses = tree.poses()
    sample_pose = np.array([x_rand[0], x_rand[1], x_rand[HEADING]])
    nearest = int(np.argmin(_distances(poses, sample_pose, ctx.metric, ctx.params)))
    x_rand = _crop(ctx, tree.nodes[nearest].terminal_mean, x_rand)

    seg = ctx.steer(tree.nodes[nearest].belief, x_rand)
    if not ctx.feasible(seg):
        return None
    x_new = seg.means[-1][:n]
    new_pose = np.array([x_new[0], x_new[1], x_new[HEADING]])

    radius = near_radius(len(tree), ctx.params)
    d_near = _distances(poses, new_pose, ctx.metric, ctx.params)
    near = [int(k) for k in np.flatnonzero(d_near <= radius) if k != nearest]

    # minimum-cost parent
    best_parent, best_seg = nearest, seg
    c_min = tree.nodes[nearest].cost + seg.cost
    for k in near:
        node = tree.nodes[k]
        gap = math.hypot(x_new[0] - node.terminal_mean[0], x_new[1] - node.terminal_mean[1])
        if node.cost + ctx.cost_lower_bound(gap) >= c_min:
            continue
        cand = ctx.steer(node.belief, x_new)
        if node.cost + cand.cost < c_min and ctx.feasible(cand):
            best_parent, best_seg, c_min = k, cand, node.cost + cand.cost

    new_id = len(tree.nodes)
    new_node = TreeNode(new_id, best_parent, best_seg, x_new.copy() if best_parent != nearest else x_rand.copy(), c_min)
    tree.nodes.append(new_node)
    tree.nodes[best_parent].children.append(new_id)
    if tree.goal_region.contains(new_node.terminal_mean[:2]):
        tree.goal_nodes.append(new_id)

    # rewire
    ancestors = tree.ancestors(new_id)
    for k in near:
        if k in ancestors or k == tree.root:
            continue
        node = tree.nodes[k]
        gap = math.hypot(node.terminal_mean[0] - new_node.terminal_mean[0], node.terminal_mean[1] - new_node.terminal_mean[1])
        if new_node.cost + ctx.cost_lower_bound(gap) >= node.cost:
            continue
        target = node.terminal_mean[:n].copy()
        cand = ctx.steer(new_node.belief, target)
        c_new = new_node.cost + cand.cost
        if not (c_new < node.cost and ctx.feasible(cand)):
            continue
        updates = _resteer_subtree(tree, ctx, k, cand, c_new)
        if updates is None:
            continue
        tree.nodes[node.parent].children.remove(k)
        new_node.children.append(k)
        node.parent = new_id
        node.target = target
        for j, (seg_j, cost_j) in updates.items():
            tree.nodes[j].segment = seg_j
            tree.nodes[j].cost = cost_j
        _refresh_goal(tree, updates)
    return new_id


@dataclass(eq=False)
class PlanResult:
    tree: Tree
    reference: TrajectorySegment | None
    goal_node: int | None
    iterations: int

    @property
    def found(self) -> bool:
        return self.reference is not None


def new_tree(scenario: ScenarioConfig, seed: int) -> Tree:
    b = scenario.start_belief
    root_seg = TrajectorySegment(b.mean[None, :], b.cov[None, :, :], np.zeros((0, scenario.robot.m)), 0.0, True)
    root = TreeNode(0, None, root_seg, b.mean[: scenario.robot.n].copy(), 0.0)
    tree = Tree([root], scenario.goal_region, int(seed))
    if scenario.goal_region.contains(b.mean[:2]):
        tree.goal_nodes.append(0)
    return tree


def plan(
    scenario: ScenarioConfig,
    max_iters: int | None = None,
    stop_after_goal_nodes: int | None = None,
    seed: int = 0,
    mode: str | None = None,
) -> PlanResult:
    """Grow a tree until ``stop_after_goal_nodes`` goal nodes exist or ``max_iters`` runs out.

    Both limits default to the scenario's planner settings.  The reference is
    the cheapest goal node's root-to-node trajectory, or ``None`` when no goal
    node was added.
    """
    if max_iters is None:
        max_iters = scenario.planner.max_iterations
    if stop_after_goal_nodes is None:
        stop_after_goal_nodes = scenario.planner.stop_after_goal_nodes
    ctx = PlannerContext(scenario, scenario.risk.mode if mode is None else mode)
    rng = np.random.default_rng(seed)
    tree = new_tree(scenario, seed)
    it = 0
    while it < max_iters and len(tree.goal_nodes) < stop_after_goal_nodes:
        expand(tree, ctx, rng)
        it += 1
    goal = tree.best_goal()
    ref = None if goal is None else tree.reference(goal)
    return PlanResult(tree, ref, goal, it)


def revalidate(tree: Tree, ctx: PlannerContext, atol: float = 1e-9) -> list[int]:
    """Replay every non-root node's steering and risk check; return the failing ids.

    Steering is replayed from the parent's stored terminal belief.  A node
    fails if its replayed segment differs from the stored one, its
    stored cost recursion is off by more than ``atol``, or the replay is not
    feasible.
    """
    bad = []
    for node in tree.nodes[1:]:
        seg = node.segment
        parent = tree.nodes[node.parent]
        replay = ctx.steer(parent.belief, node.target)
        parent_cost = tree.nodes[node.parent].cost
        ok = (
            replay.means.shape == seg.means.shape
            and np.allclose(replay.means, seg.means, rtol=0, atol=1e-9)
            and abs(replay.cost - seg.cost) <= atol * max(1.0, seg.cost)
            and abs(node.cost - parent_cost - seg.cost) <= atol * max(1.0, node.cost)
            and ctx.feasible(replay)
        )
        if not ok:
            bad.append(node.id)
    return bad
