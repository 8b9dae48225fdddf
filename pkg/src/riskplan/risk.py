"""Risk allocation, chance-constraint tightening and trajectory feasibility.

Every spatial constraint is a half-space ``a^T p >= a^T c`` (outside an
obstacle facet) or ``a^T p <= b`` (inside an environment row).  Under a
moment ambiguity set the worst-case violation probability of a half-space is
bounded by the one-sided Chebyshev (Cantelli) inequality, which gives the
tightening factor ``sqrt((1 - alpha) / alpha)``; the Gaussian baseline uses the
normal quantile instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .env_model import Obstacle, Polytope

DR = "dr"
GAUSSIAN = "gaussian"
MODES = (DR, GAUSSIAN)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= 0.5:
        raise ValueError(f"risk level must lie in (0, 0.5], got {alpha}")
    return alpha


def dr_tightening_factor(alpha: float) -> float:
    """Cantelli factor ``sqrt((1 - alpha) / alpha)``."""
    alpha = _check_alpha(alpha)
    return math.sqrt((1.0 - alpha) / alpha)


def gaussian_tightening_factor(alpha: float) -> float:
    """Standard normal quantile at ``1 - alpha``."""
    alpha = _check_alpha(alpha)
    return float(-ndtri(alpha))


def tightening_factor(alpha: float, mode: str) -> float:
    if mode == DR:
        return dr_tightening_factor(alpha)
    if mode == GAUSSIAN:
        return gaussian_tightening_factor(alpha)
    raise ValueError(f"unknown risk mode {mode!r}")


@dataclass(frozen=True)
class RiskAllocation:
    """Uniform split of a plan-level risk over time steps and constraints.

    ``per_obstacle`` holds ``alpha_i`` for each obstacle; ``environment`` is
    the share of the environment rows (0 when boundaries are deterministic).
    """

    plan_risk: float
    horizon: int
    stage_risk: float
    per_constraint: float
    per_obstacle: tuple[float, ...]
    environment: float
    n_total: int
    n_env: int
    n_obstacle: tuple[int, ...]


def _split(stage: float, n_env: int, counts) -> tuple[float, tuple[float, ...], float, int]:
    counts = tuple(int(c) for c in counts)
    if n_env < 0 or any(c < 0 for c in counts):
        raise ValueError("constraint counts must be nonnegative")
    n_total = int(n_env) + sum(counts)
    if n_total == 0:
        raise ValueError("no constraints to allocate risk to")
    per = stage / n_total
    return per, tuple(stage * c / n_total for c in counts), stage * n_env / n_total, n_total


def allocate_risk(plan_risk: float, horizon: int, n_env: int, facet_counts) -> RiskAllocation:
    """Split ``beta`` evenly over ``horizon + 1`` stages, then over constraints."""
    beta = _check_alpha(plan_risk)
    if int(horizon) < 0:
        raise ValueError("horizon must be nonnegative")
    stage = beta / (int(horizon) + 1)
    per, obs, env, n_total = _split(stage, n_env, facet_counts)
    return RiskAllocation(beta, int(horizon), stage, per, obs, env, n_total, int(n_env), tuple(facet_counts))


def allocate_stage_risk(stage_risk: float, n_env: int, facet_counts, horizon: int = 0) -> RiskAllocation:
    """Allocation from a given per-stage risk; ``plan_risk`` is reported as ``(T+1) alpha``."""
    alpha = _check_alpha(stage_risk)
    per, obs, env, n_total = _split(alpha, n_env, facet_counts)
    return RiskAllocation(
        min(0.5, alpha * (int(horizon) + 1)), int(horizon), alpha, per, obs, env, n_total, int(n_env), tuple(facet_counts)
    )


@dataclass(frozen=True, eq=False)
class FacetConstraint:
    """Half-space ``a^T p >= a^T c`` with an uncertain boundary point ``c``."""

    normal: np.ndarray
    point: np.ndarray
    point_cov: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.normal, dtype=float).reshape(-1)
        if not np.linalg.norm(a) > 0:
            raise ValueError("facet normal must be nonzero")
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(-1))
        cov = np.zeros((a.size, a.size)) if self.point_cov is None else np.asarray(self.point_cov, dtype=float)
        object.__setattr__(self, "point_cov", cov)


def _spread(a: np.ndarray, cov: np.ndarray) -> float:
    """``||cov^{1/2} a||`` computed as ``sqrt(a^T cov a)``."""
    q = float(a @ cov @ a)
    if q < 0.0:
        if q < -1e-12 * max(1.0, float(np.abs(cov).max())):
            raise np.linalg.LinAlgError("covariance is not positive semidefinite")
        q = 0.0
    return math.sqrt(q)


def facet_satisfied(position, cov, facet: FacetConstraint, alpha: float, mode: str = DR) -> bool:
    """Tightened test ``a^T x >= a^T c + factor * ||(D + Sc)^{1/2} a||``."""
    a = facet.normal
    x = np.asarray(position, dtype=float)[:2]
    margin = tightening_factor(alpha, mode) * _spread(a, np.asarray(cov, dtype=float) + facet.point_cov)
    return bool(a @ x >= a @ facet.point + margin)


def obstacle_facets(obstacle: Obstacle, centroid=None) -> list[FacetConstraint]:
    """Outward facets of an obstacle placed at ``centroid`` (its nominal position by default)."""
    shape = obstacle.shape
    c = obstacle.state[:2] if centroid is None else np.asarray(centroid, dtype=float)[:2]
    pts = shape.facet_points() + c
    return [FacetConstraint(shape.A[j], pts[j], obstacle.facet_point_cov[j]) for j in range(shape.n_facets)]


def obstacle_feasible(position, cov, obstacle: Obstacle, alpha: float, mode: str = DR, centroid=None, centroid_cov=None) -> bool:
    """At least one tightened facet holds with the full obstacle risk ``alpha``.

    ``centroid_cov`` is the position covariance of the obstacle centroid; it
    adds to every facet's boundary-point covariance.
    """
    factor = tightening_factor(alpha, mode)
    x = np.asarray(position, dtype=float)[:2]
    D = np.asarray(cov, dtype=float)
    extra = 0.0 if centroid_cov is None else np.asarray(centroid_cov, dtype=float)
    for f in obstacle_facets(obstacle, centroid):
        spread = _spread(f.normal, D + f.point_cov + extra)
        if f.normal @ x >= f.normal @ f.point + factor * spread:
            return True
    return False


def environment_feasible(position, cov, env: Polytope, alpha_env: float, mode: str = DR, probabilistic: bool = True) -> bool:
    """Every row ``a^T x <= b - factor * ||D^{1/2} a||``; ``alpha_env`` is split evenly over rows."""
    x = np.asarray(position, dtype=float)[:2]
    if probabilistic:
        factor = tightening_factor(alpha_env / env.n_facets, mode)
        D = np.asarray(cov, dtype=float)
        margins = np.array([factor * _spread(a, D) for a in env.A])
    else:
        margins = np.zeros(env.n_facets)
    return bool(np.all(env.A @ x <= env.b - margins))


def segment_intersects(p0, p1, poly: Polytope, tol: float = 0.0) -> bool:
    """Closed segment vs closed polytope by parametric half-space clipping."""
    p0 = np.asarray(p0, dtype=float)[:2]
    d = np.asarray(p1, dtype=float)[:2] - p0
    t_in, t_out = 0.0, 1.0
    num = poly.b + tol - poly.A @ p0
    den = poly.A @ d
    # a subnormal direction component overflows to an infinite crossing parameter, the correct limit
    with np.errstate(over="ignore"):
        for nj, dj in zip(num, den):
            if dj == 0.0:
                if nj < 0.0:
                    return False
            elif dj > 0.0:
                t_out = min(t_out, nj / dj)
            else:
                t_in = max(t_in, nj / dj)
            if t_in > t_out:
                return False
    return True


def segment_clearance(p0, p1, poly: Polytope) -> float:
    """Euclidean distance between a segment and a 2-D convex polygon (0 if they meet)."""
    if segment_intersects(p0, p1, poly):
        return 0.0
    verts = poly.vertices()
    p0 = np.asarray(p0, dtype=float)[:2]
    p1 = np.asarray(p1, dtype=float)[:2]
    best = math.inf
    k = len(verts)
    for i in range(k):
        a, b = verts[i], verts[(i + 1) % k]
        best = min(best, _seg_seg_distance(p0, p1, a, b))
    return best


def _point_seg_distance(p, a, b) -> float:
    ab = b - a
    den = float(ab @ ab)
    t = 0.0 if den == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / den))
    return float(np.linalg.norm(p - (a + t * ab)))


def _seg_seg_distance(p0, p1, a, b) -> float:
    # segments are known not to cross, so the minimum is attained at an endpoint
    return min(
        _point_seg_distance(p0, a, b),
        _point_seg_distance(p1, a, b),
        _point_seg_distance(a, p0, p1),
        _point_seg_distance(b, p0, p1),
    )


@dataclass(frozen=True, eq=False)
class RiskContext:
    """Geometry and allocation used by :func:`dr_feasible`.

    ``obstacle_slices`` locate each obstacle's state inside the environmental
    state so its centroid mean/covariance can be read from the belief.
    """

    obstacles: tuple[Obstacle, ...]
    environment: Polytope
    allocation: RiskAllocation
    mode: str = DR
    probabilistic_boundaries: bool = True
    robot_dim: int = 3
    obstacle_slices: tuple[slice, ...] = ()


def dr_feasible(segment, ctx: RiskContext, start: int = 0) -> bool:
    """Check every belief of ``segment`` (from index ``start``) against all constraints.

    For each step the robot position mean and covariance are tested against
    every obstacle's tightened facets and the environment rows, and the
    line between consecutive mean positions must miss every raw obstacle.
    """
    means, covs = segment.means, segment.covs
    alloc = ctx.allocation
    for t in range(start, means.shape[0]):
        mean, cov = means[t], covs[t]
        pos, D = mean[:2], cov[:2, :2]
        if not environment_feasible(pos, D, ctx.environment, alloc.environment, ctx.mode, ctx.probabilistic_boundaries):
            return False
        for i, obs in enumerate(ctx.obstacles):
            sl = ctx.obstacle_slices[i] if ctx.obstacle_slices else None
            if sl is not None:
                c = mean[sl][:2]
                cc = cov[sl, sl][:2, :2]
            else:
                c, cc = obs.state[:2], None
            if not obstacle_feasible(pos, D, obs, alloc.per_obstacle[i], ctx.mode, c, cc):
                return False
            if t >= 1:
                raw = obs.shape.translated(c)
                if segment_intersects(means[t - 1][:2], pos, raw):
                    return False
    return True


def min_clearance(path, obstacles, centroids=None) -> float:
    """Smallest distance from a polyline of positions to any raw obstacle."""
    path = np.asarray(path, dtype=float)[:, :2]
    best = math.inf
    for i, obs in enumerate(obstacles):
        c = obs.state[:2] if centroids is None else centroids[i]
        poly = obs.shape.translated(c)
        if path.shape[0] == 1:
            best = min(best, segment_clearance(path[0], path[0], poly))
        for k in range(1, path.shape[0]):
            best = min(best, segment_clearance(path[k - 1], path[k], poly))
    return best
