"""Noise decorrelation and an unscented Kalman filter over the environmental state.

The filter is written against a duck-typed ``system`` exposing

* ``transition(Z, u)`` -- noise-free dynamics, rows of ``Z`` are states;
* ``observe(Z)`` -- noise-free output map, rows of ``Z`` are states;
* ``state_angles`` / ``output_angles`` -- indices of angular components,
  whose differences are wrapped to (-pi, pi].

:class:`riskplan.env_model.System` satisfies this protocol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env_model import NoiseModel, wrap_angle


class CovarianceError(np.linalg.LinAlgError):
    """A covariance matrix could not be factorised even after jitter."""


_JITTERS = (1e-12, 1e-10, 1e-8, 1e-6)


def psd_cholesky(P: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T ~= P`` for a PSD matrix.

    Rows/columns with zero variance are carried as exact zeros, so
    deterministic sub-states (static obstacles) do not need jitter.  If the
    remaining block is numerically indefinite a diagonal jitter of
    1e-12..1e-6 times the largest variance is tried before giving up.
    """
    P = 0.5 * (P + P.T)
    d = np.diag(P)
    scale = float(d.max()) if d.size else 0.0
    if d.size and d.min() < -1e-12 * max(scale, 1e-300):
        raise CovarianceError("covariance has a negative variance")
    idx = np.flatnonzero(d > 0)
    L = np.zeros_like(P)
    if idx.size == 0:
        return L
    sub = P[np.ix_(idx, idx)]
    try:
        Ls = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        eye = np.eye(idx.size)
        for eps in _JITTERS:
            try:
                Ls = np.linalg.cholesky(sub + eps * scale * eye)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise CovarianceError("covariance is indefinite") from None
    L[np.ix_(idx, idx)] = Ls
    return L


@dataclass(frozen=True, eq=False)
class DecorrelatedModel:
    """Pseudo gain ``H = M Sv^-1`` and pseudo process covariance ``Sw - M Sv^-1 M^T``."""

    gain: np.ndarray
    process_cov: np.ndarray
    sensor_cov: np.ndarray

    @property
    def active(self) -> bool:
        return bool(np.any(self.gain != 0.0))


def decorrelate(noise: NoiseModel) -> DecorrelatedModel:
    """Remove the process/sensor cross-correlation.

    The pseudo noise ``w* = w - H v`` satisfies ``E[w* v^T] = M - H Sv = 0``.
    Raises :class:`CovarianceError` if ``Sv`` is singular or the pseudo
    process covariance is not PSD.
    """
    Sv = np.atleast_2d(noise.sensor_cov)
    M = noise.cross_corr
    try:
        c = np.linalg.cholesky(Sv)
    except np.linalg.LinAlgError:
        raise CovarianceError("sensor covariance is singular") from None
    # H = M Sv^-1 via the Cholesky factor; Sv is symmetric so H^T = Sv^-1 M^T
    H = np.linalg.solve(c.T, np.linalg.solve(c, M.T)).T
    Sw_star = noise.process_cov - H @ M.T
    Sw_star = 0.5 * (Sw_star + Sw_star.T)
    scale = max(float(np.max(np.abs(noise.process_cov))), 1e-300)
    if Sw_star.size and np.linalg.eigvalsh(Sw_star).min() < -1e-10 * scale:
        raise CovarianceError("pseudo process covariance is not positive semidefinite")
    return DecorrelatedModel(H, Sw_star, Sv)


@dataclass(frozen=True)
class UtParams:
    """Unscented-transform tuning; ``kappa=None`` means ``3 - n_z``."""

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float | None = None

    def lam(self, n_z: int) -> float:
        kappa = 3.0 - n_z if self.kappa is None else self.kappa
        lam = self.alpha**2 * (n_z + kappa) - n_z
        if not n_z + lam > 0:
            raise ValueError("unscented transform requires n_z + lambda > 0")
        return lam


@dataclass(frozen=True, eq=False)
class SigmaPointSet:
    points: np.ndarray  # (2 n_z + 1, n_z)
    mean_weights: np.ndarray
    cov_weights: np.ndarray


@dataclass(frozen=True, eq=False)
class BeliefState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("belief covariance does not match the mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def sigma_points(belief: BeliefState, params: UtParams = UtParams()) -> SigmaPointSet:
    """Van der Merwe scaled sigma points and weights."""
    n = belief.mean.size
    lam = params.lam(n)
    L = psd_cholesky((n + lam) * belief.cov)
    pts = np.empty((2 * n + 1, n))
    pts[0] = belief.mean
    pts[1 : n + 1] = belief.mean + L.T
    pts[n + 1 :] = belief.mean - L.T
    wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - params.alpha**2 + params.beta
    return SigmaPointSet(pts, wm, wc)


def _weighted_mean(rows: np.ndarray, w: np.ndarray, angles) -> np.ndarray:
    mean = w @ rows
    for a in angles:
        ref = rows[0, a]
        mean[a] = wrap_angle(ref + w @ wrap_angle(rows[:, a] - ref))
    return mean


def _deviations(rows: np.ndarray, mean: np.ndarray, angles) -> np.ndarray:
    d = rows - mean
    for a in angles:
        d[:, a] = wrap_angle(d[:, a])
    return d


def _ukf(belief, u, y, decorr, system, params, y_prev):
    sp = sigma_points(belief, params)
    chi, wm, wc = sp.points, sp.mean_weights, sp.cov_weights
    s_angles, y_angles = tuple(system.state_angles), tuple(system.output_angles)

    xi = system.transition(chi, u)
    if decorr.active:
        s_chi = system.observe(chi)
        y_hat = _weighted_mean(s_chi, wm, y_angles) if y_prev is None else np.asarray(y_prev, dtype=float)
        # f* = f~ + H (y_hat - S(chi))
        xi = xi - _deviations(s_chi, y_hat, y_angles) @ decorr.gain.T
        for a in s_angles:
            xi[:, a] = wrap_angle(xi[:, a])

    z_prior = _weighted_mean(xi, wm, s_angles)
    dz = _deviations(xi, z_prior, s_angles)
    p_prior = (dz.T * wc) @ dz + decorr.process_cov

    # redraw from the prior so the measurement transform sees the process noise;
    # this keeps the filter exact on linear systems
    chi_prior = sigma_points(BeliefState(z_prior, p_prior), params).points
    dz = _deviations(chi_prior, z_prior, s_angles)
    theta = system.observe(chi_prior)
    mu = _weighted_mean(theta, wm, y_angles)
    dy = _deviations(theta, mu, y_angles)
    s_theta = (dy.T * wc) @ dy + decorr.sensor_cov
    cross = (dz.T * wc) @ dy
    try:
        c = np.linalg.cholesky(0.5 * (s_theta + s_theta.T))
    except np.linalg.LinAlgError:
        c = psd_cholesky(s_theta)
        if np.any(np.diag(c) <= 0):
            raise CovarianceError("innovation covariance is singular") from None
    gain = np.linalg.solve(c.T, np.linalg.solve(c, cross.T)).T

    if y is None:
        mean = z_prior
    else:
        innov = np.asarray(y, dtype=float) - mu
        for a in y_angles:
            innov[a] = wrap_angle(innov[a])
        mean = z_prior + gain @ innov
        for a in s_angles:
            mean[a] = wrap_angle(mean[a])
    cov = p_prior - gain @ s_theta @ gain.T
    cov = 0.5 * (cov + cov.T)
    return BeliefState(mean, cov), gain


def ukf_step(
    belief: BeliefState,
    u,
    y,
    decorr: DecorrelatedModel,
    system,
    params: UtParams = UtParams(),
    y_prev=None,
) -> BeliefState:
    """One predict/update cycle on the decorrelated pseudo dynamics.

    The pseudo dynamics are ``f*(Z, u) = f~(Z, u) - H S(Z) + H y_hat``.  When
    the previous measurement is known it is used for ``y_hat``; otherwise the
    unscented estimate of ``S`` at the prior belief is used.
    """
    return _ukf(belief, u, y, decorr, system, params, y_prev)[0]


def ukf_predict_planning(
    belief: BeliefState,
    u,
    decorr: DecorrelatedModel,
    system,
    params: UtParams = UtParams(),
) -> BeliefState:
    """Planning-time propagation: a UKF step with zero innovation.

    The mean follows the sigma-propagated prior; the covariance includes the
    measurement contraction.
    """
    return _ukf(belief, u, None, decorr, system, params, None)[0]


def kalman_gain(belief, u, decorr, system, params: UtParams = UtParams()) -> np.ndarray:
    """Filter gain of the step that would be taken from ``belief`` with input ``u``."""
    return _ukf(belief, u, None, decorr, system, params, None)[1]
