"""Compiled multiple-shooting NMPC solver.

The stage cost is ``||x_k - target_k||_Q^2 + ||u_k - uref_k||_R^2`` (heading
difference wrapped) plus a terminal term weighted by ``QT``.

Decision vector layout, one block per stage ``k = 0..N-1``::

    z = [u_0, x_1 | u_1, x_2 | ... | u_{N-1}, x_N]

with ``x_0`` fixed.  Dynamics defects ``d_k = x_{k+1} - f(x_k, u_k)`` are
handled by an augmented Lagrangian whose penalty grows while the defects stall.
Each inner iteration is a projected Gauss-Newton step (Bertsekas-style active
set on the input boxes) solved with a banded Cholesky factorisation; the band
half-width is ``2 (m + n) - m - 1`` regardless of the horizon.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

KIND_UNICYCLE = 0
KIND_BICYCLE = 1

_TWO_PI = 2.0 * math.pi


@njit(cache=True)
def _wrap(a):
    return math.pi - ((math.pi - a) - _TWO_PI * math.floor((math.pi - a) / _TWO_PI))


@njit(cache=True)
def _step(kind, x, u, dt, wheelbase, out):
    if kind == KIND_UNICYCLE:
        out[0] = x[0] + dt * u[0] * math.cos(x[2])
        out[1] = x[1] + dt * u[0] * math.sin(x[2])
        out[2] = x[2] + dt * u[1]
    else:
        out[0] = x[0] + dt * x[3] * math.cos(x[2])
        out[1] = x[1] + dt * x[3] * math.sin(x[2])
        out[2] = x[2] + dt * x[3] / wheelbase * math.tan(u[1])
        out[3] = x[3] + dt * u[0]


@njit(cache=True)
def _jacobians(kind, x, u, dt, wheelbase, A, B):
    n = x.shape[0]
    for i in range(n):
        for j in range(n):
            A[i, j] = 1.0 if i == j else 0.0
        B[i, 0] = 0.0
        B[i, 1] = 0.0
    if kind == KIND_UNICYCLE:
        c, s = math.cos(x[2]), math.sin(x[2])
        A[0, 2] = -dt * u[0] * s
        A[1, 2] = dt * u[0] * c
        B[0, 0] = dt * c
        B[1, 0] = dt * s
        B[2, 1] = dt
    else:
        c, s = math.cos(x[2]), math.sin(x[2])
        A[0, 2] = -dt * x[3] * s
        A[0, 3] = dt * c
        A[1, 2] = dt * x[3] * c
        A[1, 3] = dt * s
        A[2, 3] = dt * math.tan(u[1]) / wheelbase
        cd = math.cos(u[1])
        B[2, 1] = dt * x[3] / (wheelbase * cd * cd)
        B[3, 0] = dt


@njit(cache=True)
def _add_sym(Hb, i, j, val):
    if i < 0 or j < 0:
        return
    if i <= j:
        Hb[i, j - i] += val
    else:
        Hb[j, i - j] += val


@njit(cache=True)
def _add_curvature(kind, x, u, dt, wb, mult, Hb, xb, ub):
    """Add ``-sum_r mult_r * hess f_r`` for the defect of one stage.

    ``xb`` is the index of ``x_k`` in ``z`` (-1 when ``x_k`` is fixed) and
    ``ub`` that of ``u_k``.
    """
    c, s = math.cos(x[2]), math.sin(x[2])
    ih = xb + 2 if xb >= 0 else -1
    if kind == KIND_UNICYCLE:
        _add_sym(Hb, ih, ih, dt * u[0] * (mult[0] * c + mult[1] * s))
        _add_sym(Hb, ih, ub, dt * (mult[0] * s - mult[1] * c))
    else:
        iv = xb + 3 if xb >= 0 else -1
        sec2 = 1.0 / math.cos(u[1]) ** 2
        _add_sym(Hb, ih, ih, dt * x[3] * (mult[0] * c + mult[1] * s))
        _add_sym(Hb, ih, iv, dt * (mult[0] * s - mult[1] * c))
        _add_sym(Hb, iv, ub + 1, -mult[2] * dt * sec2 / wb)
        _add_sym(Hb, ub + 1, ub + 1, -mult[2] * dt * x[3] * 2.0 * sec2 * math.tan(u[1]) / wb)


@njit(cache=True)
def _error(x, target, angle_idx, e):
    for i in range(x.shape[0]):
        e[i] = x[i] - target[i]
    if angle_idx >= 0:
        e[angle_idx] = _wrap(e[angle_idx])


@njit(cache=True)
def _quad(e, W):
    acc = 0.0
    n = e.shape[0]
    for i in range(n):
        for j in range(n):
            acc += e[i] * W[i, j] * e[j]
    return acc


@njit(cache=True)
def _evaluate(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, N, n, m, lam, rho, defects):
    """Return (cost, merit); fills ``defects`` (N, n)."""
    s = n + m
    e = np.empty(n)
    fx = np.empty(n)
    cost = 0.0
    pen = 0.0
    xk = x0.copy()
    for k in range(N):
        uk = z[k * s : k * s + m]
        _error(xk, targets[k], angle_idx, e)
        cost += _quad(e, Q) + _quad(uk - uref[k], R)
        _step(kind, xk, uk, dt, wb, fx)
        xn = z[k * s + m : (k + 1) * s]
        for i in range(n):
            d = xn[i] - fx[i]
            defects[k, i] = d
            pen += lam[k, i] * d + 0.5 * rho * d * d
        xk = xn.copy()
    _error(xk, targets[N], angle_idx, e)
    cost += _quad(e, QT)
    return cost, cost + pen


@njit(cache=True)
def _assemble(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, N, n, m, lam, rho, defects, g, Hb, Hc, w):
    """Gradient, Gauss-Newton Hessian ``Hb`` and dynamics curvature ``Hc`` (band storage)."""
    s = n + m
    nv = N * s
    for i in range(nv):
        g[i] = 0.0
        for j in range(w + 1):
            Hb[i, j] = 0.0
            Hc[i, j] = 0.0
    e = np.empty(n)
    A = np.empty((n, n))
    B = np.empty((n, m))
    nl_max = 2 * n + m
    idx = np.empty(nl_max, dtype=np.int64)
    J = np.empty((n, nl_max))
    mult = np.empty(n)
    for k in range(N):
        ub = k * s
        xb = k * s + m
        # input cost
        for i in range(m):
            acc = 0.0
            for j in range(m):
                acc += R[i, j] * (z[ub + j] - uref[k, j])
                if j >= i:
                    Hb[ub + i, j - i] += 2.0 * R[i, j]
            g[ub + i] += 2.0 * acc
        # state cost on x_{k+1}
        W = QT if k == N - 1 else Q
        _error(z[xb : xb + n], targets[k + 1], angle_idx, e)
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += W[i, j] * e[j]
                if j >= i:
                    Hb[xb + i, j - i] += 2.0 * W[i, j]
            g[xb + i] += 2.0 * acc
        # defect d_k = x_{k+1} - f(x_k, u_k)
        if k == 0:
            xk = x0
        else:
            xk = z[(k - 1) * s + m : k * s]
        _jacobians(kind, xk, z[ub : ub + m], dt, wb, A, B)
        nl = 0
        if k > 0:
            for a in range(n):
                idx[nl] = (k - 1) * s + m + a
                for r in range(n):
                    J[r, nl] = -A[r, a]
                nl += 1
        for b in range(m):
            idx[nl] = ub + b
            for r in range(n):
                J[r, nl] = -B[r, b]
            nl += 1
        for a in range(n):
            idx[nl] = xb + a
            for r in range(n):
                J[r, nl] = 1.0 if r == a else 0.0
            nl += 1
        for r in range(n):
            mult[r] = lam[k, r] + rho * defects[k, r]
        for p in range(nl):
            acc = 0.0
            for r in range(n):
                acc += J[r, p] * mult[r]
            g[idx[p]] += acc
            for q in range(p, nl):
                acc = 0.0
                for r in range(n):
                    acc += J[r, p] * J[r, q]
                # idx is increasing, so idx[q] >= idx[p]
                Hb[idx[p], idx[q] - idx[p]] += rho * acc
        _add_curvature(kind, xk, z[ub : ub + m], dt, wb, mult, Hc, (k - 1) * s + m if k > 0 else -1, ub)


@njit(cache=True)
def _band_solve(Hb, rhs, w, Lb, out):
    """Solve ``H x = rhs`` for SPD band matrix ``H`` (upper band storage)."""
    nv = rhs.shape[0]
    # Lb[i, d] = L[i, i - d]
    for j in range(nv):
        acc = Hb[j, 0]
        for k in range(max(0, j - w), j):
            acc -= Lb[j, j - k] ** 2
        if acc <= 0.0:
            return False
        ljj = math.sqrt(acc)
        Lb[j, 0] = ljj
        for i in range(j + 1, min(nv, j + w + 1)):
            acc = Hb[j, i - j]
            for k in range(max(0, i - w), j):
                acc -= Lb[i, i - k] * Lb[j, j - k]
            Lb[i, i - j] = acc / ljj
    # forward: L y = rhs
    for i in range(nv):
        acc = rhs[i]
        for k in range(max(0, i - w), i):
            acc -= Lb[i, i - k] * out[k]
        out[i] = acc / Lb[i, 0]
    # backward: L^T x = y
    for i in range(nv - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, min(nv, i + w + 1)):
            acc -= Lb[k, k - i] * out[k]
        out[i] = acc / Lb[i, 0]
    return True


@njit(cache=True)
def _project(z, N, n, m, lo, hi):
    s = n + m
    for k in range(N):
        for i in range(m):
            v = z[k * s + i]
            if v < lo[i]:
                z[k * s + i] = lo[i]
            elif v > hi[i]:
                z[k * s + i] = hi[i]


@njit(cache=True)
def _line_search(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, p, g, merit, N, n, m, lo, hi, lam, rho, z_new, d_new):
    """Backtracking along the projection arc with an Armijo test."""
    nv = z.shape[0]
    t = 1.0
    for _ in range(30):
        for i in range(nv):
            z_new[i] = z[i] + t * p[i]
        _project(z_new, N, n, m, lo, hi)
        c_new, m_new = _evaluate(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z_new, N, n, m, lam, rho, d_new)
        slope = 0.0
        for i in range(nv):
            slope += g[i] * (z_new[i] - z[i])
        if m_new <= merit + 1e-4 * slope and m_new <= merit:
            return True, c_new, m_new
        t *= 0.5
    return False, 0.0, merit


@njit(cache=True)
def solve(
    kind,
    dt,
    wb,
    x0,
    targets,
    uref,
    Q,
    R,
    QT,
    lo,
    hi,
    U_init,
    X_init,
    angle_idx,
    max_iters,
    opt_tol,
    defect_tol,
    history,
    stages,
):
    """Run the solver.

    Returns ``(U, X, cost, max_defect, iterations, converged, n_history)``.
    ``history[i]`` is the merit after accepted iterate ``i`` and ``stages[i]``
    the augmented-Lagrangian stage it belongs to (the merit changes definition
    between stages).
    """
    N = U_init.shape[0]
    n = x0.shape[0]
    m = U_init.shape[1]
    s = n + m
    nv = N * s
    w = 2 * s - m - 1
    z = np.empty(nv)
    for k in range(N):
        for i in range(m):
            z[k * s + i] = U_init[k, i]
        for i in range(n):
            z[k * s + m + i] = X_init[k, i]
    _project(z, N, n, m, lo, hi)

    scale = 1.0
    for i in range(n):
        scale = max(scale, Q[i, i], QT[i, i])
    rho = 100.0 * scale
    lam = np.zeros((N, n))
    defects = np.empty((N, n))
    g = np.empty(nv)
    Hb = np.empty((nv, w + 1))
    Lb = np.empty((nv, w + 1))
    Hc = np.empty((nv, w + 1))
    Hx = np.empty((nv, w + 1))
    p = np.empty(nv)
    rhs = np.empty(nv)
    z_new = np.empty(nv)
    d_new = np.empty((N, n))
    is_input = np.zeros(nv, dtype=np.bool_)
    for k in range(N):
        for i in range(m):
            is_input[k * s + i] = True

    cost, merit = _evaluate(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, N, n, m, lam, rho, defects)
    n_hist = 0
    history[n_hist] = merit
    stages[n_hist] = 0
    n_hist += 1
    stage = 0
    iters = 0
    converged = False
    prev_defect = np.inf
    mu = 0.0
    while True:
        inner_done = False
        while iters < max_iters:
            _assemble(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, N, n, m, lam, rho, defects, g, Hb, Hc, w)
            # projected gradient and active set
            pg = 0.0
            for i in range(nv):
                if is_input[i]:
                    b = i % s
                    v = z[i] - g[i]
                    v = min(max(v, lo[b]), hi[b])
                    pg = max(pg, abs(z[i] - v))
                else:
                    pg = max(pg, abs(g[i]))
            if pg <= opt_tol * (1.0 + abs(merit)):
                inner_done = True
                break
            for i in range(nv):
                rhs[i] = -g[i]
            # epsilon-active set shrinks with the projected gradient
            for i in range(nv):
                if is_input[i]:
                    b = i % s
                    eps = min(1e-3 * (hi[b] - lo[b]), pg)
                    at_lo = z[i] <= lo[b] + eps and g[i] > 0.0
                    at_hi = z[i] >= hi[b] - eps and g[i] < 0.0
                    if at_lo or at_hi:
                        for j in range(w + 1):
                            Hb[i, j] = 0.0
                            Hc[i, j] = 0.0
                        for j in range(max(0, i - w), i):
                            Hb[j, i - j] = 0.0
                            Hc[j, i - j] = 0.0
                        Hb[i, 0] = 1.0
                        rhs[i] = 0.0
            # damped exact Newton step; if the reduced Hessian is indefinite
            # at the current damping, fall back to damped Gauss-Newton
            for i in range(nv):
                for j in range(w + 1):
                    Hx[i, j] = Hb[i, j] + Hc[i, j]
                Hx[i, 0] += mu
            accepted = False
            if _band_solve(Hx, rhs, w, Lb, p):
                accepted, c_new, m_new = _line_search(
                    kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, p, g, merit, N, n, m, lo, hi, lam, rho, z_new, d_new
                )
            if accepted:
                mu = 0.1 * mu if mu > 1e-10 * scale else 0.0
            else:
                mu = max(10.0 * mu, 1e-8 * scale)
            mu_gn = 0.0
            for attempt in range(20):
                if accepted:
                    break
                for i in range(nv):
                    for j in range(w + 1):
                        Hx[i, j] = Hb[i, j]
                    Hx[i, 0] += mu_gn
                if _band_solve(Hx, rhs, w, Lb, p):
                    accepted, c_new, m_new = _line_search(
                        kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, p, g, merit, N, n, m, lo, hi, lam, rho, z_new, d_new
                    )
                mu_gn = max(10.0 * mu_gn, 1e-10 * scale)
            iters += 1
            if not accepted:
                inner_done = True
                break
            decrease = merit - m_new
            for i in range(nv):
                z[i] = z_new[i]
            for k in range(N):
                for i in range(n):
                    defects[k, i] = d_new[k, i]
            cost, merit = c_new, m_new
            if n_hist < history.shape[0]:
                history[n_hist] = merit
                stages[n_hist] = stage
                n_hist += 1
            if decrease <= 1e-15 * (1.0 + abs(merit)):
                inner_done = True
                break
        max_def = 0.0
        for k in range(N):
            for i in range(n):
                max_def = max(max_def, abs(defects[k, i]))
        if inner_done and max_def <= defect_tol:
            converged = True
            break
        if iters >= max_iters:
            break
        for k in range(N):
            for i in range(n):
                lam[k, i] += rho * defects[k, i]
        if max_def > 0.25 * prev_defect:
            rho *= 10.0
        prev_defect = max_def
        stage += 1
        cost, merit = _evaluate(kind, dt, wb, x0, targets, uref, Q, R, QT, angle_idx, z, N, n, m, lam, rho, defects)
        if n_hist < history.shape[0]:
            history[n_hist] = merit
            stages[n_hist] = stage
            n_hist += 1

    U = np.empty((N, m))
    X = np.empty((N + 1, n))
    for i in range(n):
        X[0, i] = x0[i]
    for k in range(N):
        for i in range(m):
            U[k, i] = z[k * s + i]
        for i in range(n):
            X[k + 1, i] = z[k * s + m + i]
    max_def = 0.0
    for k in range(N):
        for i in range(n):
            max_def = max(max_def, abs(defects[k, i]))
    return U, X, cost, max_def, iters, converged, n_hist


@njit(cache=True)
def rollout(kind, dt, wb, x0, U):
    N = U.shape[0]
    n = x0.shape[0]
    X = np.empty((N + 1, n))
    X[0] = x0
    for k in range(N):
        _step(kind, X[k], U[k], dt, wb, X[k + 1])
    return X
