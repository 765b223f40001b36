"""Compiled NMPC kernel: augmented cost and gradient in one pass.

Mirrors :func:`flocknav.nmpc.cost_and_gradient` plus the constraint terms the
outer loop adds, so one inner-solver evaluation costs a single call.  The
numpy route in ``nmpc`` stays the reference; tests compare the two.
"""
from __future__ import annotations

import math
import time

import numpy as np
from numba import njit, objmode


@njit(cache=True)
def _rollout(u, x0, dt):
    T = u.shape[0] // 2
    P = np.empty((T, 2))
    V = np.empty((T, 2))
    cs = np.empty((T, 2))
    psi = x0[2]
    px = x0[0]
    py = x0[1]
    for k in range(T):
        ck = math.cos(psi)
        sk = math.sin(psi)
        cs[k, 0] = ck
        cs[k, 1] = sk
        vx = ck * u[2 * k]
        vy = sk * u[2 * k]
        V[k, 0] = vx
        V[k, 1] = vy
        px += vx * dt
        py += vy * dt
        P[k, 0] = px
        P[k, 1] = py
        psi += u[2 * k + 1] * dt
    return P, V, cs


@njit(cache=True, fastmath=False)
def augmented_cost_grad(u, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel,
                        nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin,
                        bounds, obstacles, r_s2, y, c, need_grad):
    T = u.shape[0] // 2
    J = nb_pos.shape[0]
    M = obstacles.shape[0]
    P, V, cs = _rollout(u, x0, dt)

    gP = np.zeros((T, 2))
    gV = np.zeros((T, 2))
    f = 0.0
    for k in range(T):
        f += R[0] * u[2 * k] ** 2 + R[1] * u[2 * k + 1] ** 2
        ex = a_p * P[k, 0] - target_p[k, 0]
        ey = a_p * P[k, 1] - target_p[k, 1]
        f += w_pos[k] * (ex * ex + ey * ey)
        gP[k, 0] += 2.0 * a_p * w_pos[k] * ex
        gP[k, 1] += 2.0 * a_p * w_pos[k] * ey
        fx = a_v * V[k, 0] - target_v[k, 0]
        fy = a_v * V[k, 1] - target_v[k, 1]
        f += w_vel[k] * (fx * fx + fy * fy)
        gV[k, 0] += 2.0 * a_v * w_vel[k] * fx
        gV[k, 1] += 2.0 * a_v * w_vel[k] * fy

    # soft separation at predicted times T_sep+1 .. T-1 (rows k-1)
    if rho_sep != 0.0:
        for k in range(T_sep + 1, T):
            row = k - 1
            wk = rho_sep * gamma ** k
            for j in range(J):
                dx = P[row, 0] - nb_pos[j, row, 0]
                dy = P[row, 1] - nb_pos[j, row, 1]
                short = d_sep - (dx * dx + dy * dy)
                if short > 0.0:
                    f += wk * short * short
                    gP[row, 0] += -4.0 * wk * short * dx
                    gP[row, 1] += -4.0 * wk * short * dy

    # augmented-Lagrangian terms: separation rows j*T_sep + k, then workspace
    n_sep = J * T_sep
    for j in range(J):
        for k in range(T_sep):
            dx = P[k, 0] - nb_pos[j, k, 0]
            dy = P[k, 1] - nb_pos[j, k, 1]
            g1 = d_sep + sep_margin - (dx * dx + dy * dy)
            w = g1 + y[j * T_sep + k] / c
            if w > 0.0:
                f += 0.5 * c * w * w
                gP[k, 0] += -2.0 * c * w * dx
                gP[k, 1] += -2.0 * c * w * dy
    for k in range(T):
        w = P[k, 0] - bounds[1] + y[n_sep + k] / c
        if w > 0.0:
            f += 0.5 * c * w * w
            gP[k, 0] += c * w
        w = bounds[0] - P[k, 0] + y[n_sep + T + k] / c
        if w > 0.0:
            f += 0.5 * c * w * w
            gP[k, 0] -= c * w
        w = P[k, 1] - bounds[3] + y[n_sep + 2 * T + k] / c
        if w > 0.0:
            f += 0.5 * c * w * w
            gP[k, 1] += c * w
        w = bounds[2] - P[k, 1] + y[n_sep + 3 * T + k] / c
        if w > 0.0:
            f += 0.5 * c * w * w
            gP[k, 1] -= c * w

    # penalty terms: obstacles
    for k in range(T):
        for m in range(M):
            dx = P[k, 0] - obstacles[m, 0]
            dy = P[k, 1] - obstacles[m, 1]
            h = r_s2 - (dx * dx + dy * dy)
            if h > 0.0:
                f += 0.5 * c * h * h
                gP[k, 0] += -2.0 * c * h * dx
                gP[k, 1] += -2.0 * c * h * dy

    g = np.zeros(2 * T)
    if not need_grad:
        return f, g
    # reverse pass through the rollout
    Gx = 0.0
    Gy = 0.0
    tail = 0.0
    for k in range(T - 1, -1, -1):
        Gx += gP[k, 0] * dt
        Gy += gP[k, 1] * dt
        hx = Gx + gV[k, 0]
        hy = Gy + gV[k, 1]
        g[2 * k] = hx * cs[k, 0] + hy * cs[k, 1] + 2.0 * R[0] * u[2 * k]
        # omega[k] moves the headings of steps k+1 .. T-1
        g[2 * k + 1] = dt * tail + 2.0 * R[1] * u[2 * k + 1]
        tail += u[2 * k] * (hy * cs[k, 0] - hx * cs[k, 1])
    return f, g


@njit(cache=True, fastmath=False)
def cost_and_constraints(u, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel,
                         nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin,
                         bounds, obstacles, r_s2):
    """Original cost, the ALM constraint vector and the largest obstacle value."""
    T = u.shape[0] // 2
    J = nb_pos.shape[0]
    M = obstacles.shape[0]
    P, V, cs = _rollout(u, x0, dt)
    f = 0.0
    for k in range(T):
        f += R[0] * u[2 * k] ** 2 + R[1] * u[2 * k + 1] ** 2
        ex = a_p * P[k, 0] - target_p[k, 0]
        ey = a_p * P[k, 1] - target_p[k, 1]
        f += w_pos[k] * (ex * ex + ey * ey)
        fx = a_v * V[k, 0] - target_v[k, 0]
        fy = a_v * V[k, 1] - target_v[k, 1]
        f += w_vel[k] * (fx * fx + fy * fy)
    if rho_sep != 0.0:
        for k in range(T_sep + 1, T):
            row = k - 1
            wk = rho_sep * gamma ** k
            for j in range(J):
                dx = P[row, 0] - nb_pos[j, row, 0]
                dy = P[row, 1] - nb_pos[j, row, 1]
                short = d_sep - (dx * dx + dy * dy)
                if short > 0.0:
                    f += wk * short * short

    n_sep = J * T_sep
    g = np.empty(n_sep + 4 * T)
    for j in range(J):
        for k in range(T_sep):
            dx = P[k, 0] - nb_pos[j, k, 0]
            dy = P[k, 1] - nb_pos[j, k, 1]
            g[j * T_sep + k] = d_sep + sep_margin - (dx * dx + dy * dy)
    for k in range(T):
        g[n_sep + k] = P[k, 0] - bounds[1]
        g[n_sep + T + k] = bounds[0] - P[k, 0]
        g[n_sep + 2 * T + k] = P[k, 1] - bounds[3]
        g[n_sep + 3 * T + k] = bounds[2] - P[k, 1]

    h_max = -np.inf
    for k in range(T):
        for m in range(M):
            dx = P[k, 0] - obstacles[m, 0]
            dy = P[k, 1] - obstacles[m, 1]
            h = r_s2 - (dx * dx + dy * dy)
            if h > h_max:
                h_max = h
    return f, g, h_max


# ---------------------------------------------------------------------------
# PANOC inner loop over the fused NMPC cost.  Step for step this follows
# solver.inner_solve with step growth disabled; only the FBE trace is dropped.

_GAMMA_L_COEFF = 0.95
_LIPSCHITZ_FUDGE = 1e-6
_MIN_LIPSCHITZ = 1e-10
_MAX_LIPSCHITZ = 1e12
_MAX_LINESEARCH = 10
_MAX_BACKTRACKS = 30
_SY_EPS = 1e-10
_CBFGS_EPS = 1e-8

STATUS_CONVERGED = 0
STATUS_BUDGET = 1
STATUS_MAXITERS = 2
STATUS_NONFINITE = 3


@njit(cache=True)
def _now():
    with objmode(t="float64"):
        t = time.perf_counter()
    return t


@njit(cache=True)
def _project(x, lower, upper):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        v = x[i]
        if v < lower[i]:
            v = lower[i]
        elif v > upper[i]:
            v = upper[i]
        out[i] = v
    return out


@njit(cache=True)
def _finite(f, g):
    if not np.isfinite(f):
        return False
    for i in range(g.shape[0]):
        if not np.isfinite(g[i]):
            return False
    return True


@njit(cache=True)
def _lbfgs_apply(q_in, S, Y, count, head):
    q = q_in.copy()
    if count == 0:
        return q
    m = S.shape[0]
    alphas = np.empty(count)
    # newest to oldest
    for i in range(count):
        idx = (head - 1 - i) % m
        a = np.dot(S[idx], q) / np.dot(S[idx], Y[idx])
        alphas[i] = a
        q -= a * Y[idx]
    newest = (head - 1) % m
    q *= np.dot(S[newest], Y[newest]) / np.dot(Y[newest], Y[newest])
    for i in range(count - 1, -1, -1):
        idx = (head - 1 - i) % m
        b = np.dot(Y[idx], q) / np.dot(S[idx], Y[idx])
        q += (alphas[i] - b) * S[idx]
    return q


@njit(cache=True)
def panoc_nmpc(x_init, lower, upper, tol, max_iters, memory, deadline,
               x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel,
               nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin,
               bounds, obstacles, r_s2, y, c):
    """Returns ``(x_bar, residual, iters, status, f_bar)``; ``deadline < 0`` disables the budget."""
    n = x_init.shape[0]
    x = _project(x_init, lower, upper)
    if deadline >= 0.0 and _now() >= deadline:
        return x, np.inf, 0, STATUS_BUDGET, np.nan

    fx, gx = augmented_cost_grad(x, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel, nb_pos, d_sep,
                                 rho_sep, gamma, T_sep, sep_margin, bounds, obstacles, r_s2, y, c, True)
    if not _finite(fx, gx):
        return x, np.inf, 0, STATUS_NONFINITE, fx
    h = np.empty(n)
    for i in range(n):
        h[i] = max(1e-12, 1e-6 * abs(x[i]))
    fh, gh = augmented_cost_grad(x + h, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel, nb_pos, d_sep,
                                 rho_sep, gamma, T_sep, sep_margin, bounds, obstacles, r_s2, y, c, True)
    if not _finite(fh, gh):
        return x, np.inf, 0, STATUS_NONFINITE, fh
    lip = max(np.linalg.norm(gh - gx) / np.linalg.norm(h), _MIN_LIPSCHITZ)
    step = _GAMMA_L_COEFF / lip

    S = np.zeros((memory, n))
    Y = np.zeros((memory, n))
    count = 0
    head = 0
    have_prev = False
    x_prev = np.zeros(n)
    r_prev = np.zeros(n)
    status = STATUS_MAXITERS
    x_bar = x.copy()
    residual = np.inf
    f_bar = fx
    it = 0
    while True:
        if deadline >= 0.0 and _now() >= deadline:
            status = STATUS_BUDGET
            break
        # step-size line search on the quadratic upper bound
        backtracks = 0
        while True:
            x_bar = _project(x - step * gx, lower, upper)
            r = x - x_bar
            f_bar, _g = augmented_cost_grad(x_bar, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel,
                                            nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin, bounds,
                                            obstacles, r_s2, y, c, False)
            if not np.isfinite(f_bar):
                return x_bar, np.inf, it, STATUS_NONFINITE, f_bar
            lipschitz = _GAMMA_L_COEFF / step
            bound = fx + _LIPSCHITZ_FUDGE * abs(fx) - np.dot(gx, r) + 0.5 * lipschitz * np.dot(r, r)
            if f_bar <= bound or backtracks >= _MAX_BACKTRACKS or lipschitz >= _MAX_LIPSCHITZ:
                break
            step *= 0.5
            backtracks += 1
        if backtracks > 0:
            count = 0
            head = 0
            have_prev = False
        residual = 0.0
        for i in range(n):
            residual = max(residual, abs(r[i]))
        residual = residual / step if n > 0 else 0.0
        if residual <= tol:
            status = STATUS_CONVERGED
            break
        if it >= max_iters:
            break
        rr = np.dot(r, r)
        phi = fx - np.dot(gx, r) + rr / (2.0 * step)

        if have_prev:
            s = x - x_prev
            yv = r - r_prev
            sy = np.dot(s, yv)
            ss = np.dot(s, s)
            if not (ss <= 0.0 or sy <= _SY_EPS * ss or sy / ss <= _CBFGS_EPS * np.sqrt(rr)):
                S[head] = s
                Y[head] = yv
                head = (head + 1) % memory
                count = min(count + 1, memory)
        x_prev = x.copy()
        r_prev = r.copy()
        have_prev = True

        sigma = (1.0 - _GAMMA_L_COEFF) / (4.0 * step)
        target = phi - sigma * rr
        if count == 0:
            x_new = x_bar.copy()
            f_new, g_new = augmented_cost_grad(x_new, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel,
                                               nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin, bounds,
                                               obstacles, r_s2, y, c, True)
        else:
            d = _lbfgs_apply(r, S, Y, count, head)
            tau = 1.0
            accepted = False
            for _ in range(_MAX_LINESEARCH):
                x_new = x - (1.0 - tau) * r - tau * d
                f_new, g_new = augmented_cost_grad(x_new, x0, dt, R, a_p, a_v, target_p, target_v, w_pos, w_vel,
                                                   nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin, bounds,
                                                   obstacles, r_s2, y, c, True)
                if not _finite(f_new, g_new):
                    return x_bar, np.inf, it, STATUS_NONFINITE, f_new
                r_new = x_new - _project(x_new - step * g_new, lower, upper)
                env = f_new - np.dot(g_new, r_new) + np.dot(r_new, r_new) / (2.0 * step)
                if env <= target:
                    accepted = True
                    break
                tau *= 0.5
            if not accepted:
                x_new = x_bar.copy()
                f_new, g_new = augmented_cost_grad(x_new, x0, dt, R, a_p, a_v, target_p, target_v, w_pos,
                                                   w_vel, nb_pos, d_sep, rho_sep, gamma, T_sep, sep_margin,
                                                   bounds, obstacles, r_s2, y, c, True)
        if not _finite(f_new, g_new):
            return x_bar, np.inf, it, STATUS_NONFINITE, f_new
        x = x_new
        fx = f_new
        gx = g_new
        it += 1
    return x_bar, residual, it, status, f_bar
