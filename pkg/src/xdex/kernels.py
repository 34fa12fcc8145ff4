"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public modules call the dispatch names at the bottom of this file
(``link_points``, ``points_jacobian``, ``adam_update``); ``XDEX_KERNELS``
picks the implementation. Both flavours are importable directly so tests
and ``benchmarks/`` can compare them.

Kinematic model arrays (all joints in topological order, parents first):

    parent_link, child_link : (J,) int64
    origins                 : (J, 4, 4) static joint origin transforms
    axes                    : (J, 3) unit joint axes in the joint frame
    jtype                   : (J,) int64, 0 fixed, 1 revolute, 2 prismatic
    src, mult, offset       : joint value = mult * q[src] + offset (src -1: fixed)
    point_links             : (P,) link index of each output point
    ancestor                : (J, P) bool, joint lies on the root->point path
"""

from __future__ import annotations

import math

import numpy as np

from xdex._accel import BACKEND, njit

FIXED, REVOLUTE, PRISMATIC = 0, 1, 2


# --------------------------------------------------------------------------
# numba


@njit(cache=True)
def _mat4_mul(A, B, out):
    for i in range(4):
        for j in range(4):
            s = 0.0
            for k in range(4):
                s += A[i, k] * B[k, j]
            out[i, j] = s


@njit(cache=True)
def _joint_motion(axis, jt, value, out):
    for i in range(4):
        for j in range(4):
            out[i, j] = 1.0 if i == j else 0.0
    if jt == 1:
        x, y, z = axis[0], axis[1], axis[2]
        c = math.cos(value)
        s = math.sin(value)
        t = 1.0 - c
        out[0, 0] = c + x * x * t
        out[0, 1] = x * y * t - z * s
        out[0, 2] = x * z * t + y * s
        out[1, 0] = y * x * t + z * s
        out[1, 1] = c + y * y * t
        out[1, 2] = y * z * t - x * s
        out[2, 0] = z * x * t - y * s
        out[2, 1] = z * y * t + x * s
        out[2, 2] = c + z * z * t
    elif jt == 2:
        out[0, 3] = axis[0] * value
        out[1, 3] = axis[1] * value
        out[2, 3] = axis[2] * value


@njit(cache=True)
def _forward_numba(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                   n_links, root, joint_pos, joint_axis):
    T = np.zeros((n_links, 4, 4))
    for i in range(4):
        T[root, i, i] = 1.0
    A = np.empty((4, 4))
    M = np.empty((4, 4))
    for jj in range(parent_link.shape[0]):
        _mat4_mul(T[parent_link[jj]], origins[jj], A)
        for r in range(3):
            joint_pos[jj, r] = A[r, 3]
            joint_axis[jj, r] = A[r, 0] * axes[jj, 0] + A[r, 1] * axes[jj, 1] + A[r, 2] * axes[jj, 2]
        value = offset[jj]
        if src[jj] >= 0:
            value += mult[jj] * q[src[jj]]
        _joint_motion(axes[jj], jtype[jj], value, M)
        _mat4_mul(A, M, T[child_link[jj]])
    return T


@njit(cache=True)
def link_points_numba(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                      n_links, root, point_links):
    J = parent_link.shape[0]
    jp = np.empty((J, 3))
    ja = np.empty((J, 3))
    T = _forward_numba(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                       n_links, root, jp, ja)
    P = point_links.shape[0]
    pts = np.empty((P, 3))
    for i in range(P):
        for r in range(3):
            pts[i, r] = T[point_links[i], r, 3]
    return pts


@njit(cache=True)
def points_jacobian_numba(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                          n_links, root, point_links, ancestor):
    J = parent_link.shape[0]
    jp = np.empty((J, 3))
    ja = np.empty((J, 3))
    T = _forward_numba(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                       n_links, root, jp, ja)
    P = point_links.shape[0]
    pts = np.empty((P, 3))
    for i in range(P):
        for r in range(3):
            pts[i, r] = T[point_links[i], r, 3]
    jac = np.zeros((3 * P, q.shape[0]))
    for jj in range(J):
        if jtype[jj] == 0 or src[jj] < 0:
            continue
        col = src[jj]
        m = mult[jj]
        wx, wy, wz = ja[jj, 0], ja[jj, 1], ja[jj, 2]
        for i in range(P):
            if not ancestor[jj, i]:
                continue
            if jtype[jj] == 1:
                rx = pts[i, 0] - jp[jj, 0]
                ry = pts[i, 1] - jp[jj, 1]
                rz = pts[i, 2] - jp[jj, 2]
                jac[3 * i, col] += m * (wy * rz - wz * ry)
                jac[3 * i + 1, col] += m * (wz * rx - wx * rz)
                jac[3 * i + 2, col] += m * (wx * ry - wy * rx)
            else:
                jac[3 * i, col] += m * wx
                jac[3 * i + 1, col] += m * wy
                jac[3 * i + 2, col] += m * wz
    return pts, jac


@njit(cache=True, fastmath=True, error_model="numpy")
def _adam_numba(param, grad, m, v, b1, ob1, b2, ob2, step, eps_hat):
    for i in range(param.shape[0]):
        g = grad[i]
        mi = b1 * m[i] + ob1 * g
        vi = b2 * v[i] + ob2 * g * g
        m[i] = mi
        v[i] = vi
        param[i] -= step * mi / (np.sqrt(vi) + eps_hat)


def _adam_scalars(dtype, lr, beta1, beta2, eps, t):
    # folded bias correction: lr * sqrt(c2) / c1 * m / (sqrt(v) + eps * sqrt(c2))
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    cast = np.dtype(dtype).type
    return (cast(beta1), cast(1.0 - beta1), cast(beta2), cast(1.0 - beta2),
            cast(lr * math.sqrt(c2) / c1), cast(eps * math.sqrt(c2)))


def adam_update_numba(param, grad, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam step on flat arrays; ``t`` is the 1-based step count."""
    _adam_numba(param, grad, m, v, *_adam_scalars(param.dtype, lr, beta1, beta2, eps, t))


@njit(cache=True)
def _lsq_residuals(q, q_prev, x_target, A, sw, ss, parent_link, child_link, origins, axes,
                   jtype, src, mult, offset, n_links, root, point_links, ancestor, r, Jr,
                   with_jac):
    """Fill r (and Jr) of the stacked least-squares residual; return |r|^2."""
    m = q.shape[0]
    R, P = A.shape
    if with_jac:
        pts, jac = points_jacobian_numba(q, parent_link, child_link, origins, axes, jtype, src,
                                         mult, offset, n_links, root, point_links, ancestor)
    else:
        pts = link_points_numba(q, parent_link, child_link, origins, axes, jtype, src, mult,
                                offset, n_links, root, point_links)
        jac = np.empty((0, 0))
    f = 0.0
    for a in range(R):
        for c in range(3):
            s = 0.0
            for p in range(P):
                s += A[a, p] * (pts[p, c] - x_target[p, c])
            s *= sw
            r[3 * a + c] = s
            f += s * s
            if with_jac:
                for k in range(m):
                    t = 0.0
                    for p in range(P):
                        t += A[a, p] * jac[3 * p + c, k]
                    Jr[3 * a + c, k] = sw * t
    base = 3 * R
    for k in range(m):
        s = ss * (q[k] - q_prev[k])
        r[base + k] = s
        f += s * s
        if with_jac:
            for k2 in range(m):
                Jr[base + k, k2] = ss if k == k2 else 0.0
    return f


@njit(cache=True)
def _damped_direction(Jr, r, g, q, lo, hi, mu, d):
    """Marquardt-damped Gauss-Newton step on the variables not pinned at a bound.

    Solves (H + mu diag(H)) d = -J^T r over the free set; returns False when
    no descent direction results.
    """
    m = q.shape[0]
    n_res = r.shape[0]
    free = np.empty(m, dtype=np.int64)
    nf = 0
    for k in range(m):
        pinned = (q[k] <= lo[k] and g[k] > 0.0) or (q[k] >= hi[k] and g[k] < 0.0)
        if not pinned:
            free[nf] = k
            nf += 1
    if nf == 0:
        return False
    H = np.zeros((nf, nf))
    rhs = np.zeros(nf)
    tr = 0.0
    for a in range(nf):
        ka = free[a]
        s = 0.0
        for i in range(n_res):
            s += Jr[i, ka] * r[i]
        rhs[a] = -s
        for b in range(a, nf):
            kb = free[b]
            s = 0.0
            for i in range(n_res):
                s += Jr[i, ka] * Jr[i, kb]
            H[a, b] = s
            H[b, a] = s
        tr += H[a, a]
    for a in range(nf):
        H[a, a] += mu * H[a, a] + 1e-12 * (1.0 + tr)
    try:
        df = np.linalg.solve(H, rhs)
    except Exception:
        return False
    for k in range(m):
        d[k] = 0.0
    for a in range(nf):
        if not np.isfinite(df[a]):
            return False
        d[free[a]] = df[a]
    gd = 0.0
    for k in range(m):
        gd += g[k] * d[k]
    return gd < 0.0


@njit(cache=True)
def solve_box_lsq_numba(q_prev, q_start, x_target, A, sw, ss, lo, hi, max_iter, gtol, step_tol,
                        use_gauss_newton, damping, armijo_c, max_halvings,
                        parent_link, child_link, origins, axes, jtype, src, mult, offset,
                        n_links, root, point_links, ancestor, trace):
    """Projected damped Gauss-Newton / gradient iteration with a sufficient-decrease test.

    A rejected damped step raises the damping by 4x (at most ``max_halvings``
    times) before falling back to projected gradient with step halving.
    Returns (q, f, iterations, reason, n_trace); reason codes 0 max_iterations,
    1 gradient_tolerance, 2 line_search, 3 step_tolerance. ``trace`` receives
    the objective before each iteration and after the last accepted step.
    """
    m = q_prev.shape[0]
    n_res = 3 * A.shape[0] + m
    r = np.empty(n_res)
    Jr = np.empty((n_res, m))
    r_new = np.empty(n_res)
    Jdummy = np.empty((0, 0))
    q = np.minimum(np.maximum(q_start, lo), hi)
    f = _lsq_residuals(q, q_prev, x_target, A, sw, ss, parent_link, child_link, origins, axes,
                       jtype, src, mult, offset, n_links, root, point_links, ancestor, r, Jr, True)
    n_trace = 0
    trace[n_trace] = f
    n_trace += 1
    reason = 0
    it = 0
    mu = damping
    g = np.empty(m)
    d = np.empty(m)
    q_new = np.empty(m)
    dq = np.empty(m)
    while it < max_iter:
        for k in range(m):
            s = 0.0
            for i in range(n_res):
                s += Jr[i, k] * r[i]
            g[k] = 2.0 * s
        pg = 0.0
        for k in range(m):
            v = q[k] - min(max(q[k] - g[k], lo[k]), hi[k])
            pg += v * v
        if math.sqrt(pg) <= gtol:
            reason = 1
            break
        accepted = False
        f_new = f
        for attempt in range(2):
            if attempt == 0 and not use_gauss_newton:
                continue
            alpha = 1.0
            for _ in range(max_halvings):
                if attempt == 0:
                    if not _damped_direction(Jr, r, g, q, lo, hi, mu, d):
                        break
                else:
                    for k in range(m):
                        d[k] = -g[k]
                decrease = 0.0
                for k in range(m):
                    qk = min(max(q[k] + alpha * d[k], lo[k]), hi[k])
                    q_new[k] = qk
                    dq[k] = qk - q[k]
                    decrease += g[k] * dq[k]
                if decrease < 0.0:
                    f_new = _lsq_residuals(q_new, q_prev, x_target, A, sw, ss, parent_link,
                                           child_link, origins, axes, jtype, src, mult, offset,
                                           n_links, root, point_links, ancestor, r_new, Jdummy,
                                           False)
                    if f_new <= f + armijo_c * decrease and f_new <= f:
                        accepted = True
                        break
                if attempt == 0:
                    mu = max(4.0 * mu, 1e-9)
                else:
                    alpha *= 0.5
            if accepted:
                if attempt == 0:
                    mu = mu / 3.0
                break
        it += 1
        if not accepted:
            reason = 2
            break
        step = 0.0
        for k in range(m):
            step += dq[k] * dq[k]
            q[k] = q_new[k]
        f = _lsq_residuals(q, q_prev, x_target, A, sw, ss, parent_link, child_link, origins, axes,
                           jtype, src, mult, offset, n_links, root, point_links, ancestor, r, Jr,
                           True)
        trace[n_trace] = f
        n_trace += 1
        if math.sqrt(step) <= step_tol:
            reason = 3
            break
    return q, f, it, reason, n_trace


# --------------------------------------------------------------------------
# numpy


def _motion_numpy(axis, jt, value):
    M = np.eye(4)
    if jt == REVOLUTE:
        x, y, z = axis
        K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        M[:3, :3] += math.sin(value) * K + (1.0 - math.cos(value)) * (K @ K)
    elif jt == PRISMATIC:
        M[:3, 3] = axis * value
    return M


def _forward_numpy(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                   n_links, root):
    T = np.zeros((n_links, 4, 4))
    T[root] = np.eye(4)
    J = len(parent_link)
    jp = np.empty((J, 3))
    ja = np.empty((J, 3))
    values = offset + np.where(src >= 0, mult * q[np.maximum(src, 0)], 0.0)
    for jj in range(J):
        A = T[parent_link[jj]] @ origins[jj]
        jp[jj] = A[:3, 3]
        ja[jj] = A[:3, :3] @ axes[jj]
        T[child_link[jj]] = A @ _motion_numpy(axes[jj], jtype[jj], values[jj])
    return T, jp, ja


def link_points_numpy(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                      n_links, root, point_links):
    T, _, _ = _forward_numpy(q, parent_link, child_link, origins, axes, jtype, src, mult,
                             offset, n_links, root)
    return T[point_links, :3, 3].copy()


def points_jacobian_numpy(q, parent_link, child_link, origins, axes, jtype, src, mult, offset,
                          n_links, root, point_links, ancestor):
    T, jp, ja = _forward_numpy(q, parent_link, child_link, origins, axes, jtype, src, mult,
                               offset, n_links, root)
    pts = T[point_links, :3, 3].copy()
    P, m = len(point_links), len(q)
    # (J, P, 3) point velocity per unit joint motion
    lever = pts[None, :, :] - jp[:, None, :]
    rev = np.cross(np.broadcast_to(ja[:, None, :], lever.shape), lever)
    pri = np.broadcast_to(ja[:, None, :], lever.shape)
    contrib = np.where((jtype == REVOLUTE)[:, None, None], rev, pri)
    live = ancestor & ((jtype != FIXED) & (src >= 0))[:, None]
    contrib = contrib * (live * mult[:, None])[:, :, None]
    # scatter-add joint contributions into actuated columns (mimic joints share one)
    onehot = np.zeros((len(src), m))
    movable = src >= 0
    onehot[np.nonzero(movable)[0], src[movable]] = 1.0
    jac = np.einsum("jpr,jc->prc", contrib, onehot).reshape(3 * P, m)
    return pts, jac


def adam_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, t):
    b1, ob1, b2, ob2, step, eps_hat = _adam_scalars(param.dtype, lr, beta1, beta2, eps, t)
    m *= b1
    m += ob1 * grad
    v *= b2
    v += ob2 * grad * grad
    param -= step * m / (np.sqrt(v) + eps_hat)


# --------------------------------------------------------------------------
# dispatch

if BACKEND == "numba":
    link_points = link_points_numba
    points_jacobian = points_jacobian_numba
    adam_update = adam_update_numba
else:
    link_points = link_points_numpy
    points_jacobian = points_jacobian_numpy
    adam_update = adam_update_numpy
