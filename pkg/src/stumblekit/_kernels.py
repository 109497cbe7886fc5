"""Compiled integration kernels for the episode drivers.

Everything here mirrors the numpy formulas in model.py; the test suite pins
the two routes against each other at machine precision. Only simulate.py
should call into this module.
"""

from __future__ import annotations

import numpy as np
from numba import njit

R_PHI = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 1.0],
        [1.0, 0.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 1.0, 0.0],
    ]
)
STRIDE_PERM = np.array([0, 2, 1, 4, 3], dtype=np.int64)

# drive() exit codes
EVT_TIMEOUT = 0
EVT_HEEL_STRIKE = 1
EVT_FELL = 2
EVT_FRAC_STOP = 3

BISECT_TOL_S = 1e-8
STATE_NORM_BOUND = 1e3


@njit(cache=True)
def _theta(q):
    return -q[0] - q[1] - 0.5 * q[4]


@njit(cache=True)
def _phi_pair(q, qd):
    phi = np.zeros(5)
    phid = np.zeros(5)
    for j in range(5):
        a = 0.0
        b = 0.0
        for l in range(5):
            a += R_PHI[j, l] * q[l]
            b += R_PHI[j, l] * qd[l]
        phi[j] = a
        phid[j] = b
    return phi, phid


@njit(cache=True)
def terms(q, qd, P, iner, gw):
    """M(q), bias(q, qd) in q coordinates; same closed form as model.py."""
    phi, phid = _phi_pair(q, qd)
    Mphi = np.zeros((5, 5))
    cg = np.zeros(5)
    for j in range(5):
        cor = 0.0
        for l in range(5):
            d = phi[j] - phi[l]
            Mphi[j, l] = P[j, l] * np.cos(d)
            cor += P[j, l] * np.sin(d) * phid[l] * phid[l]
        Mphi[j, j] += iner[j]
        cg[j] = cor - gw[j] * np.sin(phi[j])
    M = R_PHI.T @ (Mphi @ R_PHI)
    bias = R_PHI.T @ cg
    return M, bias


@njit(cache=True)
def _qdd(q, qd, u, P, iner, gw):
    M, bias = terms(q, qd, P, iner, gw)
    tau = np.zeros(5)
    for a in range(4):
        tau[a + 1] = u[a]
    return np.linalg.solve(M, tau - bias)


@njit(cache=True)
def _swing_foot(q, qd, swf):
    """Swing-foot position and velocity from phi-slot coefficients."""
    phi, phid = _phi_pair(q, qd)
    px = 0.0
    py = 0.0
    vx = 0.0
    vy = 0.0
    for j in range(5):
        px -= swf[j] * np.sin(phi[j])
        py += swf[j] * np.cos(phi[j])
        vx -= swf[j] * np.cos(phi[j]) * phid[j]
        vy -= swf[j] * np.sin(phi[j]) * phid[j]
    return px, py, vx, vy


@njit(cache=True)
def _com_height(q, com_w):
    phi, _ = _phi_pair(q, q)
    h = 0.0
    for j in range(5):
        h += com_w[j] * np.cos(phi[j])
    return h


@njit(cache=True)
def _bez5(c, s):
    u = 1.0 - s
    u2 = u * u
    s2 = s * s
    b0 = u2 * u2 * u
    b1 = 5.0 * u2 * u2 * s
    b2 = 10.0 * u2 * u * s2
    b3 = 10.0 * u2 * s2 * s
    b4 = 5.0 * u * s2 * s2
    b5 = s2 * s2 * s
    return c[0] * b0 + c[1] * b1 + c[2] * b2 + c[3] * b3 + c[4] * b4 + c[5] * b5


@njit(cache=True)
def _interp_col(tg, Y, col, tq):
    n = tg.shape[0]
    if tq <= tg[0]:
        return Y[0, col]
    if tq >= tg[n - 1]:
        return Y[n - 1, col]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tg[mid] <= tq:
            lo = mid
        else:
            hi = mid
    w = (tq - tg[lo]) / (tg[hi] - tg[lo])
    return Y[lo, col] * (1.0 - w) + Y[hi, col] * w


@njit(cache=True)
def _controller(t, q, qd, s_frac,
                pos_c, vel_c,
                joint_mode, kp, kd, sat,
                traj_t, traj_q, traj_qd, traj_anchor,
                hold_on, hold_kp, hold_kd, hold_px, hold_py,
                swf):
    """Per-actuator PD torques plus the optional swing-foot hold overlay.

    joint_mode[a]: 0 = phase PD on the gait Bezier references, 1 = PD on an
    explicit time-indexed trajectory anchored at traj_anchor. Returns the
    saturated torque vector and the swing-foot hold error norm.
    """
    u = np.zeros(4)
    s = s_frac
    if s < 0.0:
        s = 0.0
    elif s > 1.0:
        s = 1.0
    for a in range(4):
        jq = a + 1
        if joint_mode[a] == 0:
            qr = _bez5(pos_c[jq], s)
            qdr = _bez5(vel_c[jq], s)
        else:
            tq = t - traj_anchor
            qr = _interp_col(traj_t, traj_q, jq, tq)
            qdr = _interp_col(traj_t, traj_qd, jq, tq)
        u[a] = kp[a] * (qr - q[jq]) + kd[a] * (qdr - qd[jq])
    drift = 0.0
    if hold_on == 1:
        px, py, vx, vy = _swing_foot(q, qd, swf)
        fx = hold_kp * (hold_px - px) - hold_kd * vx
        fy = hold_kp * (hold_py - py) - hold_kd * vy
        phi, _ = _phi_pair(q, q)
        # task-space force mapped through the swing-foot Jacobian columns
        # for the swing hip (q index 2) and swing knee (q index 3)
        jx2 = 0.0
        jy2 = 0.0
        jx3 = 0.0
        jy3 = 0.0
        for j in range(5):
            cx = -swf[j] * np.cos(phi[j])
            cy = -swf[j] * np.sin(phi[j])
            jx2 += cx * R_PHI[j, 2]
            jy2 += cy * R_PHI[j, 2]
            jx3 += cx * R_PHI[j, 3]
            jy3 += cy * R_PHI[j, 3]
        u[1] += jx2 * fx + jy2 * fy
        u[2] += jx3 * fx + jy3 * fy
        drift = np.sqrt((px - hold_px) ** 2 + (py - hold_py) ** 2)
    for a in range(4):
        if u[a] > sat[a]:
            u[a] = sat[a]
        elif u[a] < -sat[a]:
            u[a] = -sat[a]
    return u, drift


@njit(cache=True)
def _rk4(t, q, qd, h, th0, denom,
         P, iner, gw,
         pos_c, vel_c,
         joint_mode, kp, kd, sat,
         traj_t, traj_q, traj_qd, traj_anchor,
         hold_on, hold_kp, hold_kd, hold_px, hold_py,
         swf):
    """One RK4 step with the feedback law evaluated at every stage."""
    s1 = (_theta(q) - th0) / denom
    u1, _ = _controller(t, q, qd, s1, pos_c, vel_c, joint_mode, kp, kd, sat,
                        traj_t, traj_q, traj_qd, traj_anchor,
                        hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
    k1q = qd
    k1v = _qdd(q, qd, u1, P, iner, gw)

    q2 = q + 0.5 * h * k1q
    v2 = qd + 0.5 * h * k1v
    s2 = (_theta(q2) - th0) / denom
    u2, _ = _controller(t + 0.5 * h, q2, v2, s2, pos_c, vel_c, joint_mode, kp, kd, sat,
                        traj_t, traj_q, traj_qd, traj_anchor,
                        hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
    k2q = v2
    k2v = _qdd(q2, v2, u2, P, iner, gw)

    q3 = q + 0.5 * h * k2q
    v3 = qd + 0.5 * h * k2v
    s3 = (_theta(q3) - th0) / denom
    u3, _ = _controller(t + 0.5 * h, q3, v3, s3, pos_c, vel_c, joint_mode, kp, kd, sat,
                        traj_t, traj_q, traj_qd, traj_anchor,
                        hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
    k3q = v3
    k3v = _qdd(q3, v3, u3, P, iner, gw)

    q4 = q + h * k3q
    v4 = qd + h * k3v
    s4 = (_theta(q4) - th0) / denom
    u4, _ = _controller(t + h, q4, v4, s4, pos_c, vel_c, joint_mode, kp, kd, sat,
                        traj_t, traj_q, traj_qd, traj_anchor,
                        hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
    k4q = v4
    k4v = _qdd(q4, v4, u4, P, iner, gw)

    qn = q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    vn = qd + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return qn, vn


@njit(cache=True)
def drive(q0, qd0, t0, horizon, dt,
          P, iner, gw, com_w, swf, th0, thf,
          pos_c, vel_c,
          joint_mode, kp, kd, sat,
          traj_t, traj_q, traj_qd, traj_anchor,
          hold_on, hold_kp, hold_kd, hold_px, hold_py,
          stop_frac, arm_frac, com_y_min,
          log_t, log_q, log_qd, log_u, log_th):
    """Integrate one continuous segment until an event.

    Exit codes: EVT_TIMEOUT (horizon), EVT_HEEL_STRIKE (armed descending
    guard crossing with the swing foot ahead), EVT_FELL (torso or COM
    proxy, divergence, or guard crossing behind the stance foot),
    EVT_FRAC_STOP (theta fraction reached stop_frac). Event times are
    bisection-refined to BISECT_TOL_S.
    """
    q = q0.copy()
    qd = qd0.copy()
    t = t0
    n = 0
    denom = thf - th0
    drift_max = 0.0
    status = EVT_TIMEOUT
    t_cap = t0 + horizon
    max_log = log_t.shape[0]

    while t < t_cap - 1e-12 and n < max_log - 2:
        th = _theta(q)
        s_frac = (th - th0) / denom
        u, drift = _controller(t, q, qd, s_frac, pos_c, vel_c, joint_mode, kp, kd, sat,
                               traj_t, traj_q, traj_qd, traj_anchor,
                               hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
        if drift > drift_max:
            drift_max = drift
        log_t[n] = t
        for i in range(5):
            log_q[n, i] = q[i]
            log_qd[n, i] = qd[i]
        for i in range(4):
            log_u[n, i] = u[i]
        log_th[n] = th
        n += 1

        h_step = dt
        if t + dt > t_cap:
            h_step = t_cap - t
        _, h_prev, _, _ = _swing_foot(q, qd, swf)
        q_new, qd_new = _rk4(t, q, qd, h_step, th0, denom, P, iner, gw,
                             pos_c, vel_c, joint_mode, kp, kd, sat,
                             traj_t, traj_q, traj_qd, traj_anchor,
                             hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
        t_new = t + h_step

        finite = True
        for i in range(5):
            if not (np.isfinite(q_new[i]) and np.isfinite(qd_new[i])):
                finite = False
            if abs(q_new[i]) > STATE_NORM_BOUND or abs(qd_new[i]) > STATE_NORM_BOUND:
                finite = False
        if not finite:
            status = EVT_FELL
            break

        # candidate event times within this step (bisection-refined offsets)
        tau_guard = np.inf
        tau_stop = np.inf

        _, h_new, _, _ = _swing_foot(q_new, qd_new, swf)
        s_new = (_theta(q_new) - th0) / denom
        if s_new >= arm_frac and h_prev > 0.0 and h_new <= 0.0:
            lo = 0.0
            hi = h_step
            while hi - lo > BISECT_TOL_S:
                mid = 0.5 * (lo + hi)
                qm, vm = _rk4(t, q, qd, mid, th0, denom, P, iner, gw,
                              pos_c, vel_c, joint_mode, kp, kd, sat,
                              traj_t, traj_q, traj_qd, traj_anchor,
                              hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
                _, hm, _, _ = _swing_foot(qm, vm, swf)
                if hm > 0.0:
                    lo = mid
                else:
                    hi = mid
            tau_guard = hi

        if stop_frac < 9.0 and s_frac < stop_frac and s_new >= stop_frac:
            lo = 0.0
            hi = h_step
            while hi - lo > BISECT_TOL_S:
                mid = 0.5 * (lo + hi)
                qm, vm = _rk4(t, q, qd, mid, th0, denom, P, iner, gw,
                              pos_c, vel_c, joint_mode, kp, kd, sat,
                              traj_t, traj_q, traj_qd, traj_anchor,
                              hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
                sm = (_theta(qm) - th0) / denom
                if sm < stop_frac:
                    lo = mid
                else:
                    hi = mid
            tau_stop = hi

        if tau_guard < tau_stop:
            qh, vh = _rk4(t, q, qd, tau_guard, th0, denom, P, iner, gw,
                          pos_c, vel_c, joint_mode, kp, kd, sat,
                          traj_t, traj_q, traj_qd, traj_anchor,
                          hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
            px, _, _, vy = _swing_foot(qh, vh, swf)
            if vy < 0.0:
                q = qh
                qd = vh
                t = t + tau_guard
                status = EVT_HEEL_STRIKE if px > 1e-9 else EVT_FELL
                break
        elif tau_stop < np.inf:
            qh, vh = _rk4(t, q, qd, tau_stop, th0, denom, P, iner, gw,
                          pos_c, vel_c, joint_mode, kp, kd, sat,
                          traj_t, traj_q, traj_qd, traj_anchor,
                          hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
            q = qh
            qd = vh
            t = t + tau_stop
            status = EVT_FRAC_STOP
            break

        if abs(q_new[0]) > 1.0 or _com_height(q_new, com_w) < com_y_min:
            q = q_new
            qd = qd_new
            t = t_new
            status = EVT_FELL
            break

        q = q_new
        qd = qd_new
        t = t_new

    if n == 0 or t > log_t[n - 1] + 1e-15:
        th = _theta(q)
        s_frac = (th - th0) / denom
        u, _ = _controller(t, q, qd, s_frac, pos_c, vel_c, joint_mode, kp, kd, sat,
                           traj_t, traj_q, traj_qd, traj_anchor,
                           hold_on, hold_kp, hold_kd, hold_px, hold_py, swf)
        log_t[n] = t
        for i in range(5):
            log_q[n, i] = q[i]
            log_qd[n, i] = qd[i]
        for i in range(4):
            log_u[n, i] = u[i]
        log_th[n] = th
        n += 1
    return n, status, t, q, qd, drift_max


@njit(cache=True)
def impact_kernel(q, qd, P, iner, mw, swf, total_mass):
    """Plastic swing-foot impact plus stance relabeling; mirrors model.py."""
    phi, _ = _phi_pair(q, q)
    Mphi = np.zeros((5, 5))
    for j in range(5):
        for l in range(5):
            Mphi[j, l] = P[j, l] * np.cos(phi[j] - phi[l])
        Mphi[j, j] += iner[j]
    Mqq = R_PHI.T @ (Mphi @ R_PHI)

    Mphib = np.zeros((5, 2))
    for j in range(5):
        Mphib[j, 0] = mw[j] * (-np.cos(phi[j]))
        Mphib[j, 1] = mw[j] * (-np.sin(phi[j]))
    Mqb = R_PHI.T @ Mphib  # (5,2)

    Me = np.zeros((7, 7))
    for i in range(5):
        for j in range(5):
            Me[i, j] = Mqq[i, j]
        Me[i, 5] = Mqb[i, 0]
        Me[i, 6] = Mqb[i, 1]
        Me[5, i] = Mqb[i, 0]
        Me[6, i] = Mqb[i, 1]
    Me[5, 5] = total_mass
    Me[6, 6] = total_mass

    J = np.zeros((2, 7))
    for l in range(5):
        jx = 0.0
        jy = 0.0
        for j in range(5):
            jx += -swf[j] * np.cos(phi[j]) * R_PHI[j, l]
            jy += -swf[j] * np.sin(phi[j]) * R_PHI[j, l]
        J[0, l] = jx
        J[1, l] = jy
    J[0, 5] = 1.0
    J[1, 6] = 1.0

    A = np.zeros((9, 9))
    for i in range(7):
        for j in range(7):
            A[i, j] = Me[i, j]
        for r in range(2):
            A[i, 7 + r] = -J[r, i]
    for r in range(2):
        for i in range(7):
            A[7 + r, i] = J[r, i]

    qd_ext = np.zeros(7)
    for i in range(5):
        qd_ext[i] = qd[i]
    rhs = np.zeros(9)
    mom = Me @ qd_ext
    for i in range(7):
        rhs[i] = mom[i]

    sol = np.linalg.solve(A, rhs)
    q_new = np.zeros(5)
    qd_new = np.zeros(5)
    for i in range(5):
        q_new[i] = q[STRIDE_PERM[i]]
        qd_new[i] = sol[STRIDE_PERM[i]]
    return q_new, qd_new
