"""Compiled planar tree kinematics and dynamics.

All routines take the flat array description built by ``RobotModel`` so they
can be jitted. Conventions: world x forward, z up, pitch about +y. A local
vector r on a link with absolute pitch th maps to ``R(th) r`` with
``R = [[c, s], [-s, c]]``; the derivative of ``R r`` w.r.t. th is ``S R r``
with ``S = [[0, 1], [-1, 0]]``.
"""
import math

import numpy as np
from numba import njit

FLOATING = 0
REVOLUTE = 1
PLANAR = 2
PINNED = 3

TRANS_X = 0
TRANS_Z = 1
ROT = 2


@njit(cache=True)
def kinematics(parent, jtype, cstart, attach, q, qd):
    n = parent.shape[0]
    org = np.zeros((n, 2))
    th = np.zeros(n)
    vel = np.zeros((n, 2))
    om = np.zeros(n)
    acc = np.zeros((n, 2))
    for i in range(n):
        k = cstart[i]
        jt = jtype[i]
        if jt == FLOATING:
            org[i, 0] = q[k]
            org[i, 1] = q[k + 1]
            th[i] = q[k + 2]
            vel[i, 0] = qd[k]
            vel[i, 1] = qd[k + 1]
            om[i] = qd[k + 2]
        elif jt == PINNED:
            org[i, 0] = attach[i, 0]
            org[i, 1] = attach[i, 1]
            th[i] = q[k]
            om[i] = qd[k]
        else:
            p = parent[i]
            c = math.cos(th[p])
            s = math.sin(th[p])
            rx = c * attach[i, 0] + s * attach[i, 1]
            rz = -s * attach[i, 0] + c * attach[i, 1]
            w = om[p]
            org[i, 0] = org[p, 0] + rx
            org[i, 1] = org[p, 1] + rz
            vel[i, 0] = vel[p, 0] + w * rz
            vel[i, 1] = vel[p, 1] - w * rx
            acc[i, 0] = acc[p, 0] - w * w * rx
            acc[i, 1] = acc[p, 1] - w * w * rz
            if jt == REVOLUTE:
                th[i] = th[p] + q[k]
                om[i] = w + qd[k]
            else:
                org[i, 0] += q[k]
                org[i, 1] += q[k + 1]
                vel[i, 0] += qd[k]
                vel[i, 1] += qd[k + 1]
                th[i] = th[p] + q[k + 2]
                om[i] = w + qd[k + 2]
    return org, th, vel, om, acc


@njit(cache=True)
def point_state(org, th, vel, om, acc, i, lx, lz):
    """World position, velocity and velocity-product acceleration of a point."""
    c = math.cos(th[i])
    s = math.sin(th[i])
    rx = c * lx + s * lz
    rz = -s * lx + c * lz
    w = om[i]
    pos = np.array([org[i, 0] + rx, org[i, 1] + rz])
    v = np.array([vel[i, 0] + w * rz, vel[i, 1] - w * rx])
    a = np.array([acc[i, 0] - w * w * rx, acc[i, 1] - w * w * rz])
    return pos, v, a


@njit(cache=True)
def point_jacobian(anc, kind, pivot, org, vel, i, pos, v, q, qd):
    """3 x eta Jacobian (x, z, pitch rows) of a point and its time derivative.

    Planar-joint translations are world-aligned, so they do not swing with
    rotations above them and are removed from the lever arm of those columns.
    """
    eta = kind.shape[0]
    J = np.zeros((3, eta))
    Jd = np.zeros((3, eta))
    for k in range(eta):
        if not anc[i, k]:
            continue
        kk = kind[k]
        if kk == TRANS_X:
            J[0, k] = 1.0
        elif kk == TRANS_Z:
            J[1, k] = 1.0
        else:
            o = pivot[k]
            rx = pos[0] - org[o, 0]
            rz = pos[1] - org[o, 1]
            vx = v[0] - vel[o, 0]
            vz = v[1] - vel[o, 1]
            for t in range(eta):
                if anc[i, t] and not anc[o, t]:
                    if kind[t] == TRANS_X:
                        rx -= q[t]
                        vx -= qd[t]
                    elif kind[t] == TRANS_Z:
                        rz -= q[t]
                        vz -= qd[t]
            J[0, k] = rz
            J[1, k] = -rx
            J[2, k] = 1.0
            Jd[0, k] = vz
            Jd[1, k] = -vx
    return J, Jd


@njit(cache=True)
def dynamics(parent, jtype, cstart, attach, com, mass, inertia, anc, kind, pivot,
             gravity, q, qd):
    """Inertia matrix D(q) and bias vector H(q, qd) = C(q, qd) qd + G(q)."""
    eta = q.shape[0]
    org, th, vel, om, acc = kinematics(parent, jtype, cstart, attach, q, qd)
    D = np.zeros((eta, eta))
    H = np.zeros(eta)
    for i in range(parent.shape[0]):
        pos, v, a = point_state(org, th, vel, om, acc, i, com[i, 0], com[i, 1])
        J, _ = point_jacobian(anc, kind, pivot, org, vel, i, pos, v, q, qd)
        m = mass[i]
        fx = m * a[0]
        fz = m * (a[1] + gravity)
        for r in range(eta):
            if not anc[i, r]:
                continue
            H[r] += J[0, r] * fx + J[1, r] * fz
            for c in range(r, eta):
                if not anc[i, c]:
                    continue
                val = m * (J[0, r] * J[0, c] + J[1, r] * J[1, c]) + inertia[i] * J[2, r] * J[2, c]
                D[r, c] += val
                if c != r:
                    D[c, r] += val
    return D, H


@njit(cache=True)
def constraint_rows(parent, jtype, cstart, attach, anc, kind, pivot, q, qd,
                    c_link, c_pt, c_mask, lock_idx):
    """Stacked holonomic Jacobian, velocity-product term and positions.

    Coordinate locks come first, then point constraints in declaration order
    with their selected (x, z, pitch) rows.
    """
    eta = q.shape[0]
    nrow = lock_idx.shape[0]
    for j in range(c_link.shape[0]):
        for r in range(3):
            if c_mask[j, r]:
                nrow += 1
    J = np.zeros((nrow, eta))
    Jdq = np.zeros(nrow)
    pos_out = np.zeros(nrow)
    row = 0
    for j in range(lock_idx.shape[0]):
        J[row, lock_idx[j]] = 1.0
        pos_out[row] = q[lock_idx[j]]
        row += 1
    if c_link.shape[0] > 0:
        org, th, vel, om, acc = kinematics(parent, jtype, cstart, attach, q, qd)
        for j in range(c_link.shape[0]):
            i = c_link[j]
            pos, v, a = point_state(org, th, vel, om, acc, i, c_pt[j, 0], c_pt[j, 1])
            Jp, _ = point_jacobian(anc, kind, pivot, org, vel, i, pos, v, q, qd)
            for r in range(3):
                if not c_mask[j, r]:
                    continue
                for k in range(eta):
                    J[row, k] = Jp[r, k]
                if r < 2:
                    Jdq[row] = a[r]
                    pos_out[row] = pos[r]
                else:
                    pos_out[row] = th[i]
                row += 1
    return J, Jdq, pos_out


@njit(cache=True)
def kkt_solve(D, J, rhs_top, rhs_bot):
    """Solve [[D, J^T], [J, 0]] [x; y] = [rhs_top; rhs_bot]."""
    eta = D.shape[0]
    m = J.shape[0]
    K = np.zeros((eta + m, eta + m))
    K[:eta, :eta] = D
    K[:eta, eta:] = J.T
    K[eta:, :eta] = J
    rhs = np.zeros(eta + m)
    rhs[:eta] = rhs_top
    rhs[eta:] = rhs_bot
    sol = np.linalg.solve(K, rhs)
    return sol[:eta], sol[eta:]


@njit(cache=True)
def constrained_accel(parent, jtype, cstart, attach, com, mass, inertia, anc, kind,
                      pivot, gravity, q, qd, gen_force, c_link, c_pt, c_mask, lock_idx,
                      c_ref, baum_a, baum_b):
    """Joint accelerations and constraint wrenches of the constrained dynamics.

    ``gen_force`` is the applied generalized force (B u plus any external
    projected force). The returned multipliers follow D qdd + H = f + J^T lam.
    """
    D, H = dynamics(parent, jtype, cstart, attach, com, mass, inertia, anc, kind,
                    pivot, gravity, q, qd)
    J, Jdq, cpos = constraint_rows(parent, jtype, cstart, attach, anc, kind, pivot,
                                   q, qd, c_link, c_pt, c_mask, lock_idx)
    bot = -Jdq
    if baum_a != 0.0 or baum_b != 0.0:
        bot = bot - baum_a * (J @ qd) - baum_b * (cpos - c_ref)
    qdd, neg_lam = kkt_solve(D, J, gen_force - H, bot)
    return qdd, -neg_lam


@njit(cache=True)
def rk4(parent, jtype, cstart, attach, com, mass, inertia, anc, kind, pivot, gravity,
        c_link, c_pt, c_mask, lock_idx, c_ref, baum_a, baum_b, q, qd, gen_force, h):
    """One RK4 step of the constrained dynamics with constant applied force."""
    a1, _ = constrained_accel(parent, jtype, cstart, attach, com, mass, inertia, anc, kind,
                              pivot, gravity, q, qd, gen_force, c_link, c_pt, c_mask,
                              lock_idx, c_ref, baum_a, baum_b)
    q2 = q + 0.5 * h * qd
    v2 = qd + 0.5 * h * a1
    a2, _ = constrained_accel(parent, jtype, cstart, attach, com, mass, inertia, anc, kind,
                              pivot, gravity, q2, v2, gen_force, c_link, c_pt, c_mask,
                              lock_idx, c_ref, baum_a, baum_b)
    q3 = q + 0.5 * h * v2
    v3 = qd + 0.5 * h * a2
    a3, _ = constrained_accel(parent, jtype, cstart, attach, com, mass, inertia, anc, kind,
                              pivot, gravity, q3, v3, gen_force, c_link, c_pt, c_mask,
                              lock_idx, c_ref, baum_a, baum_b)
    q4 = q + h * v3
    v4 = qd + h * a3
    a4, _ = constrained_accel(parent, jtype, cstart, attach, com, mass, inertia, anc, kind,
                              pivot, gravity, q4, v4, gen_force, c_link, c_pt, c_mask,
                              lock_idx, c_ref, baum_a, baum_b)
    qn = q + h / 6.0 * (qd + 2.0 * v2 + 2.0 * v3 + v4)
    vn = qd + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return qn, vn


@njit(cache=True)
def site_height(parent, jtype, cstart, attach, q, qd, link, px, pz):
    """World height and vertical velocity of a point."""
    org, th, vel, om, acc = kinematics(parent, jtype, cstart, attach, q, qd)
    pos, v, a = point_state(org, th, vel, om, acc, link, px, pz)
    return pos[1], v[1]


@njit(cache=True)
def rk4_run(parent, jtype, cstart, attach, com, mass, inertia, anc, kind, pivot, gravity,
            c_link, c_pt, c_mask, lock_idx, c_ref, baum_a, baum_b, q, qd, gen_force, h,
            nsub, g_link, g_px, g_pz, g_on):
    """Up to ``nsub`` RK4 steps; stops before a step that ends below ground.

    Returns (q, qd, steps_taken, flag) with flag 0 = done, 1 = guard crossed
    during the next step (state is the one before it), 2 = non-finite state.
    """
    h_old = 1.0
    if g_on:
        h_old, _ = site_height(parent, jtype, cstart, attach, q, qd, g_link, g_px, g_pz)
    for k in range(nsub):
        qn, vn = rk4(parent, jtype, cstart, attach, com, mass, inertia, anc, kind, pivot,
                     gravity, c_link, c_pt, c_mask, lock_idx, c_ref, baum_a, baum_b, q, qd,
                     gen_force, h)
        if not (np.all(np.isfinite(qn)) and np.all(np.isfinite(vn))):
            return q, qd, k, 2
        if g_on:
            h_new, vz = site_height(parent, jtype, cstart, attach, qn, vn, g_link, g_px, g_pz)
            if h_new <= 0.0 and h_old > 0.0 and vz < 0.0:
                return q, qd, k, 1
            h_old = h_new
        q = qn
        qd = vn
    return q, qd, nsub, 0
