"""Pure-Python physics core.

Same contract as the compiled ``_core`` extension; selected when the
extension is missing or ``PAL_LOCO_BACKEND=python``.

Generalized velocities are ``u = [v_B (world), w_B (world), qdot (12)]``.
Equations of motion are assembled as projected Newton-Euler
(``M = sum J^T diag(m, I) J``), which holds for these quasi-velocities.

Parameter vector layout (``params``):
    0 kp, 1 kd, 2 tau_max, 3 actuator mode (-1 passive, 0 ideal PD,
    1 nonlinear), 4 knee speed, 5 derating slope, 6 k_contact,
    7 d_contact, 8 k_tangent, 9 gravity, 10 foot radius, 11 dt_sim
"""

import math

import numpy as np

NB = 13
NV = 18
NQ = 19


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def axis_rot(axis, angle):
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def quat_to_rot(qt):
    w, x, y, z = qt
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def drift(q, u, h, fixed_base):
    """Advance positions by ``h`` at constant velocity ``u``."""
    out = q.copy()
    if not fixed_base:
        out[0:3] = q[0:3] + h * u[0:3]
        w = u[3:6]
        n = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
        if n > 0.0:
            half = 0.5 * n * h
            s = math.sin(half) / n
            dq = np.array([math.cos(half), s * w[0], s * w[1], s * w[2]])
            qt = quat_mul(dq, q[3:7])
        else:
            qt = q[3:7]
        out[3:7] = qt / math.sqrt(qt @ qt)
    out[7:] = q[7:] + h * u[6:]
    return out


def kinematics(pm, q):
    """Body frame origins (joint points), rotations, world joint axes, feet."""
    R = np.empty((NB, 3, 3))
    o = np.empty((NB, 3))
    axes = np.empty((12, 3))
    feet = np.empty((4, 3))
    R[0] = quat_to_rot(q[3:7])
    o[0] = q[0:3]
    for leg in range(4):
        parent = 0
        for k in range(3):
            j = 3 * leg + k
            b = 1 + j
            o[b] = o[parent] + R[parent] @ pm.joint_offset[j]
            axes[j] = R[parent] @ pm.joint_axis[j]
            R[b] = R[parent] @ axis_rot(pm.joint_axis[j], q[7 + j])
            parent = b
        feet[leg] = o[parent] + R[parent] @ pm.foot_offset[leg]
    return o, R, axes, feet


def point_jacobian(o, axes, b, x):
    """Linear velocity Jacobian (3 x 18) of world point ``x`` fixed on body ``b``."""
    J = np.zeros((3, NV))
    J[:, 0:3] = np.eye(3)
    J[:, 3:6] = -skew(x - o[0])
    if b > 0:
        j = b - 1
        leg = j // 3
        for jj in range(3 * leg, j + 1):
            J[:, 6 + jj] = np.cross(axes[jj], x - o[1 + jj])
    return J


def angular_jacobian(axes, b):
    J = np.zeros((3, NV))
    J[:, 3:6] = np.eye(3)
    if b > 0:
        j = b - 1
        leg = j // 3
        for jj in range(3 * leg, j + 1):
            J[:, 6 + jj] = axes[jj]
    return J


def dynamics_terms(pm, q, u, kin=None):
    """Mass matrix (with armature) and bias force (Coriolis + gravity)."""
    o, R, axes, _ = kin if kin is not None else kinematics(pm, q)
    g = np.array([0.0, 0.0, -pm.params[9]])
    M = np.zeros((NV, NV))
    h = np.zeros(NV)
    w = np.empty((NB, 3))
    alpha = np.empty((NB, 3))
    a_o = np.empty((NB, 3))
    w[0] = u[3:6]
    alpha[0] = 0.0
    a_o[0] = 0.0
    for b in range(NB):
        if b > 0:
            j = b - 1
            p = 0 if j % 3 == 0 else b - 1
            r = o[b] - o[p]
            a_o[b] = a_o[p] + np.cross(alpha[p], r) + np.cross(w[p], np.cross(w[p], r))
            wa = axes[j] * u[6 + j]
            w[b] = w[p] + wa
            alpha[b] = alpha[p] + np.cross(w[p], wa)
        m = pm.body_mass[b]
        c = o[b] + R[b] @ pm.body_com[b]
        Iw = R[b] @ pm.body_inertia[b] @ R[b].T
        Jv = point_jacobian(o, axes, b, c)
        Jw = angular_jacobian(axes, b)
        M += m * Jv.T @ Jv + Jw.T @ Iw @ Jw
        rc = c - o[b]
        a_c = a_o[b] + np.cross(alpha[b], rc) + np.cross(w[b], np.cross(w[b], rc))
        h += Jv.T @ (m * (a_c - g)) + Jw.T @ (Iw @ alpha[b] + np.cross(w[b], Iw @ w[b]))
    M[6:, 6:] += np.diag(pm.armature)
    return M, h


def forward_dynamics(pm, q, u, tau, fixed_base):
    M, h = dynamics_terms(pm, q, u)
    rhs = np.asarray(tau, dtype=float) - h
    acc = np.zeros(NV)
    if fixed_base:
        acc[6:] = np.linalg.solve(M[6:, 6:], rhs[6:])
    else:
        acc[:] = np.linalg.solve(M, rhs)
    return acc


def actuator_torque(params, qdes, qj, qdj):
    mode = params[3]
    if mode < 0:
        return np.zeros(12)
    kp, kd, tmax = params[0], params[1], params[2]
    tau = np.clip(kp * (qdes - qj) - kd * qdj, -tmax, tmax)
    if mode > 0:
        knee, slope = params[4], params[5]
        s = np.abs(qdj)
        factor = np.where(s > knee, np.clip(1.0 - slope * (s - knee) / knee, 0.0, 1.0), 1.0)
        tau = tau * factor
    return tau


def _solve(A, b, fixed_base):
    if fixed_base:
        out = np.zeros(NV)
        out[6:] = np.linalg.solve(A[6:, 6:], b[6:])
        return out
    return np.linalg.solve(A, b)


def simulate(pm, q, u, qdes, fext, fixed_base, contact, fn, ft, vfoot, tau_out):
    """Run ``len(qdes)`` substeps in place. Returns 0, or 1 on a non-finite state.

    Each substep is drift(h/2) - kick(h) - drift(h/2). Contact forces are
    evaluated at velocities predicted by a linearly implicit solve, then
    clamped (normal >= 0, Coulomb cone) and applied explicitly.
    """
    p = pm.params
    dt = p[11]
    kc, dc, kt, rad = p[6], p[7], p[8], p[10]
    fb = bool(fixed_base)
    for s in range(qdes.shape[0]):
        qm = drift(q, u, 0.5 * dt, fb)
        kin = kinematics(pm, qm)
        o, R, axes, feet = kin
        M, h = dynamics_terms(pm, qm, u, kin)
        tau = actuator_torque(p, qdes[s], qm[7:], u[6:])
        Q = np.zeros(NV)
        Q[6:] = tau
        Q[0:3] += fext[s]
        rhs = Q - h

        A = M.copy()
        b = M @ u + dt * rhs
        Js = []
        for leg in range(4):
            depth = rad - feet[leg, 2]
            if depth > 0.0:
                J = point_jacobian(o, axes, 3 + 3 * leg, feet[leg])
                Js.append((leg, J, depth))
                B = np.diag([kt, kt, dc])
                A += dt * J.T @ B @ J
                b += dt * J.T @ np.array([0.0, 0.0, kc * depth])
        contact[:] = 0.0
        fn[:] = 0.0
        ft[:] = 0.0
        if Js:
            u_pred = _solve(A, b, fb)
            for leg, J, depth in Js:
                v = J @ u_pred
                n = max(0.0, kc * depth - dc * v[2])
                t = -kt * v[0:2]
                tn = math.hypot(t[0], t[1])
                lim = pm.mu[leg] * n
                if tn > lim:
                    t = t * (lim / tn) if tn > 0.0 else t * 0.0
                contact[leg] = 1.0
                fn[leg] = n
                ft[leg, 0:2] = t
                ft[leg, 2] = 0.0
                rhs = rhs + J.T @ np.array([t[0], t[1], n])
        u_new = u + dt * _solve(M, rhs, fb)
        if fb:
            u_new[0:6] = 0.0
        q_new = drift(qm, u_new, 0.5 * dt, fb)
        if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(u_new))):
            return 1
        q[:] = q_new
        u[:] = u_new
        tau_out[:] = tau
        for leg in range(4):
            J = point_jacobian(o, axes, 3 + 3 * leg, feet[leg])
            vfoot[leg] = J @ u
    return 0
