# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled physics core. Contract mirrors ``_core_py``."""

import numpy as np
from libc.math cimport sqrt, sin, cos, fabs, isfinite, hypot

cdef enum:
    NB = 13
    NV = 18


cdef struct Model:
    double* mass       # (13,)
    double* com        # (13, 3)
    double* inertia    # (13, 3, 3)
    double* joff       # (12, 3)
    double* jaxis      # (12, 3)
    double* arm        # (12,)
    double* foot       # (4, 3)
    double* mu         # (4,)
    double* p          # params


cdef struct Kin:
    double R[NB][9]
    double o[NB][3]
    double axes[12][3]
    double feet[4][3]


cdef Model _unpack(pm, list keep):
    cdef Model m
    cdef double[::1] a
    names = ("body_mass", "body_com", "body_inertia", "joint_offset", "joint_axis",
             "armature", "foot_offset", "mu", "params")
    for name in names:
        arr = np.ascontiguousarray(getattr(pm, name), dtype=np.float64).reshape(-1)
        keep.append(arr)
    a = keep[0]; m.mass = &a[0]
    a = keep[1]; m.com = &a[0]
    a = keep[2]; m.inertia = &a[0]
    a = keep[3]; m.joff = &a[0]
    a = keep[4]; m.jaxis = &a[0]
    a = keep[5]; m.arm = &a[0]
    a = keep[6]; m.foot = &a[0]
    a = keep[7]; m.mu = &a[0]
    a = keep[8]; m.p = &a[0]
    return m


# --- small linear algebra -----------------------------------------------------

cdef inline void cross(const double* a, const double* b, double* out) noexcept nogil:
    cdef double x = a[1] * b[2] - a[2] * b[1]
    cdef double y = a[2] * b[0] - a[0] * b[2]
    cdef double z = a[0] * b[1] - a[1] * b[0]
    out[0] = x
    out[1] = y
    out[2] = z


cdef inline void matvec(const double* A, const double* x, double* y) noexcept nogil:
    cdef double x0 = x[0], x1 = x[1], x2 = x[2]
    y[0] = A[0] * x0 + A[1] * x1 + A[2] * x2
    y[1] = A[3] * x0 + A[4] * x1 + A[5] * x2
    y[2] = A[6] * x0 + A[7] * x1 + A[8] * x2


cdef inline void matmul(const double* A, const double* B, double* C) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            C[3 * i + j] = A[3 * i] * B[j] + A[3 * i + 1] * B[3 + j] + A[3 * i + 2] * B[6 + j]


cdef inline void axis_rot(const double* a, double ang, double* R) noexcept nogil:
    cdef double x = a[0], y = a[1], z = a[2]
    cdef double c = cos(ang), s = sin(ang)
    cdef double C = 1.0 - c
    R[0] = c + x * x * C
    R[1] = x * y * C - z * s
    R[2] = x * z * C + y * s
    R[3] = y * x * C + z * s
    R[4] = c + y * y * C
    R[5] = y * z * C - x * s
    R[6] = z * x * C - y * s
    R[7] = z * y * C + x * s
    R[8] = c + z * z * C


cdef inline void quat_to_rot(const double* q, double* R) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    R[0] = 1 - 2 * (y * y + z * z)
    R[1] = 2 * (x * y - w * z)
    R[2] = 2 * (x * z + w * y)
    R[3] = 2 * (x * y + w * z)
    R[4] = 1 - 2 * (x * x + z * z)
    R[5] = 2 * (y * z - w * x)
    R[6] = 2 * (x * z - w * y)
    R[7] = 2 * (y * z + w * x)
    R[8] = 1 - 2 * (x * x + y * y)


cdef int cholesky_solve(double* A, double* b, int lo) noexcept nogil:
    """Solve A x = b over indices [lo, NV) in place (A overwritten). 0 on success."""
    cdef int i, j, k
    cdef double s
    for j in range(lo, NV):
        s = A[j * NV + j]
        for k in range(lo, j):
            s -= A[j * NV + k] * A[j * NV + k]
        if not (s > 0.0):
            return 1
        s = sqrt(s)
        A[j * NV + j] = s
        for i in range(j + 1, NV):
            for k in range(lo, j):
                A[i * NV + j] -= A[i * NV + k] * A[j * NV + k]
            A[i * NV + j] /= s
    for i in range(lo, NV):
        s = b[i]
        for k in range(lo, i):
            s -= A[i * NV + k] * b[k]
        b[i] = s / A[i * NV + i]
    for i in range(NV - 1, lo - 1, -1):
        s = b[i]
        for k in range(i + 1, NV):
            s -= A[k * NV + i] * b[k]
        b[i] = s / A[i * NV + i]
    for i in range(lo):
        b[i] = 0.0
    return 0


# --- kinematics and dynamics -----------------------------------------------------

cdef void c_kinematics(Model* m, const double* q, Kin* k) noexcept nogil:
    cdef int leg, j, b, parent, a
    cdef double tmp[9]
    cdef double v[3]
    quat_to_rot(&q[3], k.R[0])
    for a in range(3):
        k.o[0][a] = q[a]
    for leg in range(4):
        parent = 0
        for j in range(3 * leg, 3 * leg + 3):
            b = 1 + j
            matvec(k.R[parent], &m.joff[3 * j], v)
            for a in range(3):
                k.o[b][a] = k.o[parent][a] + v[a]
            matvec(k.R[parent], &m.jaxis[3 * j], k.axes[j])
            axis_rot(&m.jaxis[3 * j], q[7 + j], tmp)
            matmul(k.R[parent], tmp, k.R[b])
            parent = b
        matvec(k.R[parent], &m.foot[3 * leg], v)
        for a in range(3):
            k.feet[leg][a] = k.o[parent][a] + v[a]


cdef int jac_cols(int b, int* cols) noexcept nogil:
    """Indices of the non-zero Jacobian columns of body b."""
    cdef int n = 6, i, j, leg
    for i in range(6):
        cols[i] = i
    if b > 0:
        j = b - 1
        leg = j // 3
        for i in range(3 * leg, j + 1):
            cols[n] = 6 + i
            n += 1
    return n


cdef void point_jac(Kin* k, int b, const double* x, double* J, int* cols, int* ncols) noexcept nogil:
    """Compact 3 x ncols linear Jacobian (column-major in J[3*c + row])."""
    cdef int n = jac_cols(b, cols)
    cdef int c, jj
    cdef double r[3]
    cdef double t[3]
    for c in range(3 * n):
        J[c] = 0.0
    J[0] = 1.0
    J[4] = 1.0
    J[8] = 1.0
    r[0] = x[0] - k.o[0][0]
    r[1] = x[1] - k.o[0][1]
    r[2] = x[2] - k.o[0][2]
    # columns of -skew(r): w_x -> (0, -r_z, r_y), etc.
    J[9] = 0.0
    J[10] = -r[2]
    J[11] = r[1]
    J[12] = r[2]
    J[13] = 0.0
    J[14] = -r[0]
    J[15] = -r[1]
    J[16] = r[0]
    J[17] = 0.0
    for c in range(6, n):
        jj = cols[c] - 6
        r[0] = x[0] - k.o[1 + jj][0]
        r[1] = x[1] - k.o[1 + jj][1]
        r[2] = x[2] - k.o[1 + jj][2]
        cross(k.axes[jj], r, t)
        J[3 * c] = t[0]
        J[3 * c + 1] = t[1]
        J[3 * c + 2] = t[2]
    ncols[0] = n


cdef void ang_jac(Kin* k, int b, double* J, int n, int* cols) noexcept nogil:
    cdef int c, jj
    for c in range(3 * n):
        J[c] = 0.0
    J[9] = 1.0
    J[13] = 1.0
    J[17] = 1.0
    for c in range(6, n):
        jj = cols[c] - 6
        J[3 * c] = k.axes[jj][0]
        J[3 * c + 1] = k.axes[jj][1]
        J[3 * c + 2] = k.axes[jj][2]


cdef void c_dyn_terms(Model* m, Kin* k, const double* u, double* M, double* h) noexcept nogil:
    cdef double w[NB][3]
    cdef double alpha[NB][3]
    cdef double ao[NB][3]
    cdef double Jv[27]
    cdef double Jw[27]
    cdef double IJ[27]
    cdef double Iw[9]
    cdef double tmp[9]
    cdef double Rt[9]
    cdef int cols[9]
    cdef int n, b, j, p, a, ci, cj, r
    cdef double mass, s
    cdef double c[3]
    cdef double rc[3]
    cdef double t1[3]
    cdef double t2[3]
    cdef double fl[3]
    cdef double fa[3]
    cdef double wa[3]
    cdef double g = m.p[9]
    for a in range(NV * NV):
        M[a] = 0.0
    for a in range(NV):
        h[a] = 0.0
    for a in range(3):
        w[0][a] = u[3 + a]
        alpha[0][a] = 0.0
        ao[0][a] = 0.0
    for b in range(NB):
        if b > 0:
            j = b - 1
            p = 0 if j % 3 == 0 else b - 1
            for a in range(3):
                rc[a] = k.o[b][a] - k.o[p][a]
            cross(alpha[p], rc, t1)
            cross(w[p], rc, t2)
            cross(w[p], t2, rc)
            for a in range(3):
                ao[b][a] = ao[p][a] + t1[a] + rc[a]
                wa[a] = k.axes[j][a] * u[6 + j]
                w[b][a] = w[p][a] + wa[a]
            cross(w[p], wa, t1)
            for a in range(3):
                alpha[b][a] = alpha[p][a] + t1[a]
        mass = m.mass[b]
        matvec(k.R[b], &m.com[3 * b], rc)
        for a in range(3):
            c[a] = k.o[b][a] + rc[a]
        # Iw = R I R^T
        matmul(k.R[b], &m.inertia[9 * b], tmp)
        for r in range(3):
            for a in range(3):
                Rt[3 * r + a] = k.R[b][3 * a + r]
        matmul(tmp, Rt, Iw)
        point_jac(k, b, c, Jv, cols, &n)
        ang_jac(k, b, Jw, n, cols)
        for ci in range(n):
            matvec(Iw, &Jw[3 * ci], &IJ[3 * ci])
        for ci in range(n):
            for cj in range(ci, n):
                s = mass * (Jv[3 * ci] * Jv[3 * cj] + Jv[3 * ci + 1] * Jv[3 * cj + 1]
                            + Jv[3 * ci + 2] * Jv[3 * cj + 2])
                s += Jw[3 * ci] * IJ[3 * cj] + Jw[3 * ci + 1] * IJ[3 * cj + 1] + Jw[3 * ci + 2] * IJ[3 * cj + 2]
                M[cols[ci] * NV + cols[cj]] += s
                if cj != ci:
                    M[cols[cj] * NV + cols[ci]] += s
        # bias: COM acceleration and angular terms
        cross(alpha[b], rc, t1)
        cross(w[b], rc, t2)
        cross(w[b], t2, fl)
        for a in range(3):
            fl[a] = mass * (ao[b][a] + t1[a] + fl[a])
        fl[2] += mass * g
        matvec(Iw, w[b], t1)
        cross(w[b], t1, t2)
        matvec(Iw, alpha[b], fa)
        for a in range(3):
            fa[a] += t2[a]
        for ci in range(n):
            h[cols[ci]] += (Jv[3 * ci] * fl[0] + Jv[3 * ci + 1] * fl[1] + Jv[3 * ci + 2] * fl[2]
                            + Jw[3 * ci] * fa[0] + Jw[3 * ci + 1] * fa[1] + Jw[3 * ci + 2] * fa[2])
    for a in range(12):
        M[(6 + a) * NV + 6 + a] += m.arm[a]


cdef void c_drift(const double* q, const double* u, double hstep, int fixed, double* out) noexcept nogil:
    cdef int a
    cdef double n, half, s, nq
    cdef double dq[4]
    cdef double qt[4]
    if fixed:
        for a in range(7):
            out[a] = q[a]
    else:
        for a in range(3):
            out[a] = q[a] + hstep * u[a]
        n = sqrt(u[3] * u[3] + u[4] * u[4] + u[5] * u[5])
        if n > 0.0:
            half = 0.5 * n * hstep
            s = sin(half) / n
            dq[0] = cos(half)
            dq[1] = s * u[3]
            dq[2] = s * u[4]
            dq[3] = s * u[5]
            qt[0] = dq[0] * q[3] - dq[1] * q[4] - dq[2] * q[5] - dq[3] * q[6]
            qt[1] = dq[0] * q[4] + dq[1] * q[3] + dq[2] * q[6] - dq[3] * q[5]
            qt[2] = dq[0] * q[5] - dq[1] * q[6] + dq[2] * q[3] + dq[3] * q[4]
            qt[3] = dq[0] * q[6] + dq[1] * q[5] - dq[2] * q[4] + dq[3] * q[3]
        else:
            for a in range(4):
                qt[a] = q[3 + a]
        nq = sqrt(qt[0] * qt[0] + qt[1] * qt[1] + qt[2] * qt[2] + qt[3] * qt[3])
        for a in range(4):
            out[3 + a] = qt[a] / nq
    for a in range(12):
        out[7 + a] = q[7 + a] + hstep * u[6 + a]


cdef void c_actuator(const double* p, const double* qdes, const double* qj, const double* qdj,
                     double* tau) noexcept nogil:
    cdef int j
    cdef double t, s, f
    cdef double mode = p[3]
    for j in range(12):
        if mode < 0:
            tau[j] = 0.0
            continue
        t = p[0] * (qdes[j] - qj[j]) - p[1] * qdj[j]
        if t > p[2]:
            t = p[2]
        elif t < -p[2]:
            t = -p[2]
        if mode > 0:
            s = fabs(qdj[j])
            if s > p[4]:
                f = 1.0 - p[5] * (s - p[4]) / p[4]
                if f < 0.0:
                    f = 0.0
                elif f > 1.0:
                    f = 1.0
                t = t * f
        tau[j] = t


# --- Python entry points -------------------------------------------------------------

def kinematics(pm, double[::1] q):
    keep = []
    cdef Model m = _unpack(pm, keep)
    cdef Kin k
    c_kinematics(&m, &q[0], &k)
    o = np.empty((NB, 3))
    R = np.empty((NB, 3, 3))
    axes = np.empty((12, 3))
    feet = np.empty((4, 3))
    cdef int b, a
    for b in range(NB):
        for a in range(3):
            o[b, a] = k.o[b][a]
        for a in range(9):
            R[b, a // 3, a % 3] = k.R[b][a]
    for b in range(12):
        for a in range(3):
            axes[b, a] = k.axes[b][a]
    for b in range(4):
        for a in range(3):
            feet[b, a] = k.feet[b][a]
    return o, R, axes, feet


def dynamics_terms(pm, double[::1] q, double[::1] u):
    keep = []
    cdef Model m = _unpack(pm, keep)
    cdef Kin k
    M = np.empty((NV, NV))
    h = np.empty(NV)
    cdef double[:, ::1] Mv = M
    cdef double[::1] hv = h
    c_kinematics(&m, &q[0], &k)
    c_dyn_terms(&m, &k, &u[0], &Mv[0, 0], &hv[0])
    return M, h


def forward_dynamics(pm, double[::1] q, double[::1] u, double[::1] tau, bint fixed_base):
    keep = []
    cdef Model m = _unpack(pm, keep)
    cdef Kin k
    cdef double M[NV * NV]
    cdef double h[NV]
    cdef double b[NV]
    cdef int a
    c_kinematics(&m, &q[0], &k)
    c_dyn_terms(&m, &k, &u[0], M, h)
    for a in range(NV):
        b[a] = tau[a] - h[a]
    if cholesky_solve(M, b, 6 if fixed_base else 0):
        raise np.linalg.LinAlgError("mass matrix is not positive definite")
    out = np.empty(NV)
    for a in range(NV):
        out[a] = b[a]
    return out


cdef int _simulate(Model* m, double* q, double* u, const double* qdes, const double* fext,
                   int nsub, int fixed, double* contact, double* fn, double* ft,
                   double* vfoot, double* tau_out) noexcept nogil:
    cdef double* p = m.p
    cdef double dt = p[11]
    cdef double kc = p[6], dc = p[7], kt = p[8], rad = p[10]
    cdef int lo = 6 if fixed else 0
    cdef Kin k
    cdef double qm[19]
    cdef double qn[19]
    cdef double M[NV * NV]
    cdef double A[NV * NV]
    cdef double h[NV]
    cdef double rhs[NV]
    cdef double b[NV]
    cdef double up[NV]
    cdef double tau[12]
    cdef double Jf[4][27]
    cdef int colsf[4][9]
    cdef int ncf[4]
    cdef double depth[4]
    cdef int active[4]
    cdef double v[3]
    cdef double Bd[3]
    cdef int s, a, c1, c2, leg, r, n
    cdef double acc, fnl, tx, ty, tn, lim
    Bd[0] = kt
    Bd[1] = kt
    Bd[2] = dc
    for s in range(nsub):
        c_drift(q, u, 0.5 * dt, fixed, qm)
        c_kinematics(m, qm, &k)
        c_dyn_terms(m, &k, u, M, h)
        c_actuator(p, &qdes[12 * s], &qm[7], &u[6], tau)
        for a in range(NV):
            rhs[a] = -h[a]
        for a in range(12):
            rhs[6 + a] += tau[a]
        for a in range(3):
            rhs[a] += fext[3 * s + a]
        # implicit predictor
        for a in range(NV * NV):
            A[a] = M[a]
        for a in range(NV):
            acc = 0.0
            for r in range(NV):
                acc += M[a * NV + r] * u[r]
            b[a] = acc + dt * rhs[a]
        for leg in range(4):
            depth[leg] = rad - k.feet[leg][2]
            active[leg] = depth[leg] > 0.0
            point_jac(&k, 3 + 3 * leg, k.feet[leg], Jf[leg], colsf[leg], &ncf[leg])
            if not active[leg]:
                continue
            n = ncf[leg]
            for c1 in range(n):
                for c2 in range(n):
                    acc = 0.0
                    for r in range(3):
                        acc += Jf[leg][3 * c1 + r] * Bd[r] * Jf[leg][3 * c2 + r]
                    A[colsf[leg][c1] * NV + colsf[leg][c2]] += dt * acc
                b[colsf[leg][c1]] += dt * Jf[leg][3 * c1 + 2] * kc * depth[leg]
        for leg in range(4):
            contact[leg] = 0.0
            fn[leg] = 0.0
            for a in range(3):
                ft[3 * leg + a] = 0.0
        if active[0] or active[1] or active[2] or active[3]:
            if cholesky_solve(A, b, lo):
                return 1
            for a in range(NV):
                up[a] = b[a]
            for leg in range(4):
                if not active[leg]:
                    continue
                n = ncf[leg]
                for r in range(3):
                    acc = 0.0
                    for c1 in range(n):
                        acc += Jf[leg][3 * c1 + r] * up[colsf[leg][c1]]
                    v[r] = acc
                fnl = kc * depth[leg] - dc * v[2]
                if fnl < 0.0:
                    fnl = 0.0
                tx = -kt * v[0]
                ty = -kt * v[1]
                tn = hypot(tx, ty)
                lim = m.mu[leg] * fnl
                if tn > lim:
                    if tn > 0.0:
                        tx = tx * (lim / tn)
                        ty = ty * (lim / tn)
                    else:
                        tx = 0.0
                        ty = 0.0
                contact[leg] = 1.0
                fn[leg] = fnl
                ft[3 * leg] = tx
                ft[3 * leg + 1] = ty
                for c1 in range(n):
                    rhs[colsf[leg][c1]] += (Jf[leg][3 * c1] * tx + Jf[leg][3 * c1 + 1] * ty
                                            + Jf[leg][3 * c1 + 2] * fnl)
        for a in range(NV * NV):
            A[a] = M[a]
        for a in range(NV):
            b[a] = rhs[a]
        if cholesky_solve(A, b, lo):
            return 1
        for a in range(NV):
            up[a] = u[a] + dt * b[a]
        if fixed:
            for a in range(6):
                up[a] = 0.0
        c_drift(qm, up, 0.5 * dt, fixed, qn)
        for a in range(19):
            if not isfinite(qn[a]):
                return 1
        for a in range(NV):
            if not isfinite(up[a]):
                return 1
        for a in range(19):
            q[a] = qn[a]
        for a in range(NV):
            u[a] = up[a]
        for a in range(12):
            tau_out[a] = tau[a]
        for leg in range(4):
            n = ncf[leg]
            for r in range(3):
                acc = 0.0
                for c1 in range(n):
                    acc += Jf[leg][3 * c1 + r] * u[colsf[leg][c1]]
                vfoot[3 * leg + r] = acc
    return 0


def simulate(pm, double[::1] q, double[::1] u, double[:, ::1] qdes, double[:, ::1] fext,
             bint fixed_base, double[::1] contact, double[::1] fn, double[:, ::1] ft,
             double[:, ::1] vfoot, double[::1] tau_out):
    keep = []
    cdef Model m = _unpack(pm, keep)
    cdef int status
    with nogil:
        status = _simulate(&m, &q[0], &u[0], &qdes[0, 0], &fext[0, 0], qdes.shape[0],
                           fixed_base, &contact[0], &fn[0], &ft[0, 0], &vfoot[0, 0], &tau_out[0])
    return status
