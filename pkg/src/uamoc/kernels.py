"""Compiled numerical core: quaternion/SE(3) ops, kinematics, dynamics, integrators.

Everything here works on packed float64 arrays so the hot loops can be jitted.
State layout: [p(3), q(wxyz 4), q_J(n_j), v_lin(3), v_ang(3), qd_J(n_j)].
Tangent layout: [pose(6 = lin,ang), q_J(n_j), velocity(6 + n_j)].
Twists and pose tangents are body-frame (right convention), linear part first.

Set UAMOC_DISABLE_JIT=1 to run the same code uncompiled (slow, for debugging).
"""

import os
from collections import namedtuple

import numpy as np

from .errors import AngleNearPi

if os.environ.get("UAMOC_DISABLE_JIT") == "1":
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
else:
    from numba import njit

# Geometry and inertia of one robot, packed for the jitted functions.
# joint_rot/joint_pos: fixed transform from parent body frame to the joint
# frame; joint_axis: unit rotation axis in the joint frame; inertia: 6x6
# spatial inertia of each body (index 0 = base) in its own frame; actuation:
# constant map from controls to generalized forces; frame_*: fixed offsets of
# named frames from their parent body (0 = base, i = link i).
ModelArrays = namedtuple(
    "ModelArrays",
    [
        "joint_rot",
        "joint_pos",
        "joint_axis",
        "inertia",
        "actuation",
        "frame_parent",
        "frame_rot",
        "frame_pos",
        "gravity",
    ],
)

# One set of active contacts: frame indices, world anchors, surface rotation
# (surface axes expressed in world), boolean axis masks in surface frame, and
# per-contact Baumgarte gains (velocity, position), zero meaning off.
ContactArrays = namedtuple(
    "ContactArrays",
    ["frame_idx", "anchor", "surf_rot", "axes", "kv", "kp"],
)

SMALL_ANGLE = 1e-8
# wider crossover for Jacobian coefficients whose closed forms cancel near zero
JAC_TAYLOR = 1e-3
DRIFT_FD_STEP = 1e-7

INTEG_EULER = 0
INTEG_RK4 = 1


def empty_contacts():
    return ContactArrays(
        frame_idx=np.zeros(0, dtype=np.int64),
        anchor=np.zeros((0, 3)),
        surf_rot=np.zeros((0, 3, 3)),
        axes=np.zeros((0, 3), dtype=np.bool_),
        kv=np.zeros(0),
        kp=np.zeros(0),
    )


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def _skew(v):
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


@njit(cache=True)
def quat_mul(a, b):
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return out


@njit(cache=True)
def quat_conj(q):
    out = np.empty(4)
    out[0] = q[0]
    out[1] = -q[1]
    out[2] = -q[2]
    out[3] = -q[3]
    return out


@njit(cache=True)
def quat_normalize(q):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    return q / n


@njit(cache=True)
def quat_rotate(q, v):
    # R(q) v, t = 2 q_v x v, out = v + w t + q_v x t
    tx = 2.0 * (q[2] * v[2] - q[3] * v[1])
    ty = 2.0 * (q[3] * v[0] - q[1] * v[2])
    tz = 2.0 * (q[1] * v[1] - q[2] * v[0])
    out = np.empty(3)
    out[0] = v[0] + q[0] * tx + q[2] * tz - q[3] * ty
    out[1] = v[1] + q[0] * ty + q[3] * tx - q[1] * tz
    out[2] = v[2] + q[0] * tz + q[1] * ty - q[2] * tx
    return out


@njit(cache=True)
def quat_to_rot(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    out = np.empty((3, 3))
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - w * z)
    out[0, 2] = 2.0 * (x * z + w * y)
    out[1, 0] = 2.0 * (x * y + w * z)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - w * x)
    out[2, 0] = 2.0 * (x * z - w * y)
    out[2, 1] = 2.0 * (y * z + w * x)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


@njit(cache=True)
def rot_to_quat(R):
    q = np.empty(4)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q[0] = 0.25 * s
        q[1] = (R[2, 1] - R[1, 2]) / s
        q[2] = (R[0, 2] - R[2, 0]) / s
        q[3] = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q[0] = (R[2, 1] - R[1, 2]) / s
        q[1] = 0.25 * s
        q[2] = (R[0, 1] + R[1, 0]) / s
        q[3] = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q[0] = (R[0, 2] - R[2, 0]) / s
        q[1] = (R[0, 1] + R[1, 0]) / s
        q[2] = 0.25 * s
        q[3] = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q[0] = (R[1, 0] - R[0, 1]) / s
        q[1] = (R[0, 2] + R[2, 0]) / s
        q[2] = (R[1, 2] + R[2, 1]) / s
        q[3] = 0.25 * s
    return quat_normalize(q)


@njit(cache=True)
def quat_from_rotvec(r):
    t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    t = np.sqrt(t2)
    q = np.empty(4)
    if t < SMALL_ANGLE:
        q[0] = 1.0 - t2 / 8.0
        k = 0.5 - t2 / 48.0
    else:
        q[0] = np.cos(0.5 * t)
        k = np.sin(0.5 * t) / t
    q[1] = k * r[0]
    q[2] = k * r[1]
    q[3] = k * r[2]
    return quat_normalize(q)


@njit(cache=True)
def quat_to_rotvec(q):
    # principal branch; w is forced non-negative first
    w, x, y, z = q[0], q[1], q[2], q[3]
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    n = np.sqrt(x * x + y * y + z * z)
    t = 2.0 * np.arctan2(n, w)
    if t > np.pi - 1e-6:
        raise AngleNearPi("rotation angle within 1e-6 of pi, log is ill conditioned")
    if t < SMALL_ANGLE:
        k = 2.0 / w * (1.0 - n * n / (3.0 * w * w))
    else:
        k = t / n
    out = np.empty(3)
    out[0] = k * x
    out[1] = k * y
    out[2] = k * z
    return out


@njit(cache=True)
def so3_left_jac(r):
    t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    t = np.sqrt(t2)
    S = _skew(r)
    S2 = S @ S
    out = np.eye(3)
    if t < JAC_TAYLOR:
        out += (0.5 - t2 / 24.0) * S + (1.0 / 6.0 - t2 / 120.0) * S2
    else:
        sh = np.sin(0.5 * t)
        out += (2.0 * sh * sh / t2) * S + ((t - np.sin(t)) / (t2 * t)) * S2
    return out


@njit(cache=True)
def so3_left_jac_inv(r):
    t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    t = np.sqrt(t2)
    S = _skew(r)
    S2 = S @ S
    out = np.eye(3)
    if t < JAC_TAYLOR:
        out += -0.5 * S + (1.0 / 12.0 + t2 / 720.0) * S2
    else:
        c = 1.0 / t2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))
        out += -0.5 * S + c * S2
    return out


@njit(cache=True)
def se3_exp(v):
    # tangent [lin, ang] -> pose; translation through the SO(3) left Jacobian
    q = quat_from_rotvec(v[3:6])
    V = so3_left_jac(v[3:6])
    p = V @ np.ascontiguousarray(v[0:3])
    return q, p


@njit(cache=True)
def se3_log(q, p):
    r = quat_to_rotvec(q)
    Vi = so3_left_jac_inv(r)
    out = np.empty(6)
    out[0:3] = Vi @ p
    out[3:6] = r
    return out


@njit(cache=True)
def pose_mul(qa, pa, qb, pb):
    return quat_normalize(quat_mul(qa, qb)), pa + quat_rotate(qa, pb)


@njit(cache=True)
def pose_inv(q, p):
    qi = quat_conj(q)
    return qi, -quat_rotate(qi, p)


@njit(cache=True)
def pose_ominus(qy, py, qx, px):
    # Log(X^-1 Y)
    qi, pi = pose_inv(qx, px)
    qr, pr = pose_mul(qi, pi, qy, py)
    return se3_log(qr, pr)


@njit(cache=True)
def state_oplus(x, dx, n_j):
    nq = 7 + n_j
    nv = 6 + n_j
    out = np.empty(x.shape[0])
    qe, pe = se3_exp(dx[0:6])
    q = x[3:7]
    out[0:3] = x[0:3] + quat_rotate(q, pe)
    out[3:7] = quat_normalize(quat_mul(q, qe))
    for i in range(n_j):
        out[7 + i] = x[7 + i] + dx[6 + i]
    for i in range(nv):
        out[nq + i] = x[nq + i] + dx[nv + i]
    return out


@njit(cache=True)
def state_ominus(y, x, n_j):
    nq = 7 + n_j
    nv = 6 + n_j
    dx = np.empty(2 * nv)
    dx[0:6] = pose_ominus(y[3:7], y[0:3], x[3:7], x[0:3])
    for i in range(n_j):
        dx[6 + i] = y[7 + i] - x[7 + i]
    for i in range(nv):
        dx[nv + i] = y[nq + i] - x[nq + i]
    return dx


@njit(cache=True)
def state_interpolate(xa, xb, s, n_j):
    return state_oplus(xa, s * state_ominus(xb, xa, n_j), n_j)


@njit(cache=True)
def _axis_angle_rot(a, t):
    c = np.cos(t)
    s = np.sin(t)
    out = np.empty((3, 3))
    ic = 1.0 - c
    out[0, 0] = c + a[0] * a[0] * ic
    out[0, 1] = a[0] * a[1] * ic - a[2] * s
    out[0, 2] = a[0] * a[2] * ic + a[1] * s
    out[1, 0] = a[1] * a[0] * ic + a[2] * s
    out[1, 1] = c + a[1] * a[1] * ic
    out[1, 2] = a[1] * a[2] * ic - a[0] * s
    out[2, 0] = a[2] * a[0] * ic - a[1] * s
    out[2, 1] = a[2] * a[1] * ic + a[0] * s
    out[2, 2] = c + a[2] * a[2] * ic
    return out


@njit(cache=True)
def _joint_rel(m, x, j):
    # pose of body j+1 in body j
    R = m.joint_rot[j] @ _axis_angle_rot(m.joint_axis[j], x[7 + j])
    return R, m.joint_pos[j]


@njit(cache=True)
def fk_links(m, x):
    nj = m.joint_axis.shape[0]
    R = np.empty((nj + 1, 3, 3))
    p = np.empty((nj + 1, 3))
    R[0] = quat_to_rot(x[3:7])
    p[0] = x[0:3]
    for j in range(nj):
        Rr, pr = _joint_rel(m, x, j)
        R[j + 1] = R[j] @ Rr
        p[j + 1] = p[j] + R[j] @ pr
    return R, p


@njit(cache=True)
def link_twists(m, x):
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    v = np.empty((nj + 1, 6))
    for i in range(6):
        v[0, i] = x[nq + i]
    for j in range(nj):
        Rr, pr = _joint_rel(m, x, j)
        vp = v[j, 0:3]
        wp = v[j, 3:6]
        Rt = Rr.T
        v[j + 1, 0:3] = Rt @ (vp - _cross(pr, wp))
        v[j + 1, 3:6] = Rt @ wp + m.joint_axis[j] * x[nq + 6 + j]
    return v


@njit(cache=True)
def frame_placement(m, x, f):
    R, p = fk_links(m, x)
    b = m.frame_parent[f]
    Rf = R[b] @ m.frame_rot[f]
    pf = p[b] + R[b] @ m.frame_pos[f]
    return Rf, pf


@njit(cache=True)
def frame_twist(m, x, f):
    v = link_twists(m, x)
    b = m.frame_parent[f]
    Rr = m.frame_rot[f]
    pr = m.frame_pos[f]
    out = np.empty(6)
    vb = v[b, 0:3]
    wb = v[b, 3:6]
    out[0:3] = Rr.T @ (vb - _cross(pr, wb))
    out[3:6] = Rr.T @ wb
    return out


@njit(cache=True)
def _frame_jac_placed(m, x, f):
    # local-frame jacobian plus the frame's world placement in one pass
    nj = m.joint_axis.shape[0]
    nv = 6 + nj
    R, p = fk_links(m, x)
    b = m.frame_parent[f]
    Rf = R[b] @ m.frame_rot[f]
    pf = p[b] + R[b] @ m.frame_pos[f]
    J = np.zeros((6, nv))
    Rft = Rf.T
    Rr = Rft @ R[0]
    pr = Rft @ (p[0] - pf)
    J[0:3, 0:3] = Rr
    J[0:3, 3:6] = _skew(pr) @ Rr
    J[3:6, 3:6] = Rr
    for j in range(b):
        Rr = Rft @ R[j + 1]
        pr = Rft @ (p[j + 1] - pf)
        ca = Rr @ m.joint_axis[j]
        J[0:3, 6 + j] = _cross(pr, ca)
        J[3:6, 6 + j] = ca
    return J, Rf, pf


@njit(cache=True)
def frame_jacobian_local(m, x, f):
    J, _, _ = _frame_jac_placed(m, x, f)
    return J


@njit(cache=True)
def _adinv(R, p):
    # Ad(X^-1) for X = (R, p): maps parent-frame twists into the child frame
    out = np.zeros((6, 6))
    Rt = R.T
    out[0:3, 0:3] = Rt
    out[3:6, 3:6] = Rt
    out[0:3, 3:6] = -(Rt @ _skew(p))
    return out


@njit(cache=True)
def _wrench_to_parent(R, p, f):
    out = np.empty(6)
    fl = R @ np.ascontiguousarray(f[0:3])
    out[0:3] = fl
    out[3:6] = R @ np.ascontiguousarray(f[3:6]) + _cross(p, fl)
    return out


@njit(cache=True)
def crba(m, x):
    nj = m.joint_axis.shape[0]
    nv = 6 + nj
    Ic = m.inertia.copy()
    Rrel = np.empty((nj, 3, 3))
    for j in range(nj):
        Rr, _ = _joint_rel(m, x, j)
        Rrel[j] = Rr
    for j in range(nj - 1, -1, -1):
        A = _adinv(Rrel[j], m.joint_pos[j])
        Ic[j] += A.T @ (Ic[j + 1] @ A)
    H = np.zeros((nv, nv))
    H[0:6, 0:6] = Ic[0]
    for j in range(nj):
        F = Ic[j + 1][:, 3:6] @ m.joint_axis[j]
        H[6 + j, 6 + j] = F[3] * m.joint_axis[j][0] + F[4] * m.joint_axis[j][1] + F[5] * m.joint_axis[j][2]
        body = j + 1
        while body > 1:
            F = _wrench_to_parent(Rrel[body - 1], m.joint_pos[body - 1], F)
            body -= 1
            i = body - 1
            hij = F[3] * m.joint_axis[i][0] + F[4] * m.joint_axis[i][1] + F[5] * m.joint_axis[i][2]
            H[6 + i, 6 + j] = hij
            H[6 + j, 6 + i] = hij
        F = _wrench_to_parent(Rrel[0], m.joint_pos[0], F)
        H[0:6, 6 + j] = F
        H[6 + j, 0:6] = F
    return H


@njit(cache=True)
def _body_force(I, v, a):
    # f = I a - ad(v)^T (I v)
    h = I @ v
    out = I @ a
    w = v[3:6]
    vl = v[0:3]
    out[0:3] += _cross(w, h[0:3])
    out[3:6] += _cross(vl, h[0:3]) + _cross(w, h[3:6])
    return out


@njit(cache=True)
def rnea(m, x, qdd):
    """Inverse dynamics: generalized force producing qdd at (q, v), gravity included."""
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    nv = 6 + nj
    R0 = quat_to_rot(x[3:7])
    v = np.empty((nj + 1, 6))
    a = np.empty((nj + 1, 6))
    f = np.empty((nj + 1, 6))
    for i in range(6):
        v[0, i] = x[nq + i]
        a[0, i] = qdd[i]
    a[0, 0:3] -= R0.T @ m.gravity
    f[0] = _body_force(m.inertia[0], v[0], a[0])
    Rrel = np.empty((nj, 3, 3))
    for j in range(nj):
        Rr, pr = _joint_rel(m, x, j)
        Rrel[j] = Rr
        Rt = Rr.T
        qd_j = x[nq + 6 + j]
        vl = Rt @ (v[j, 0:3] - _cross(pr, v[j, 3:6]))
        w = Rt @ v[j, 3:6] + m.joint_axis[j] * qd_j
        al = Rt @ (a[j, 0:3] - _cross(pr, a[j, 3:6]))
        aw = Rt @ a[j, 3:6] + m.joint_axis[j] * qdd[6 + j]
        sq = m.joint_axis[j] * qd_j
        al += _cross(vl, sq)
        aw += _cross(w, sq)
        v[j + 1, 0:3] = vl
        v[j + 1, 3:6] = w
        a[j + 1, 0:3] = al
        a[j + 1, 3:6] = aw
        f[j + 1] = _body_force(m.inertia[j + 1], v[j + 1], a[j + 1])
    tau = np.empty(nv)
    for j in range(nj - 1, -1, -1):
        tau[6 + j] = (
            f[j + 1, 3] * m.joint_axis[j][0]
            + f[j + 1, 4] * m.joint_axis[j][1]
            + f[j + 1, 5] * m.joint_axis[j][2]
        )
        f[j] += _wrench_to_parent(Rrel[j], m.joint_pos[j], f[j + 1])
    tau[0:6] = f[0]
    return tau


@njit(cache=True)
def _chol_solve(L, b):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * y[k]
        y[i] = s / L[i, i]
    return y


@njit(cache=True)
def fd_free(m, x, u, f_ext):
    nv = 6 + m.joint_axis.shape[0]
    G = np.ascontiguousarray(m.actuation)
    tau = G @ u + f_ext - rnea(m, x, np.zeros(nv))
    H = crba(m, x)
    L = np.linalg.cholesky(H)
    return _chol_solve(L, tau)


@njit(cache=True)
def _contact_rows(con):
    rows = 0
    for c in range(con.frame_idx.shape[0]):
        for ax in range(3):
            if con.axes[c, ax]:
                rows += 1
    return rows


@njit(cache=True)
def contact_jacobian(m, x, con):
    """Stacked constraint rows: surface-frame components of world point velocity."""
    nj = m.joint_axis.shape[0]
    nv = 6 + nj
    rows = _contact_rows(con)
    J = np.empty((rows, nv))
    r = 0
    for c in range(con.frame_idx.shape[0]):
        Jf, Rf, _ = _frame_jac_placed(m, x, con.frame_idx[c])
        B = con.surf_rot[c].T @ (Rf @ np.ascontiguousarray(Jf[0:3, :]))
        for ax in range(3):
            if con.axes[c, ax]:
                J[r] = B[ax]
                r += 1
    return J


@njit(cache=True)
def _config_shift(x, s, n_j):
    # advance the configuration by s along the current velocity, keep velocity
    nq = 7 + n_j
    nv = 6 + n_j
    dx = np.zeros(2 * nv)
    for i in range(nv):
        dx[i] = s * x[nq + i]
    return state_oplus(x, dx, n_j)


@njit(cache=True)
def contact_drift(m, x, con):
    # dJ/dt qd by central differencing of J along the configuration flow
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    nv = 6 + nj
    qd = np.ascontiguousarray(x[nq:nq + nv])
    xp = _config_shift(x, DRIFT_FD_STEP, nj)
    xm = _config_shift(x, -DRIFT_FD_STEP, nj)
    Jp = contact_jacobian(m, xp, con)
    Jm = contact_jacobian(m, xm, con)
    return (Jp @ qd - Jm @ qd) / (2.0 * DRIFT_FD_STEP)


@njit(cache=True)
def contact_bias(m, x, con):
    """Velocity-product acceleration of the constrained axes at zero qdd.

    The world acceleration of a contact point is Jc qdd plus this term; it is
    the analytic counterpart of dJ/dt qd, free of differencing noise.
    """
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    v = np.empty((nj + 1, 6))
    a = np.empty((nj + 1, 6))
    for i in range(6):
        v[0, i] = x[nq + i]
        a[0, i] = 0.0
    for j in range(nj):
        Rr, pr = _joint_rel(m, x, j)
        Rt = Rr.T
        qd_j = x[nq + 6 + j]
        vl = Rt @ (v[j, 0:3] - _cross(pr, v[j, 3:6]))
        w = Rt @ v[j, 3:6] + m.joint_axis[j] * qd_j
        al = Rt @ (a[j, 0:3] - _cross(pr, a[j, 3:6]))
        aw = Rt @ np.ascontiguousarray(a[j, 3:6])
        sq = m.joint_axis[j] * qd_j
        al += _cross(vl, sq)
        aw += _cross(w, sq)
        v[j + 1, 0:3] = vl
        v[j + 1, 3:6] = w
        a[j + 1, 0:3] = al
        a[j + 1, 3:6] = aw
    rows = _contact_rows(con)
    out = np.empty(rows)
    r = 0
    for c in range(con.frame_idx.shape[0]):
        fi = con.frame_idx[c]
        b = m.frame_parent[fi]
        Rt = m.frame_rot[fi].T
        pr = m.frame_pos[fi]
        vf = Rt @ (v[b, 0:3] - _cross(pr, v[b, 3:6]))
        wf = Rt @ np.ascontiguousarray(v[b, 3:6])
        af = Rt @ (a[b, 0:3] - _cross(pr, a[b, 3:6]))
        Rf, _ = frame_placement(m, x, fi)
        bs = con.surf_rot[c].T @ (Rf @ (af + _cross(wf, vf)))
        for ax in range(3):
            if con.axes[c, ax]:
                out[r] = bs[ax]
                r += 1
    return out


@njit(cache=True)
def _constraint_rhs(m, x, con):
    # desired J qdd: acceleration-level closure plus optional Baumgarte terms
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    nv = 6 + nj
    b = -contact_bias(m, x, con)
    need_bg = False
    for c in range(con.frame_idx.shape[0]):
        if con.kv[c] != 0.0 or con.kp[c] != 0.0:
            need_bg = True
    if need_bg:
        qd = np.ascontiguousarray(x[nq:nq + nv])
        Jc = contact_jacobian(m, x, con)
        vrow = Jc @ qd
        r = 0
        for c in range(con.frame_idx.shape[0]):
            Rf, pf = frame_placement(m, x, con.frame_idx[c])
            e = con.surf_rot[c].T @ (pf - con.anchor[c])
            for ax in range(3):
                if con.axes[c, ax]:
                    b[r] -= con.kv[c] * vrow[r] + con.kp[c] * e[ax]
                    r += 1
    return b


@njit(cache=True)
def fd_contact(m, x, u, con, f_ext):
    """Constrained forward dynamics via Cholesky of H and a Schur complement.

    Returns (qdd, lam) with lam expressed in surface-frame constraint rows.
    """
    nj = m.joint_axis.shape[0]
    nv = 6 + nj
    G = np.ascontiguousarray(m.actuation)
    tau = G @ u + f_ext - rnea(m, x, np.zeros(nv))
    H = crba(m, x)
    L = np.linalg.cholesky(H)
    qddf = _chol_solve(L, tau)
    Jc = contact_jacobian(m, x, con)
    rows = Jc.shape[0]
    Y = np.empty((nv, rows))
    for r in range(rows):
        Y[:, r] = _chol_solve(L, Jc[r])
    S = Jc @ Y
    b = _constraint_rhs(m, x, con)
    LS = np.linalg.cholesky(S)
    lam = _chol_solve(LS, b - Jc @ qddf)
    qdd = qddf + Y @ lam
    return qdd, lam


@njit(cache=True)
def contact_force(m, x, u, con, f_ext):
    _, lam = fd_contact(m, x, u, con, f_ext)
    return lam


@njit(cache=True)
def _accel(m, x, u, con, f_ext):
    if con.frame_idx.shape[0] > 0:
        qdd, _ = fd_contact(m, x, u, con, f_ext)
        return qdd
    return fd_free(m, x, u, f_ext)


@njit(cache=True)
def _xdot(m, x, u, con, f_ext):
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    nv = 6 + nj
    out = np.empty(2 * nv)
    for i in range(nv):
        out[i] = x[nq + i]
    out[nv:] = _accel(m, x, u, con, f_ext)
    return out


@njit(cache=True)
def step(m, x, u, dt, integ, con, f_ext):
    """One explicit integration step of the full-body dynamics."""
    nj = m.joint_axis.shape[0]
    nq = 7 + nj
    nv = 6 + nj
    if integ == INTEG_EULER:
        a = _accel(m, x, u, con, f_ext)
        dx = np.empty(2 * nv)
        for i in range(nv):
            vn = x[nq + i] + dt * a[i]
            dx[i] = dt * vn
            dx[nv + i] = dt * a[i]
        return state_oplus(x, dx, nj)
    k1 = _xdot(m, x, u, con, f_ext)
    k2 = _xdot(m, state_oplus(x, 0.5 * dt * k1, nj), u, con, f_ext)
    k3 = _xdot(m, state_oplus(x, 0.5 * dt * k2, nj), u, con, f_ext)
    k4 = _xdot(m, state_oplus(x, dt * k3, nj), u, con, f_ext)
    return state_oplus(x, (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), nj)


@njit(cache=True)
def step_derivatives(m, x, u, dt, integ, con, h):
    """Central finite-difference transition derivatives on the tangent space."""
    nj = m.joint_axis.shape[0]
    nv = 6 + nj
    ndx = 2 * nv
    nu = u.shape[0]
    f_ext = np.zeros(nv)
    fx = np.empty((ndx, ndx))
    fu = np.empty((ndx, nu))
    dx = np.zeros(ndx)
    for j in range(ndx):
        dx[j] = h
        sp = step(m, state_oplus(x, dx, nj), u, dt, integ, con, f_ext)
        dx[j] = -h
        sm = step(m, state_oplus(x, dx, nj), u, dt, integ, con, f_ext)
        dx[j] = 0.0
        fx[:, j] = state_ominus(sp, sm, nj) / (2.0 * h)
    up = u.copy()
    for j in range(nu):
        up[j] = u[j] + h
        sp = step(m, x, up, dt, integ, con, f_ext)
        up[j] = u[j] - h
        sm = step(m, x, up, dt, integ, con, f_ext)
        up[j] = u[j]
        fu[:, j] = state_ominus(sp, sm, nj) / (2.0 * h)
    return fx, fu


@njit(cache=True)
def sweep_derivatives(m, X, U, dt, integ, con, h):
    """Transition derivatives for a run of nodes sharing one dynamics spec."""
    n = U.shape[0]
    nj = m.joint_axis.shape[0]
    ndx = 2 * (6 + nj)
    nu = U.shape[1]
    fx = np.empty((n, ndx, ndx))
    fu = np.empty((n, ndx, nu))
    for i in range(n):
        a, b = step_derivatives(m, X[i], U[i], dt, integ, con, h)
        fx[i] = a
        fu[i] = b
    return fx, fu


@njit(cache=True)
def contact_force_sens(m, x, u, con, h):
    """Contact force and its state/control sensitivities by central differences."""
    nj = m.joint_axis.shape[0]
    nv = 6 + nj
    ndx = 2 * nv
    nu = u.shape[0]
    f_ext = np.zeros(nv)
    lam0 = contact_force(m, x, u, con, f_ext)
    rows = lam0.shape[0]
    dlx = np.empty((rows, ndx))
    dlu = np.empty((rows, nu))
    dx = np.zeros(ndx)
    for j in range(ndx):
        dx[j] = h
        lp = contact_force(m, state_oplus(x, dx, nj), u, con, f_ext)
        dx[j] = -h
        lm = contact_force(m, state_oplus(x, dx, nj), u, con, f_ext)
        dx[j] = 0.0
        dlx[:, j] = (lp - lm) / (2.0 * h)
    up = u.copy()
    for j in range(nu):
        up[j] = u[j] + h
        lp = contact_force(m, x, up, con, f_ext)
        up[j] = u[j] - h
        lm = contact_force(m, x, up, con, f_ext)
        up[j] = u[j]
        dlu[:, j] = (lp - lm) / (2.0 * h)
    return lam0, dlx, dlu


@njit(cache=True)
def all_frames(m, x):
    """World placement and body-frame twist of every declared frame."""
    nf = m.frame_parent.shape[0]
    R, p = fk_links(m, x)
    v = link_twists(m, x)
    Rf = np.empty((nf, 3, 3))
    pf = np.empty((nf, 3))
    tw = np.empty((nf, 6))
    for f in range(nf):
        b = m.frame_parent[f]
        Rf[f] = R[b] @ m.frame_rot[f]
        pf[f] = p[b] + R[b] @ m.frame_pos[f]
        Rr = m.frame_rot[f]
        pr = m.frame_pos[f]
        tw[f, 0:3] = Rr.T @ (v[b, 0:3] - _cross(pr, v[b, 3:6]))
        tw[f, 3:6] = Rr.T @ v[b, 3:6]
    return Rf, pf, tw
