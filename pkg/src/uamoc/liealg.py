"""Pose manifold and tangent-space operations for the composite robot state.

Poses are unit quaternion (wxyz) plus translation. Tangent vectors follow the
body-frame (right) convention and stack the linear part first: a pose tangent
is [lin(3), ang(3)], a full-state tangent is [pose(6), joints(n_j),
velocity(6 + n_j)]. `x op v` means `x * Exp(v)` and `y ominus x` means
`Log(x^-1 y)`; both fall back to Taylor series below 1e-8 rad and the log
raises AngleNearPi within 1e-6 of the pi branch cut.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .errors import AngleNearPi

__all__ = [
    "Pose",
    "exp",
    "log",
    "state_oplus",
    "state_ominus",
    "interpolate",
    "rpy_to_rot",
    "rot_to_rpy",
    "so3_exp",
    "so3_log",
    "so3_left_jac_inv",
    "se3_left_jac_inv",
    "AngleNearPi",
]


@dataclass
class Pose:
    """Rigid transform: rotation as a unit quaternion (w, x, y, z) plus translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.quat = _k.quat_normalize(np.asarray(self.quat, dtype=float))
        self.trans = np.asarray(self.trans, dtype=float).copy()

    @staticmethod
    def identity():
        return Pose()

    @staticmethod
    def from_rot(R, trans=None):
        return Pose(_k.rot_to_quat(np.ascontiguousarray(R, dtype=float)),
                    np.zeros(3) if trans is None else trans)

    @property
    def rotation(self):
        return _k.quat_to_rot(self.quat)

    def compose(self, other):
        q, p = _k.pose_mul(self.quat, self.trans, other.quat, other.trans)
        return Pose(q, p)

    def inverse(self):
        q, p = _k.pose_inv(self.quat, self.trans)
        return Pose(q, p)

    def act(self, point):
        return self.trans + _k.quat_rotate(self.quat, np.asarray(point, dtype=float))

    def __matmul__(self, other):
        return self.compose(other)


def exp(tangent):
    """Pose exponential of a [lin, ang] tangent vector."""
    q, p = _k.se3_exp(np.ascontiguousarray(tangent, dtype=float))
    return Pose(q, p)


def log(pose):
    """Principal-branch logarithm of a Pose, inverse of exp."""
    return _k.se3_log(pose.quat, pose.trans)


def state_oplus(x, dx, n_joints):
    """Right-perturb a packed state by a tangent vector."""
    return _k.state_oplus(np.ascontiguousarray(x, dtype=float),
                          np.ascontiguousarray(dx, dtype=float), n_joints)


def state_ominus(y, x, n_joints):
    """Tangent difference of two packed states, `Log(x^-1 y)` on the pose block."""
    return _k.state_ominus(np.ascontiguousarray(y, dtype=float),
                           np.ascontiguousarray(x, dtype=float), n_joints)


def interpolate(xa, xb, s, n_joints):
    """Geodesic interpolation `xa op s * (xb ominus xa)`; s=0 gives xa, s=1 gives xb."""
    return _k.state_interpolate(np.ascontiguousarray(xa, dtype=float),
                                np.ascontiguousarray(xb, dtype=float), float(s), n_joints)


def so3_exp(rotvec):
    return _k.quat_to_rot(_k.quat_from_rotvec(np.ascontiguousarray(rotvec, dtype=float)))


def so3_log(R):
    return _k.quat_to_rotvec(_k.rot_to_quat(np.ascontiguousarray(R, dtype=float)))


def rpy_to_rot(rpy):
    """Roll-pitch-yaw (about fixed x, y, z axes) to rotation matrix."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def rot_to_rpy(R):
    p = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    r = np.arctan2(R[2, 1], R[2, 2])
    y = np.arctan2(R[1, 0], R[0, 0])
    return np.array([r, p, y])


def so3_left_jac_inv(rotvec):
    return _k.so3_left_jac_inv(np.ascontiguousarray(rotvec, dtype=float))


def _se3_q_block(rho, theta):
    # coupling block of the SE(3) left Jacobian
    t = float(np.linalg.norm(theta))
    P = _k._skew(np.ascontiguousarray(rho, dtype=float))
    W = _k._skew(np.ascontiguousarray(theta, dtype=float))
    if t < 1e-3:
        t2 = t * t
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 60.0 - t2 / 1260.0
    else:
        t2 = t * t
        t3 = t2 * t
        st, ct = np.sin(t), np.cos(t)
        c1 = (t - st) / t3
        c2 = (1.0 - t2 / 2.0 - ct) / (t2 * t2)
        c3 = c2 - 3.0 * (t - st - t3 / 6.0) / (t2 * t3)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    return (0.5 * P + c1 * (WP + PW + W @ PW)
            - c2 * (W @ WP + PW @ W - 3.0 * WPW)
            - 0.5 * c3 * (WPW @ W + W @ WPW))


def se3_left_jac_inv(tangent):
    """Inverse left Jacobian of the SE(3) exponential for a [lin, ang] tangent."""
    v = np.asarray(tangent, dtype=float)
    Ji = _k.so3_left_jac_inv(np.ascontiguousarray(v[3:6]))
    Q = _se3_q_block(v[0:3], v[3:6])
    out = np.zeros((6, 6))
    out[0:3, 0:3] = Ji
    out[3:6, 3:6] = Ji
    out[0:3, 3:6] = -Ji @ Q @ Ji
    return out
