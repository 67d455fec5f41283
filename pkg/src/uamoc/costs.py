"""Weighted residual costs over states, controls, frames and contact forces.

A cost stack is a list of CostTerm entries. Each term contributes
weight * r^T diag(1/spread) r, so larger spread entries soften the
corresponding residual rows. Derivatives are Gauss-Newton:
grad = 2 w J^T W^-1 r and hess = 2 w J^T W^-1 J with W the spread.

Residual kinds and their rows:
  state             x (-) target on the state tangent, 2*(6+n_j) rows
  control           u - target, n_u rows
  frame_pose        pose of a frame (-) target pose, 6 rows
  frame_position    world frame origin minus target point, 3 rows
  frame_orientation frame rotation (-) target rotation, 3 rows
  frame_velocity    body-frame frame twist minus target, 6 rows
  friction_cone     hinge rows of the linearized cone on a contact force
  state_bounds      hinge on joint positions and all velocities
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from . import liealg
from .errors import ModelConfigError

_FD_CONFIG = 1e-6

KINDS = ("state", "control", "frame_pose", "frame_position", "frame_orientation",
         "frame_velocity", "friction_cone", "state_bounds")


@dataclass
class CostTerm:
    """One weighted residual. spread is the per-row scale W (applied inverted)."""

    name: str
    kind: str
    weight: float
    spread: np.ndarray
    target: object = None
    frame: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelConfigError(f"unknown cost kind '{self.kind}'")
        self.spread = np.asarray(self.spread, dtype=float).reshape(-1)
        if np.any(self.spread <= 0.0):
            raise ModelConfigError(f"cost '{self.name}': spread entries must be positive")
        if self.weight < 0.0:
            raise ModelConfigError(f"cost '{self.name}': weight must be non-negative")


def cone_rows(mu, lam_min=0.0):
    """Linearized friction cone rows A so that A lam <= 0 inside the cone."""
    A = np.array([
        [1.0, 0.0, -mu],
        [-1.0, 0.0, -mu],
        [0.0, 1.0, -mu],
        [0.0, -1.0, -mu],
        [0.0, 0.0, -1.0],
    ])
    b = np.array([0.0, 0.0, 0.0, 0.0, lam_min])
    return A, b


class _Workspace:
    """Per-evaluation cache of kinematics shared between terms."""

    def __init__(self, model, x, u, contacts):
        self.model = model
        self.x = np.ascontiguousarray(x, dtype=float)
        self.u = None if u is None else np.ascontiguousarray(u, dtype=float)
        self.contacts = contacts
        self._placements = {}
        self._jacobians = {}
        self._twists = {}
        self._lam = None
        self._lam_sens = None

    def placement(self, fid):
        if fid not in self._placements:
            R, p = _k.frame_placement(self.model.arrays, self.x, fid)
            self._placements[fid] = (R, p)
        return self._placements[fid]

    def jacobian(self, fid):
        if fid not in self._jacobians:
            self._jacobians[fid] = _k.frame_jacobian_local(self.model.arrays, self.x, fid)
        return self._jacobians[fid]

    def twist(self, fid):
        if fid not in self._twists:
            self._twists[fid] = _k.frame_twist(self.model.arrays, self.x, fid)
        return self._twists[fid]

    def contact_force(self):
        if self._lam is None:
            if self.contacts is None or self.u is None:
                raise ModelConfigError(
                    "friction cone cost needs contact dynamics and a control")
            self._lam = _k.contact_force(self.model.arrays, self.x, self.u,
                                         self.contacts, np.zeros(self.model.nv))
        return self._lam

    def contact_force_sens(self):
        if self._lam_sens is None:
            lam, dx, du = _k.contact_force_sens(
                self.model.arrays, self.x, self.u, self.contacts, _FD_CONFIG)
            self._lam_sens = (lam, dx, du)
        return self._lam_sens


def _contact_row_offset(ws, term):
    """First constraint row of the contact this cone term watches."""
    con = ws.contacts
    want = term.params.get("contact", 0)
    if con is None or want >= con.frame_idx.shape[0]:
        raise ModelConfigError(
            f"cost '{term.name}': contact {want} is not active on this node")
    r = 0
    for c in range(want):
        r += int(con.axes[c].sum())
    if int(con.axes[want].sum()) != 3:
        raise ModelConfigError(
            f"cost '{term.name}': friction cone needs a 3-axis contact")
    return r


def residual(model, term, x, u=None, contacts=None, _ws=None):
    """Residual vector of one term at (x, u)."""
    ws = _ws or _Workspace(model, x, u, contacts)
    nj = model.n_joints
    if term.kind == "state":
        return _k.state_ominus(ws.x, np.ascontiguousarray(term.target, dtype=float), nj)
    if term.kind == "control":
        return ws.u - np.asarray(term.target, dtype=float)
    if term.kind == "frame_pose":
        R, p = ws.placement(model.frame_id(term.frame))
        ref = term.target
        dR = ref.rotation.T @ R
        dp = ref.rotation.T @ (p - ref.trans)
        return _k.se3_log(_k.rot_to_quat(np.ascontiguousarray(dR)), dp)
    if term.kind == "frame_position":
        _, p = ws.placement(model.frame_id(term.frame))
        return p - np.asarray(term.target, dtype=float)
    if term.kind == "frame_orientation":
        R, _ = ws.placement(model.frame_id(term.frame))
        ref = term.target if isinstance(term.target, np.ndarray) else term.target.rotation
        return _k.quat_to_rotvec(_k.rot_to_quat(np.ascontiguousarray(ref.T @ R)))
    if term.kind == "frame_velocity":
        tw = ws.twist(model.frame_id(term.frame))
        return tw - np.asarray(term.target, dtype=float)
    if term.kind == "friction_cone":
        lam_all = ws.contact_force()
        r0 = _contact_row_offset(ws, term)
        lam = lam_all[r0:r0 + 3]
        A, b = cone_rows(term.params.get("mu", 0.7), term.params.get("lam_min", 0.0))
        return np.maximum(A @ lam + b, 0.0)
    if term.kind == "state_bounds":
        lo = np.asarray(term.params["lower"], dtype=float)
        hi = np.asarray(term.params["upper"], dtype=float)
        coords = np.concatenate([ws.x[7:7 + nj], ws.x[model.nq:]])
        return np.maximum(coords - hi, 0.0) + np.minimum(coords - lo, 0.0)
    raise ModelConfigError(f"unknown cost kind '{term.kind}'")


def _pose_block(r6):
    # d/d(delta) of Log(ref^-1 X Exp(delta)) at the current residual r6
    return liealg.se3_left_jac_inv(-r6)


def residual_jacobians(model, term, x, u=None, contacts=None, _ws=None):
    """Residual and its Jacobians (r, Jx, Ju) on the state tangent and control."""
    ws = _ws or _Workspace(model, x, u, contacts)
    nj = model.n_joints
    nv = model.nv
    ndx = model.ndx
    nu = model.nu
    r = residual(model, term, x, u, contacts, _ws=ws)
    Jx = np.zeros((r.shape[0], ndx))
    Ju = np.zeros((r.shape[0], nu))

    if term.kind == "state":
        Jx[0:6, 0:6] = _pose_block(r[0:6])
        for i in range(6, ndx):
            Jx[i, i] = 1.0
    elif term.kind == "control":
        Ju[:, :] = np.eye(nu)
    elif term.kind == "frame_pose":
        JF = ws.jacobian(model.frame_id(term.frame))
        Jx[:, 0:nv] = _pose_block(r) @ JF
    elif term.kind == "frame_position":
        fid = model.frame_id(term.frame)
        R, _ = ws.placement(fid)
        JF = ws.jacobian(fid)
        Jx[:, 0:nv] = R @ np.ascontiguousarray(JF[0:3, :])
    elif term.kind == "frame_orientation":
        JF = ws.jacobian(model.frame_id(term.frame))
        Jx[:, 0:nv] = liealg.so3_left_jac_inv(-r) @ JF[3:6, :]
    elif term.kind == "frame_velocity":
        fid = model.frame_id(term.frame)
        JF = ws.jacobian(fid)
        Jx[:, nv:] = JF
        # configuration dependence of the twist by central differences
        d = np.zeros(ndx)
        for j in range(nv):
            d[j] = _FD_CONFIG
            tp = _k.frame_twist(model.arrays, _k.state_oplus(ws.x, d, nj), fid)
            d[j] = -_FD_CONFIG
            tm = _k.frame_twist(model.arrays, _k.state_oplus(ws.x, d, nj), fid)
            d[j] = 0.0
            Jx[:, j] = (tp - tm) / (2.0 * _FD_CONFIG)
    elif term.kind == "friction_cone":
        lam_all, dlam_dx, dlam_du = ws.contact_force_sens()
        r0 = _contact_row_offset(ws, term)
        A, b = cone_rows(term.params.get("mu", 0.7), term.params.get("lam_min", 0.0))
        active = (A @ lam_all[r0:r0 + 3] + b) > 0.0
        D = A * active[:, None]
        Jx[:, :] = D @ dlam_dx[r0:r0 + 3]
        Ju[:, :] = D @ dlam_du[r0:r0 + 3]
    elif term.kind == "state_bounds":
        lo = np.asarray(term.params["lower"], dtype=float)
        hi = np.asarray(term.params["upper"], dtype=float)
        coords = np.concatenate([ws.x[7:7 + nj], ws.x[model.nq:]])
        act = (coords > hi) | (coords < lo)
        for i, on in enumerate(act):
            if on:
                Jx[i, 6 + i] = 1.0
    return r, Jx, Ju


def stack_value(model, terms, x, u=None, contacts=None):
    """Total cost of a stack at one node."""
    ws = _Workspace(model, x, u, contacts)
    total = 0.0
    for t in terms:
        if u is None and t.kind in ("control", "friction_cone"):
            continue
        r = residual(model, t, x, u, contacts, _ws=ws)
        total += t.weight * float(r @ (r / t.spread))
    return total


def stack_derivatives(model, terms, x, u=None, contacts=None):
    """Value and Gauss-Newton derivatives (l, lx, lu, lxx, lxu, luu)."""
    ws = _Workspace(model, x, u, contacts)
    ndx, nu = model.ndx, model.nu
    l = 0.0
    lx = np.zeros(ndx)
    lu = np.zeros(nu)
    lxx = np.zeros((ndx, ndx))
    lxu = np.zeros((ndx, nu))
    luu = np.zeros((nu, nu))
    for t in terms:
        if u is None and t.kind in ("control", "friction_cone"):
            continue
        r, Jx, Ju = residual_jacobians(model, t, x, u, contacts, _ws=ws)
        wi = r / t.spread
        l += t.weight * float(r @ wi)
        JxW = (2.0 * t.weight) * (Jx.T / t.spread)
        lx += JxW @ r
        lxx += JxW @ Jx
        if np.any(Ju):
            JuW = (2.0 * t.weight) * (Ju.T / t.spread)
            lu += JuW @ r
            luu += JuW @ Ju
            lxu += JxW @ Ju
    return l, lx, lu, lxx, lxu, luu
