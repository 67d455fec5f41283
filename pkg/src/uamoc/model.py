"""Robot model: multirotor base plus serial arm, its dynamics and kinematics.

The packed state layout is [p(3), quat(wxyz), q_J(n_j), v_lin(3), v_ang(3),
qd_J(n_j)]; twists are body-frame with the linear part first. Controls stack
rotor thrusts (N) then joint torques (Nm). Generalized forces follow the
velocity layout [base twist(6), joint rates(n_j)].
"""

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import kernels as _k
from . import liealg
from .errors import ContactRankError, ModelConfigError

GRAVITY = np.array([0.0, 0.0, -9.81])

_INTEGRATORS = {"semi_implicit_euler": _k.INTEG_EULER, "rk4": _k.INTEG_RK4}


def _vec(x, n, what):
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise ModelConfigError(f"{what} must have {n} entries, got {v.shape[0]}")
    return v


def _inertia_matrix(entries, what):
    v = _vec(entries, 6, what)
    ixx, ixy, ixz, iyy, iyz, izz = v
    I = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    if np.any(np.linalg.eigvalsh(I) <= 0.0):
        raise ModelConfigError(f"{what} is not positive definite")
    return I


def _spatial_inertia(mass, com, inertia_com):
    S = _k._skew(np.ascontiguousarray(com, dtype=float))
    out = np.zeros((6, 6))
    out[:3, :3] = mass * np.eye(3)
    out[:3, 3:] = -mass * S
    out[3:, :3] = mass * S
    out[3:, 3:] = inertia_com - mass * (S @ S)
    return out


def _check_keys(d, allowed, what):
    extra = set(d) - set(allowed)
    if extra:
        raise ModelConfigError(f"unknown key(s) {sorted(extra)} in {what}")


@dataclass(frozen=True)
class RotorSpec:
    position: np.ndarray
    axis_rotation: np.ndarray  # rpy of the thrust axis frame in the base frame
    ccw: bool
    cm_over_cf: float
    max_thrust: float


@dataclass(frozen=True)
class JointSpec:
    xyz: np.ndarray
    rpy: np.ndarray
    axis: np.ndarray
    mass: float
    com: np.ndarray
    inertia: np.ndarray  # 3x3 about the link COM, link frame
    torque_limit: float


@dataclass(frozen=True)
class FrameSpec:
    name: str
    parent: str
    xyz: np.ndarray
    rpy: np.ndarray


@dataclass(frozen=True)
class ContactSpec:
    """Rigid point contact of a frame against the environment.

    axes lists the constrained directions in the surface frame; surface_rpy
    orients that frame in the world (its +z is the usual surface normal).
    The anchor is the world point the contact is attached to. baumgarte is the
    (velocity, position) gain pair, (0, 0) meaning plain acceleration-level
    closure.
    """

    frame: str
    anchor: tuple
    axes: tuple = ("x", "y", "z")
    surface_rpy: tuple = (0.0, 0.0, 0.0)
    baumgarte: tuple = (0.0, 0.0)
    name: str = ""


class RobotModel:
    """Immutable robot description plus packed arrays for the compiled kernels."""

    def __init__(self, name, base_mass, base_inertia, rotors, joints, frames,
                 gravity=GRAVITY):
        self.name = name
        self.base_mass = float(base_mass)
        self.base_inertia = np.asarray(base_inertia, dtype=float)
        self.rotors = list(rotors)
        self.joints = list(joints)
        self.gravity = np.asarray(gravity, dtype=float)

        self.n_joints = len(self.joints)
        self.n_rotors = len(self.rotors)
        self.nv = 6 + self.n_joints
        self.nq = 7 + self.n_joints
        self.nx = self.nq + self.nv
        self.ndx = 2 * self.nv
        self.nu = self.n_rotors + self.n_joints

        declared = list(frames)
        self.frames = [FrameSpec("base", "base", np.zeros(3), np.zeros(3))] + declared
        self._frame_index = {}
        for i, f in enumerate(self.frames):
            if f.name in self._frame_index:
                raise ModelConfigError(f"duplicate frame name '{f.name}'")
            self._frame_index[f.name] = i

        lo = [0.0] * self.n_rotors + [-j.torque_limit for j in self.joints]
        hi = [r.max_thrust for r in self.rotors] + [j.torque_limit for j in self.joints]
        self.control_lower = np.array(lo)
        self.control_upper = np.array(hi)

        self.masses = np.array([self.base_mass] + [j.mass for j in self.joints])
        self.arrays = self._pack()

    # -- packing ---------------------------------------------------------

    def _pack(self):
        nj = self.n_joints
        joint_rot = np.zeros((nj, 3, 3))
        joint_pos = np.zeros((nj, 3))
        joint_axis = np.zeros((nj, 3))
        inertia = np.zeros((nj + 1, 6, 6))
        inertia[0] = _spatial_inertia(self.base_mass, np.zeros(3), self.base_inertia)
        for j, spec in enumerate(self.joints):
            joint_rot[j] = liealg.rpy_to_rot(spec.rpy)
            joint_pos[j] = spec.xyz
            joint_axis[j] = spec.axis
            inertia[j + 1] = _spatial_inertia(spec.mass, spec.com, spec.inertia)

        frame_parent = np.zeros(len(self.frames), dtype=np.int64)
        frame_rot = np.zeros((len(self.frames), 3, 3))
        frame_pos = np.zeros((len(self.frames), 3))
        for i, f in enumerate(self.frames):
            frame_parent[i] = self._parent_body(f.parent)
            frame_rot[i] = liealg.rpy_to_rot(f.rpy)
            frame_pos[i] = f.xyz

        return _k.ModelArrays(
            joint_rot=joint_rot,
            joint_pos=joint_pos,
            joint_axis=joint_axis,
            inertia=inertia,
            actuation=self._actuation(),
            frame_parent=frame_parent,
            frame_rot=frame_rot,
            frame_pos=frame_pos,
            gravity=self.gravity.copy(),
        )

    def _parent_body(self, parent):
        if parent == "base":
            return 0
        if parent.startswith("link"):
            try:
                idx = int(parent[4:])
            except ValueError:
                idx = -1
            if 1 <= idx <= self.n_joints:
                return idx
        raise ModelConfigError(
            f"frame parent '{parent}' does not exist (use 'base' or 'link1'..'link{self.n_joints}')")

    def _actuation(self):
        G = np.zeros((self.nv, self.nu))
        for i, r in enumerate(self.rotors):
            R = liealg.rpy_to_rot(r.axis_rotation)
            axis = R @ np.array([0.0, 0.0, 1.0])
            spin = -1.0 if r.ccw else 1.0
            G[0:3, i] = axis
            G[3:6, i] = np.cross(r.position, axis) + spin * r.cm_over_cf * axis
        for j in range(self.n_joints):
            G[6 + j, self.n_rotors + j] = 1.0
        return G

    # -- queries ----------------------------------------------------------

    @property
    def total_mass(self):
        return float(self.masses.sum())

    def frame_id(self, name):
        try:
            return self._frame_index[name]
        except KeyError:
            raise ModelConfigError(f"unknown frame '{name}'") from None

    def pack_state(self, position=(0.0, 0.0, 0.0), quat=None, rpy=None,
                   joints=None, velocity=None):
        x = np.zeros(self.nx)
        x[0:3] = _vec(position, 3, "position")
        if quat is not None and rpy is not None:
            raise ModelConfigError("give either quat or rpy, not both")
        if rpy is not None:
            x[3:7] = _k.rot_to_quat(np.ascontiguousarray(liealg.rpy_to_rot(_vec(rpy, 3, "rpy"))))
        elif quat is not None:
            x[3:7] = _k.quat_normalize(_vec(quat, 4, "quat"))
        else:
            x[3] = 1.0
        if joints is not None:
            x[7:7 + self.n_joints] = _vec(joints, self.n_joints, "joints")
        if velocity is not None:
            x[self.nq:] = _vec(velocity, self.nv, "velocity")
        return x

    def contact_arrays(self, contacts):
        contacts = tuple(contacts)
        n = len(contacts)
        fidx = np.zeros(n, dtype=np.int64)
        anchor = np.zeros((n, 3))
        surf = np.zeros((n, 3, 3))
        axes = np.zeros((n, 3), dtype=np.bool_)
        kv = np.zeros(n)
        kp = np.zeros(n)
        ax_id = {"x": 0, "y": 1, "z": 2}
        for i, c in enumerate(contacts):
            fidx[i] = self.frame_id(c.frame)
            anchor[i] = _vec(c.anchor, 3, "contact anchor")
            surf[i] = liealg.rpy_to_rot(_vec(c.surface_rpy, 3, "surface_rpy"))
            for a in c.axes:
                if a not in ax_id:
                    raise ModelConfigError(f"contact axis '{a}' is not one of x, y, z")
                axes[i, ax_id[a]] = True
            if not axes[i].any():
                raise ModelConfigError(f"contact on '{c.frame}' constrains no axis")
            kv[i], kp[i] = c.baumgarte
        return _k.ContactArrays(frame_idx=fidx, anchor=anchor, surf_rot=surf,
                                axes=axes, kv=kv, kp=kp)

    def with_payload(self, mass, com=(0.0, 0.0, 0.0), inertia=None, name=None):
        """Variant with a point payload rigidly added to the last link."""
        if self.n_joints == 0:
            raise ModelConfigError("cannot attach a payload: model has no arm")
        if mass <= 0.0:
            raise ModelConfigError("payload mass must be positive")
        last = self.joints[-1]
        mp = float(mass)
        cp = _vec(com, 3, "payload com")
        Ip = np.zeros((3, 3)) if inertia is None else _inertia_matrix(inertia, "payload inertia")
        m_new = last.mass + mp
        c_new = (last.mass * last.com + mp * cp) / m_new
        def shift(I, m, c):
            d = _k._skew(np.ascontiguousarray(c - c_new))
            return I - m * (d @ d)
        I_new = shift(last.inertia, last.mass, last.com) + shift(Ip, mp, cp)
        new_last = JointSpec(last.xyz, last.rpy, last.axis, m_new, c_new, I_new,
                             last.torque_limit)
        return RobotModel(
            name or f"{self.name}+payload",
            self.base_mass, self.base_inertia, self.rotors,
            self.joints[:-1] + [new_last], self.frames[1:], self.gravity)


# -- document loading ------------------------------------------------------

def load_model(source):
    """Build a RobotModel from a YAML path or an already-parsed dict."""
    if isinstance(source, dict):
        doc = source
        name = doc.get("name", "model")
    else:
        with open(source) as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, dict):
            raise ModelConfigError(f"model document {source} is not a mapping")
        name = doc.get("name", str(source))

    _check_keys(doc, {"name", "base", "arm", "frames", "gravity"}, "model document")
    if "base" not in doc:
        raise ModelConfigError("model document has no 'base' section")
    base = doc["base"]
    _check_keys(base, {"mass", "inertia", "rotors"}, "base")
    if "mass" not in base or "inertia" not in base:
        raise ModelConfigError("base needs 'mass' and 'inertia'")
    mass = float(base["mass"])
    if mass <= 0.0:
        raise ModelConfigError("base mass must be positive")
    inertia = _inertia_matrix(base["inertia"], "base inertia")

    rotors = []
    for i, r in enumerate(base.get("rotors", [])):
        _check_keys(r, {"position", "axis_rotation", "ccw", "cm_over_cf", "max_thrust"},
                    f"rotor {i}")
        if not isinstance(r.get("ccw"), bool):
            raise ModelConfigError(f"rotor {i}: 'ccw' must be a boolean")
        mt = float(r.get("max_thrust", 0.0))
        if mt <= 0.0:
            raise ModelConfigError(f"rotor {i}: max_thrust must be positive")
        cm = float(r.get("cm_over_cf", 0.0))
        if cm < 0.0:
            raise ModelConfigError(f"rotor {i}: cm_over_cf must be non-negative")
        rotors.append(RotorSpec(
            position=_vec(r["position"], 3, f"rotor {i} position"),
            axis_rotation=_vec(r.get("axis_rotation", (0, 0, 0)), 3, f"rotor {i} axis_rotation"),
            ccw=r["ccw"], cm_over_cf=cm, max_thrust=mt))

    joints = []
    arm = doc.get("arm") or {}
    if arm:
        _check_keys(arm, {"joints"}, "arm")
    for i, j in enumerate(arm.get("joints", [])):
        _check_keys(j, {"xyz", "rpy", "axis", "mass", "com", "inertia", "torque_limit"},
                    f"joint {i}")
        axis = _vec(j["axis"], 3, f"joint {i} axis")
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise ModelConfigError(f"joint {i}: axis must be non-zero")
        jm = float(j["mass"])
        if jm <= 0.0:
            raise ModelConfigError(f"joint {i}: mass must be positive")
        tl = float(j.get("torque_limit", 0.0))
        if tl <= 0.0:
            raise ModelConfigError(f"joint {i}: torque_limit must be positive")
        joints.append(JointSpec(
            xyz=_vec(j.get("xyz", (0, 0, 0)), 3, f"joint {i} xyz"),
            rpy=_vec(j.get("rpy", (0, 0, 0)), 3, f"joint {i} rpy"),
            axis=axis / n, mass=jm,
            com=_vec(j.get("com", (0, 0, 0)), 3, f"joint {i} com"),
            inertia=_inertia_matrix(j["inertia"], f"joint {i} inertia"),
            torque_limit=tl))

    frames = []
    for i, f in enumerate(doc.get("frames", [])):
        _check_keys(f, {"name", "parent", "xyz", "rpy"}, f"frame {i}")
        if "name" not in f or "parent" not in f:
            raise ModelConfigError(f"frame {i} needs 'name' and 'parent'")
        frames.append(FrameSpec(
            name=str(f["name"]), parent=str(f["parent"]),
            xyz=_vec(f.get("xyz", (0, 0, 0)), 3, f"frame {i} xyz"),
            rpy=_vec(f.get("rpy", (0, 0, 0)), 3, f"frame {i} rpy")))

    gravity = _vec(doc.get("gravity", GRAVITY), 3, "gravity")
    return RobotModel(name, mass, inertia, rotors, joints, frames, gravity)


# -- module-level operations ------------------------------------------------

def actuation_matrix(model):
    """Constant map from controls (thrusts, joint torques) to generalized force."""
    return model.arrays.actuation.copy()


def forward_kinematics(model, x):
    """World placement and body-frame twist of every declared frame."""
    Rf, pf, tw = _k.all_frames(model.arrays, _as_state(model, x))
    out = {}
    for i, f in enumerate(model.frames):
        out[f.name] = (liealg.Pose(_k.rot_to_quat(np.ascontiguousarray(Rf[i])), pf[i]),
                       tw[i].copy())
    return out


def frame_jacobian(model, x, frame):
    """Body-frame spatial-velocity Jacobian of a frame, 6 x (6 + n_j)."""
    return _k.frame_jacobian_local(model.arrays, _as_state(model, x),
                                   model.frame_id(frame))


def frame_placement(model, x, frame):
    R, p = _k.frame_placement(model.arrays, _as_state(model, x), model.frame_id(frame))
    return liealg.Pose(_k.rot_to_quat(np.ascontiguousarray(R)), p)


def mass_matrix(model, x):
    return _k.crba(model.arrays, _as_state(model, x))


def nonlinear_terms(model, x):
    """Coriolis, centrifugal and gravity load C(q, v)."""
    return _k.rnea(model.arrays, _as_state(model, x), np.zeros(model.nv))


def inverse_dynamics(model, x, qdd):
    return _k.rnea(model.arrays, _as_state(model, x),
                   np.ascontiguousarray(qdd, dtype=float))


def fd_free(model, x, u, f_ext=None):
    """Unconstrained forward dynamics, gravity and actuation included."""
    return _k.fd_free(model.arrays, _as_state(model, x), _as_control(model, u),
                      _as_fext(model, f_ext))


def fd_contact(model, x, u, contacts, f_ext=None):
    """Contact-constrained forward dynamics.

    Returns (qdd, lam); lam stacks the surface-frame constraint forces acting
    on the robot, one row per constrained axis in declaration order.
    """
    con = contacts if isinstance(contacts, _k.ContactArrays) else model.contact_arrays(contacts)
    try:
        return _k.fd_contact(model.arrays, _as_state(model, x), _as_control(model, u),
                             con, _as_fext(model, f_ext))
    except np.linalg.LinAlgError as e:
        raise ContactRankError("contact Jacobian is rank deficient") from e


def contact_kkt_terms(model, x, u, contacts):
    """Pieces of the contact KKT system, for diagnostics and cross-checks.

    Returns a dict with H, tau (actuation minus bias), Jc, rhs (desired Jc qdd)
    and qdd_free.
    """
    con = contacts if isinstance(contacts, _k.ContactArrays) else model.contact_arrays(contacts)
    xs = _as_state(model, x)
    H = _k.crba(model.arrays, xs)
    tau = model.arrays.actuation @ _as_control(model, u) - _k.rnea(
        model.arrays, xs, np.zeros(model.nv))
    Jc = _k.contact_jacobian(model.arrays, xs, con)
    rhs = _k._constraint_rhs(model.arrays, xs, con)
    return {"H": H, "tau": tau, "Jc": Jc, "rhs": rhs,
            "qdd_free": np.linalg.solve(H, tau)}


def step(model, x, u, dt, integrator="semi_implicit_euler", contacts=(), f_ext=None):
    """Advance the state by dt with semi-implicit Euler or RK4."""
    con = contacts if isinstance(contacts, _k.ContactArrays) else model.contact_arrays(contacts)
    return _k.step(model.arrays, _as_state(model, x), _as_control(model, u),
                   float(dt), _integ_code(integrator), con, _as_fext(model, f_ext))


def step_derivatives(model, x, u, dt, integrator="semi_implicit_euler",
                     contacts=(), fd_step=1e-6):
    """Transition derivatives (f_x, f_u) by central differences on the tangent."""
    con = contacts if isinstance(contacts, _k.ContactArrays) else model.contact_arrays(contacts)
    return _k.step_derivatives(model.arrays, _as_state(model, x), _as_control(model, u),
                               float(dt), _integ_code(integrator), con, float(fd_step))


def base_wrench_to_generalized(model, x, force_world, torque_world=(0.0, 0.0, 0.0)):
    """Map a world-frame wrench at the base origin into generalized forces."""
    R = _k.quat_to_rot(np.ascontiguousarray(_as_state(model, x)[3:7]))
    f_ext = np.zeros(model.nv)
    f_ext[0:3] = R.T @ np.asarray(force_world, dtype=float)
    f_ext[3:6] = R.T @ np.asarray(torque_world, dtype=float)
    return f_ext


def gravity_compensation(model, x):
    """Least-squares controls balancing gravity at the given state."""
    g = nonlinear_terms(model, x)
    u, *_ = np.linalg.lstsq(model.arrays.actuation, g, rcond=None)
    return u


def _integ_code(integrator):
    try:
        return _INTEGRATORS[integrator]
    except KeyError:
        raise ModelConfigError(
            f"unknown integrator '{integrator}' (semi_implicit_euler or rk4)") from None


def _as_state(model, x):
    x = np.ascontiguousarray(x, dtype=float)
    if x.shape != (model.nx,):
        raise ModelConfigError(f"state must have shape ({model.nx},), got {x.shape}")
    return x


def _as_control(model, u):
    u = np.ascontiguousarray(u, dtype=float)
    if u.shape != (model.nu,):
        raise ModelConfigError(f"control must have shape ({model.nu},), got {u.shape}")
    return u


def _as_fext(model, f_ext):
    if f_ext is None:
        return np.zeros(model.nv)
    f_ext = np.ascontiguousarray(f_ext, dtype=float)
    if f_ext.shape != (model.nv,):
        raise ModelConfigError(f"f_ext must have shape ({model.nv},), got {f_ext.shape}")
    return f_ext
