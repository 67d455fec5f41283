"""Mission documents and their translation into trajectory optimization problems.

A mission is a model reference, an initial state and an ordered list of
phases. Timed phases carry a running cost stack, optional contacts and an
optional payload flag; they discretize into duration/dt steps. Instantaneous
phases pin a task stack onto the single node at their time boundary. The
horizon has sum(duration)/dt + 1 nodes and the terminal node collects the
last timed stack plus any task stack placed at the final time.

The optimization problem works on unbounded inputs z; controls are
squash(z) inside the dynamics and costs, which keeps every iterate strictly
inside the actuator box.
"""

import importlib.resources
from dataclasses import dataclass

import numpy as np
import yaml

from . import costs as _costs
from . import kernels as _k
from . import liealg
from . import model as _model
from .errors import MissionValidationError, ModelConfigError
from .solver import squash, squash_jacobian, unsquash

DEFAULT_Z_REG = 1e-6
DEFAULT_BAUMGARTE = (50.0, 625.0)


def _cfg_dir(kind):
    return importlib.resources.files("uamoc") / "configs" / kind


def resolve_config(ref, kind):
    """Resolve a model or mission reference: explicit path first, then packaged."""
    import os
    for cand in (ref, f"{ref}.yaml"):
        if os.path.exists(cand):
            return cand
    base = _cfg_dir(kind)
    for cand in (ref, f"{ref}.yaml"):
        p = base / cand
        if p.is_file():
            return str(p)
    raise MissionValidationError(f"cannot resolve {kind[:-1]} reference '{ref}'")


def _check_keys(d, allowed, what):
    extra = set(d) - set(allowed)
    if extra:
        raise MissionValidationError(f"unknown key(s) {sorted(extra)} in {what}")


def _block_vector(value, blocks, what):
    """Expand scalar / flat list / named-block dict into one flat vector."""
    total = sum(n for _, n in blocks)
    if isinstance(value, (int, float)):
        return np.full(total, float(value))
    if isinstance(value, dict):
        names = [b for b, _ in blocks]
        _check_keys(value, names, what)
        out = []
        for bname, n in blocks:
            v = value.get(bname, 1.0)
            if isinstance(v, (int, float)):
                out.append(np.full(n, float(v)))
            else:
                arr = np.asarray(v, dtype=float).reshape(-1)
                if arr.shape[0] != n:
                    raise MissionValidationError(
                        f"{what}: block '{bname}' needs {n} entries, got {arr.shape[0]}")
                out.append(arr)
        return np.concatenate(out) if out else np.zeros(0)
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape[0] != total:
        raise MissionValidationError(f"{what}: expected {total} entries, got {arr.shape[0]}")
    return arr


@dataclass
class Phase:
    name: str
    duration: float
    instantaneous: bool
    cost_docs: list
    contacts: list
    carry_payload: bool
    n_steps: int = 0
    start_time: float = 0.0
    start_node: int = 0


@dataclass
class Task:
    """A point objective used for logging tracking error."""
    name: str
    time: float
    frame: str          # empty means the base
    position: np.ndarray
    rotation: object = None  # 3x3 array, or None when orientation is free


@dataclass
class NodeSpec:
    model: object
    contacts: object      # kernels.ContactArrays
    dt: float
    integ: int
    terms: list
    phase: str
    time: float


@dataclass
class TerminalSpec:
    model: object
    terms: list
    time: float


class Mission:
    """Parsed mission document plus derived node layout."""

    def __init__(self, doc, base_dir="", dt_override=None):
        _check_keys(doc, {"name", "model", "dt", "integrator", "initial", "payload",
                          "phases", "controller", "simulation", "disturbance"},
                    "mission document")
        self.name = doc.get("name", "mission")
        try:
            mref = doc["model"]
            self.model = _model.load_model(
                mref if isinstance(mref, dict)
                else resolve_config(self._join(base_dir, mref), "models"))
        except KeyError:
            raise MissionValidationError("mission needs a 'model' reference") from None
        except ModelConfigError as e:
            raise MissionValidationError(f"model config: {e}") from None

        self.dt = float(dt_override if dt_override is not None else doc.get("dt", 0.02))
        if self.dt <= 0.0:
            raise MissionValidationError("dt must be positive")
        self.integrator = doc.get("integrator", "rk4")
        if self.integrator not in ("rk4", "semi_implicit_euler"):
            raise MissionValidationError(f"unknown integrator '{self.integrator}'")

        self.payload_model = None
        pay = doc.get("payload")
        if pay:
            _check_keys(pay, {"mass", "com", "inertia"}, "payload")
            self.payload_model = self.model.with_payload(
                float(pay["mass"]), pay.get("com", (0.0, 0.0, 0.0)), pay.get("inertia"))

        init = doc.get("initial", {})
        _check_keys(init, {"position", "rpy", "quat", "joints", "velocity"}, "initial")
        try:
            self.x0 = self.model.pack_state(
                position=init.get("position", (0.0, 0.0, 1.0)),
                quat=init.get("quat"), rpy=init.get("rpy"),
                joints=init.get("joints"), velocity=init.get("velocity"))
        except ModelConfigError as e:
            raise MissionValidationError(f"initial state: {e}") from None

        self.phases = self._parse_phases(doc.get("phases", []))
        self.duration = sum(p.duration for p in self.phases)
        self.n_nodes = sum(p.n_steps for p in self.phases) + 1

        self.controller = self._controller_defaults(doc.get("controller", {}))
        self.simulation = self._simulation_defaults(doc.get("simulation", {}))
        self.disturbance = doc.get("disturbance", {})

        self._u_hover = _model.gravity_compensation(self.model, self.x0)
        self._con_cache = {}
        self._timed = tuple(p for p in self.phases if not p.instantaneous)
        self.tasks = self._collect_tasks()
        self.x_goal = self._goal_state()

    @staticmethod
    def _join(base_dir, ref):
        import os
        if base_dir and not os.path.isabs(ref) and os.path.exists(
                os.path.join(base_dir, ref)):
            return os.path.join(base_dir, ref)
        return ref

    # -- parsing --------------------------------------------------------------

    def _parse_phases(self, docs):
        if not docs:
            raise MissionValidationError("mission has no phases")
        phases = []
        t = 0.0
        node = 0
        timed = 0
        for i, ph in enumerate(docs):
            _check_keys(ph, {"name", "duration", "instantaneous", "costs",
                             "contacts", "carry_payload"}, f"phase {i}")
            name = ph.get("name", f"phase{i}")
            inst = bool(ph.get("instantaneous", False))
            dur = float(ph.get("duration", 0.0))
            if inst and dur != 0.0:
                raise MissionValidationError(
                    f"phase '{name}': instantaneous phases cannot have a duration")
            if not inst:
                if dur <= 0.0:
                    raise MissionValidationError(
                        f"phase '{name}': timed phases need a positive duration")
                steps = dur / self.dt
                if abs(steps - round(steps)) > 1e-6:
                    raise MissionValidationError(
                        f"phase '{name}': duration {dur} is not a multiple of dt {self.dt}")
                timed += 1
            contacts = [self._parse_contact(c, name) for c in ph.get("contacts", [])]
            if ph.get("carry_payload") and self.payload_model is None:
                raise MissionValidationError(
                    f"phase '{name}': carry_payload set but the mission has no payload")
            phases.append(Phase(
                name=name, duration=0.0 if inst else dur, instantaneous=inst,
                cost_docs=ph.get("costs", []), contacts=contacts,
                carry_payload=bool(ph.get("carry_payload", self.payload_model is not None)),
                n_steps=0 if inst else int(round(dur / self.dt)),
                start_time=t, start_node=node))
            if not inst:
                t += dur
                node += phases[-1].n_steps
        if timed == 0:
            raise MissionValidationError("mission needs at least one timed phase")
        return phases

    def _parse_contact(self, doc, phase):
        _check_keys(doc, {"frame", "anchor", "axes", "surface_rpy", "baumgarte"},
                    f"contact in phase '{phase}'")
        if "frame" not in doc or "anchor" not in doc:
            raise MissionValidationError(
                f"contact in phase '{phase}' needs 'frame' and 'anchor'")
        self.model.frame_id(doc["frame"])  # raises on unknown frames
        return _model.ContactSpec(
            frame=doc["frame"], anchor=tuple(doc["anchor"]),
            axes=tuple(doc.get("axes", ("x", "y", "z"))),
            surface_rpy=tuple(doc.get("surface_rpy", (0.0, 0.0, 0.0))),
            baumgarte=tuple(doc.get("baumgarte", DEFAULT_BAUMGARTE)))

    def _controller_defaults(self, doc):
        _check_keys(doc, {"strategy", "horizon_nodes", "dt", "iterations",
                          "update_dt", "reference_dt", "solve_latency_ms",
                          "window_integrator", "weighted", "carrot", "z_reg",
                          "weights"}, "controller")
        out = {
            "strategy": doc.get("strategy", "carrot"),
            "horizon_nodes": int(doc.get("horizon_nodes", 30)),
            "dt": float(doc.get("dt", 0.03)),
            "iterations": int(doc.get("iterations", 4)),
            "update_dt": float(doc.get("update_dt", 0.0025)),
            "reference_dt": float(doc.get("reference_dt", self.dt / 2.0)),
            "solve_latency_ms": float(doc.get("solve_latency_ms", 15.0)),
            "window_integrator": doc.get("window_integrator", "semi_implicit_euler"),
            "weighted": {"alpha": 2.0, **doc.get("weighted", {})},
            "carrot": {"terminal_scale": 100.0, **doc.get("carrot", {})},
            "z_reg": float(doc.get("z_reg", DEFAULT_Z_REG)),
            "weights": dict(doc.get("weights", {})),
        }
        if out["strategy"] not in ("weighted", "rail", "carrot"):
            raise MissionValidationError(f"unknown strategy '{out['strategy']}'")
        return out

    def _simulation_defaults(self, doc):
        _check_keys(doc, {"duration", "plant_dt"}, "simulation")
        return {
            "duration": float(doc.get("duration", self.duration + 1.0)),
            "plant_dt": float(doc.get("plant_dt", 0.001)),
        }

    # -- cost stacks ------------------------------------------------------------

    def phase_model(self, phase):
        if self.payload_model is not None and phase.carry_payload:
            return self.payload_model
        return self.model

    def phase_at(self, t):
        """The timed phase whose interval covers time t, clamped at the ends."""
        timed = self._timed
        for p in timed:
            if t < p.start_time + p.duration - 1e-12:
                return p
        return timed[-1]

    def phase_contact_arrays(self, phase):
        hit = self._con_cache.get(id(phase))
        if hit is None:
            hit = self.phase_model(phase).contact_arrays(phase.contacts)
            self._con_cache[id(phase)] = hit
        return hit

    def _target_state(self, doc, what):
        _check_keys(doc, {"position", "rpy", "quat", "joints", "velocity"}, what)
        try:
            return self.model.pack_state(
                position=doc.get("position", (0.0, 0.0, 0.0)),
                quat=doc.get("quat"), rpy=doc.get("rpy"),
                joints=doc.get("joints"), velocity=doc.get("velocity"))
        except ModelConfigError as e:
            raise MissionValidationError(f"{what}: {e}") from None

    def _target_pose(self, doc, what):
        _check_keys(doc, {"xyz", "rpy", "quat"}, what)
        if "quat" in doc:
            q = _k.quat_normalize(np.asarray(doc["quat"], dtype=float))
        else:
            q = _k.rot_to_quat(np.ascontiguousarray(
                liealg.rpy_to_rot(doc.get("rpy", (0.0, 0.0, 0.0)))))
        return liealg.Pose(q, np.asarray(doc.get("xyz", (0.0, 0.0, 0.0)), dtype=float))

    def term_from_doc(self, doc, phase, progress=0.0):
        """Build one CostTerm; progress in [0, 1] resolves moving targets."""
        m = self.model
        nj, nv, ndx, nu = m.n_joints, m.nv, m.ndx, m.nu
        _check_keys(doc, {"name", "kind", "weight", "spread", "target", "frame",
                          "params"}, f"cost in phase '{phase.name}'")
        kind = doc.get("kind")
        if kind not in _costs.KINDS:
            raise MissionValidationError(
                f"phase '{phase.name}': unknown cost kind '{kind}'")
        name = doc.get("name", kind)
        weight = float(doc.get("weight", 1.0))
        spread_doc = doc.get("spread", 1.0)
        target_doc = doc.get("target")
        frame = doc.get("frame", "")
        params = dict(doc.get("params", {}))

        if kind == "state":
            spread = _block_vector(spread_doc,
                                   [("pose", 6), ("joints", nj), ("velocity", nv)],
                                   f"{name} spread")
            target = (self._target_state(target_doc, f"{name} target")
                      if isinstance(target_doc, dict) else
                      np.asarray(target_doc, dtype=float) if target_doc is not None
                      else self.x0.copy())
        elif kind == "control":
            spread = _block_vector(spread_doc, [("control", nu)], f"{name} spread")
            if target_doc is None or target_doc == "hover":
                target = self._u_hover.copy()
            else:
                target = np.asarray(target_doc, dtype=float).reshape(-1)
                if target.shape[0] != nu:
                    raise MissionValidationError(
                        f"{name}: control target needs {nu} entries")
        elif kind == "frame_pose":
            spread = _block_vector(spread_doc, [("pose", 6)], f"{name} spread")
            target = self._target_pose(target_doc or {}, f"{name} target")
        elif kind == "frame_position":
            spread = _block_vector(spread_doc, [("position", 3)], f"{name} spread")
            if isinstance(target_doc, dict):
                _check_keys(target_doc, {"from", "to"}, f"{name} target")
                a = np.asarray(target_doc["from"], dtype=float)
                b = np.asarray(target_doc["to"], dtype=float)
                target = a + progress * (b - a)
            else:
                target = np.asarray(target_doc, dtype=float).reshape(3)
        elif kind == "frame_orientation":
            spread = _block_vector(spread_doc, [("orientation", 3)], f"{name} spread")
            target = self._target_pose(target_doc or {}, f"{name} target").rotation
        elif kind == "frame_velocity":
            spread = _block_vector(spread_doc, [("velocity", 6)], f"{name} spread")
            target = (np.zeros(6) if target_doc is None
                      else np.asarray(target_doc, dtype=float).reshape(6))
        elif kind == "friction_cone":
            spread = _block_vector(spread_doc, [("cone", 5)], f"{name} spread")
            target = None
        else:  # state_bounds
            nb = nj + nv
            spread = _block_vector(spread_doc, [("bounds", nb)], f"{name} spread")
            lo = _block_vector(params.get("lower", -np.inf),
                               [("joints", nj), ("velocity", nv)], f"{name} lower")
            hi = _block_vector(params.get("upper", np.inf),
                               [("joints", nj), ("velocity", nv)], f"{name} upper")
            params = {**params, "lower": lo, "upper": hi}
            target = None

        if kind in ("frame_pose", "frame_position", "frame_orientation",
                    "frame_velocity") and not frame:
            raise MissionValidationError(f"{name}: cost kind '{kind}' needs a frame")
        if frame:
            self.model.frame_id(frame)
        return _costs.CostTerm(name=name, kind=kind, weight=weight, spread=spread,
                               target=target, frame=frame, params=params)

    def phase_terms(self, phase, progress=0.0):
        return [self.term_from_doc(d, phase, progress) for d in phase.cost_docs]

    # -- node layout ---------------------------------------------------------

    def node_specs(self):
        """Per-step NodeSpec list and the TerminalSpec for the whole mission."""
        nodes = []
        for phase in self.phases:
            if phase.instantaneous:
                continue
            m = self.phase_model(phase)
            con = self.phase_contact_arrays(phase)
            integ = _k.INTEG_RK4 if self.integrator == "rk4" else _k.INTEG_EULER
            for s in range(phase.n_steps):
                progress = (s / phase.n_steps) if phase.n_steps > 0 else 0.0
                nodes.append(NodeSpec(
                    model=m, contacts=con, dt=self.dt, integ=integ,
                    terms=self.phase_terms(phase, progress), phase=phase.name,
                    time=phase.start_time + s * self.dt))
        # instantaneous stacks pin onto their boundary node
        terminal_extra = []
        for phase in self.phases:
            if not phase.instantaneous:
                continue
            if phase.start_node < len(nodes):
                nodes[phase.start_node].terms.extend(self.phase_terms(phase))
            else:
                terminal_extra.extend(self.phase_terms(phase))
        last_timed = [p for p in self.phases if not p.instantaneous][-1]
        term_model = self.phase_model(last_timed)
        terminal = TerminalSpec(
            model=term_model,
            terms=self.phase_terms(last_timed, 1.0) + terminal_extra,
            time=self.duration)
        return nodes, terminal

    def build_problem(self, z_reg=None):
        nodes, terminal = self.node_specs()
        return OcpProblem(nodes, terminal, self.x0,
                          self.model.control_lower, self.model.control_upper,
                          self.controller["z_reg"] if z_reg is None else z_reg)

    # -- metadata ---------------------------------------------------------------

    def _collect_tasks(self):
        tasks = []
        for phase in self.phases:
            if not phase.instantaneous:
                continue
            for doc in phase.cost_docs:
                kind = doc.get("kind")
                if kind == "state":
                    x = self._target_state(doc.get("target", {}), "task target")
                    tasks.append(Task(phase.name, phase.start_time, "",
                                      x[0:3].copy(),
                                      _k.quat_to_rot(np.ascontiguousarray(x[3:7]))))
                    break
                if kind in ("frame_pose", "frame_position"):
                    if kind == "frame_pose":
                        pose = self._target_pose(doc.get("target", {}), "task target")
                        tasks.append(Task(phase.name, phase.start_time,
                                          doc.get("frame", ""), pose.trans.copy(),
                                          pose.rotation))
                    else:
                        tasks.append(Task(phase.name, phase.start_time,
                                          doc.get("frame", ""),
                                          np.asarray(doc.get("target"), dtype=float),
                                          None))
                    break
        return tasks

    def _goal_state(self):
        # later stacks override: a final task target wins over the running hold
        _, terminal = self.node_specs()
        for t in reversed(terminal.terms):
            if t.kind == "state":
                return np.asarray(t.target, dtype=float).copy()
        return self.x0.copy()


def load_mission(source, dt_override=None):
    """Load a mission YAML from a path or an already-parsed dict."""
    import os
    if isinstance(source, dict):
        return Mission(source, dt_override=dt_override)
    path = resolve_config(source, "missions")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise MissionValidationError(f"mission document {source} is not a mapping")
    return Mission(doc, base_dir=os.path.dirname(path), dt_override=dt_override)


class OcpProblem:
    """Optimal control problem over squashed controls, solver-protocol shaped."""

    def __init__(self, nodes, terminal, x0, lower, upper, z_reg=DEFAULT_Z_REG):
        self.nodes = nodes
        self.terminal = terminal
        self.n_nodes = len(nodes) + 1
        self.x0 = np.ascontiguousarray(x0, dtype=float)
        m = terminal.model
        self.ndx = m.ndx
        self.nu = m.nu
        self.nj = m.n_joints
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.z_reg = float(z_reg)

    # -- state space -------------------------------------------------------------

    def state_oplus(self, x, dx):
        return _k.state_oplus(np.ascontiguousarray(x), np.ascontiguousarray(dx), self.nj)

    def state_ominus(self, y, x):
        return _k.state_ominus(np.ascontiguousarray(y), np.ascontiguousarray(x), self.nj)

    # -- controls ------------------------------------------------------------------

    def control(self, z):
        return squash(z, self.lower, self.upper)

    def controls(self, Z):
        return np.stack([self.control(z) for z in Z]) if len(Z) else np.zeros((0, self.nu))

    def raw_from_control(self, u):
        return unsquash(u, self.lower, self.upper)

    # -- protocol ---------------------------------------------------------------

    def dynamics(self, k, x, z):
        n = self.nodes[k]
        return _k.step(n.model.arrays, np.ascontiguousarray(x),
                       np.ascontiguousarray(self.control(z)), n.dt, n.integ,
                       n.contacts, np.zeros(n.model.nv))

    def dynamics_derivatives(self, k, x, z):
        n = self.nodes[k]
        u = self.control(z)
        fx, fu = _k.step_derivatives(n.model.arrays, np.ascontiguousarray(x),
                                     np.ascontiguousarray(u), n.dt, n.integ,
                                     n.contacts, 1e-6)
        return fx, fu * squash_jacobian(z, self.lower, self.upper)[None, :]

    def sweep(self, X, Z):
        """Batched transition derivatives; consecutive nodes sharing a dynamics
        spec go through one compiled call."""
        N = self.n_nodes
        FX = np.empty((N - 1, self.ndx, self.ndx))
        FU = np.empty((N - 1, self.ndx, self.nu))
        U = self.controls(Z)
        k = 0
        while k < N - 1:
            n = self.nodes[k]
            j = k + 1
            while j < N - 1 and self._same_spec(self.nodes[j], n):
                j += 1
            fx, fu = _k.sweep_derivatives(
                n.model.arrays, np.ascontiguousarray(X[k:j + 1]),
                np.ascontiguousarray(U[k:j]), n.dt, n.integ, n.contacts, 1e-6)
            FX[k:j] = fx
            FU[k:j] = fu
            k = j
        for k in range(N - 1):
            FU[k] *= squash_jacobian(Z[k], self.lower, self.upper)[None, :]
        return FX, FU

    @staticmethod
    def _same_spec(a, b):
        return (a.model is b.model and a.contacts is b.contacts
                and a.dt == b.dt and a.integ == b.integ)

    def cost(self, k, x, z):
        n = self.nodes[k]
        u = self.control(z)
        con = n.contacts if n.contacts.frame_idx.shape[0] else None
        # wild trial inputs may overflow to inf; the solver rejects those
        with np.errstate(over="ignore", invalid="ignore"):
            return (_costs.stack_value(n.model, n.terms, x, u, con)
                    + self.z_reg * float(z @ z))

    def cost_derivatives(self, k, x, z):
        n = self.nodes[k]
        u = self.control(z)
        con = n.contacts if n.contacts.frame_idx.shape[0] else None
        l, lx, lu, lxx, lxu, luu = _costs.stack_derivatives(n.model, n.terms, x, u, con)
        s = squash_jacobian(z, self.lower, self.upper)
        lu = s * lu + 2.0 * self.z_reg * z
        luu = s[:, None] * luu * s[None, :] + 2.0 * self.z_reg * np.eye(self.nu)
        lxu = lxu * s[None, :]
        l += self.z_reg * float(z @ z)
        return l, lx, lu, lxx, lxu, luu

    def terminal_cost(self, x):
        return _costs.stack_value(self.terminal.model, self.terminal.terms, x, None, None)

    def terminal_derivatives(self, x):
        l, lx, _, lxx, _, _ = _costs.stack_derivatives(
            self.terminal.model, self.terminal.terms, x, None, None)
        return l, lx, lxx

    # -- helpers -----------------------------------------------------------------

    def rollout(self, Z, x0=None):
        """Integrate the dynamics from x0 under raw inputs Z."""
        X = np.empty((self.n_nodes, self.x0.shape[0]))
        X[0] = self.x0 if x0 is None else x0
        for k in range(self.n_nodes - 1):
            X[k + 1] = self.dynamics(k, X[k], Z[k])
        return X

    def trajectory_cost(self, X, Z):
        c = sum(self.cost(k, X[k], Z[k]) for k in range(self.n_nodes - 1))
        return c + self.terminal_cost(X[-1])

    def times(self):
        out = [n.time for n in self.nodes]
        out.append(self.terminal.time)
        return np.asarray(out)
