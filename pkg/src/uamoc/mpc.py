"""Receding-horizon control on top of the trajectory optimizer.

Three strategies build the horizon problem from the mission description:

  weighted  task costs run on every node, scaled by temporal proximity
            exp(alpha * (t - t_task)) up to the task time; no reference
  rail      every node tracks the precomputed reference at its own clock
            time, position tight and orientation/velocity soft
  carrot    interior nodes carry only light regularization; the horizon
            node chases the reference point one horizon ahead (the carrot)
            and tasks inside the horizon pin to their nearest node

The controller replans at a fixed cadence, warm starts from the previous
solution shifted in time, compensates the configured solve latency by
forward-integrating the pending plan, and between replans applies the
time-indexed feedback policy of the newest plan that has come due.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import costs as _costs
from . import kernels as _k
from . import liealg
from . import model as _model
from . import ocp as _ocp
from .errors import MissionValidationError, SolverFailure, StaleSolution
from .solver import FddpSolver, SolverSettings, squash, unsquash


@dataclass(frozen=True)
class MpcConfig:
    strategy: str = "carrot"
    horizon_nodes: int = 30
    dt: float = 0.03
    iterations: int = 4
    update_dt: float = 0.0025
    reference_dt: float = 0.01
    solve_latency_ms: float = 15.0
    window_integrator: str = "semi_implicit_euler"
    z_reg: float = _ocp.DEFAULT_Z_REG
    weighted_alpha: float = 2.0
    carrot_terminal_scale: float = 100.0
    nav_weight: float = 1.0
    control_weight: float = 1e-2
    track_weight: float = 20.0
    track_control_weight: float = 0.1
    task_weight: float = 200.0
    pos_spread: float = 0.05
    soft_scale: float = 10.0
    joint_spread: float = 0.5
    vel_spread: float = 2.0
    task_spread: float = 0.01

    @property
    def horizon(self):
        """Lookahead covered by the plan, in seconds."""
        return (self.horizon_nodes - 1) * self.dt

    @property
    def solve_latency(self):
        return self.solve_latency_ms / 1000.0

    @classmethod
    def from_mission(cls, mission, overrides=None):
        doc = mission.controller
        fields = {
            "strategy": doc["strategy"],
            "horizon_nodes": doc["horizon_nodes"],
            "dt": doc["dt"],
            "iterations": doc["iterations"],
            "update_dt": doc["update_dt"],
            "reference_dt": doc["reference_dt"],
            "solve_latency_ms": doc["solve_latency_ms"],
            "window_integrator": doc["window_integrator"],
            "z_reg": doc["z_reg"],
            "weighted_alpha": float(doc["weighted"]["alpha"]),
            "carrot_terminal_scale": float(doc["carrot"]["terminal_scale"]),
        }
        known = set(cls.__dataclass_fields__)
        extra = set(doc["weights"]) - known
        if extra:
            raise MissionValidationError(
                f"unknown controller weight(s) {sorted(extra)}")
        fields.update({k: float(v) for k, v in doc["weights"].items()})
        if overrides:
            extra = set(overrides) - known
            if extra:
                raise MissionValidationError(
                    f"unknown controller override(s) {sorted(extra)}")
            fields.update(overrides)
        cfg = cls(**fields)
        if cfg.strategy not in ("weighted", "rail", "carrot"):
            raise MissionValidationError(f"unknown strategy '{cfg.strategy}'")
        if cfg.horizon_nodes < 2 or cfg.dt <= 0.0:
            raise MissionValidationError("controller needs horizon_nodes >= 2 and dt > 0")
        if cfg.window_integrator not in ("rk4", "semi_implicit_euler"):
            raise MissionValidationError(
                f"unknown window integrator '{cfg.window_integrator}'")
        return cfg


class ReferenceTrajectory:
    """Time-indexed state/control reference with manifold interpolation.

    States interpolate geodesically between grid points; controls are held
    piecewise constant. Queries clamp to the first and last grid entries.
    """

    def __init__(self, times, states, controls, n_joints):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.controls = np.asarray(controls, dtype=float)
        self.n_joints = int(n_joints)
        n = self.times.shape[0]
        if n < 2 or np.any(np.diff(self.times) <= 0.0):
            raise ValueError("reference needs at least two strictly increasing times")
        if self.states.shape[0] != n or self.controls.shape[0] != n - 1:
            raise ValueError("reference needs n states and n-1 controls")

    @property
    def duration(self):
        return float(self.times[-1])

    def state_at(self, t):
        times = self.times
        if t <= times[0]:
            return self.states[0].copy()
        if t >= times[-1]:
            return self.states[-1].copy()
        i = int(np.searchsorted(times, t, side="right")) - 1
        s = (t - times[i]) / (times[i + 1] - times[i])
        return _k.state_interpolate(self.states[i], self.states[i + 1],
                                    float(s), self.n_joints)

    def control_at(self, t):
        times = self.times
        if t <= times[0]:
            return self.controls[0].copy()
        if t >= times[-2]:
            return self.controls[-1].copy()
        i = int(np.searchsorted(times, t, side="right")) - 1
        return self.controls[i].copy()

    def reference_at(self, t):
        return self.state_at(t), self.control_at(t)

    @classmethod
    def from_solution(cls, mission, X, U, grid_dt=None):
        """Resample a mission-grid plan onto the controller reference grid.

        U must hold physical controls; map solver output through the
        problem's control squashing first.
        """
        h = float(grid_dt if grid_dt is not None else mission.controller["reference_dt"])
        src_t = np.arange(X.shape[0]) * mission.dt
        n = int(round(mission.duration / h)) + 1
        times = np.arange(n) * h
        nj = mission.model.n_joints
        states = np.empty((n, X.shape[1]))
        controls = np.empty((n - 1, U.shape[1]))
        for i, t in enumerate(times):
            j = min(int(np.searchsorted(src_t, t, side="right")) - 1, X.shape[0] - 2)
            j = max(j, 0)
            s = (t - src_t[j]) / mission.dt
            states[i] = _k.state_interpolate(X[j], X[j + 1], float(min(s, 1.0)), nj)
            if i < n - 1:
                controls[i] = U[min(j, U.shape[0] - 1)]
        return cls(times, states, controls, nj)

    def to_csv(self, path):
        nx = self.states.shape[1]
        nu = self.controls.shape[1]
        header = (["t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, t in enumerate(self.times):
                u = self.controls[min(i, self.controls.shape[0] - 1)]
                w.writerow([repr(float(t))]
                           + [repr(float(v)) for v in self.states[i]]
                           + [repr(float(v)) for v in u])

    @classmethod
    def from_csv(cls, path, n_joints):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, rows = rows[0], rows[1:]
        nx = sum(1 for c in header if c.startswith("x"))
        data = np.asarray([[float(v) for v in r] for r in rows])
        return cls(data[:, 0], data[:, 1:1 + nx], data[:-1, 1 + nx:], n_joints)


# -- horizon problem builders ------------------------------------------------


def _state_spread(model, pos, ori, joint, vel):
    return np.concatenate([
        np.full(3, pos), np.full(3, ori),
        np.full(model.n_joints, joint), np.full(model.nv, vel)])


def _window_shells(mission, cfg, t0):
    """Model/contact/safety-cost scaffolding for a horizon starting at t0."""
    integ = _k.INTEG_RK4 if cfg.window_integrator == "rk4" else _k.INTEG_EULER
    nodes = []
    for k in range(cfg.horizon_nodes - 1):
        tau = t0 + k * cfg.dt
        ph = mission.phase_at(tau)
        m = mission.phase_model(ph)
        safety = [t for t in mission.phase_terms(ph)
                  if t.kind in ("friction_cone", "state_bounds")]
        nodes.append(_ocp.NodeSpec(
            model=m, contacts=mission.phase_contact_arrays(ph), dt=cfg.dt,
            integ=integ, terms=safety, phase=ph.name, time=tau))
    tau = t0 + cfg.horizon * 1.0
    ph = mission.phase_at(tau)
    terminal = _ocp.TerminalSpec(model=mission.phase_model(ph), terms=[], time=tau)
    return nodes, terminal


def _hover_term(mission, model, weight):
    u_h = _model.gravity_compensation(model, mission.x_goal)
    return _costs.CostTerm(name="effort", kind="control", weight=weight,
                           spread=np.ones(model.nu), target=u_h)


def _task_term(task, weight, spread):
    frame = task.frame or "base"
    if task.rotation is not None:
        pose = liealg.Pose(_k.rot_to_quat(np.ascontiguousarray(task.rotation)),
                           np.asarray(task.position, dtype=float))
        # orientation an order looser than position: the vehicle must stay
        # free to bank while being pinned to a point
        sp = np.concatenate([np.full(3, spread), np.full(3, 10.0 * spread)])
        return _costs.CostTerm(name=f"task_{task.name}", kind="frame_pose",
                               weight=weight, spread=sp,
                               target=pose, frame=frame)
    return _costs.CostTerm(name=f"task_{task.name}", kind="frame_position",
                           weight=weight, spread=np.full(3, spread),
                           target=np.asarray(task.position, dtype=float),
                           frame=frame)


def task_scale(alpha, tau, t_task):
    """Temporal proximity weighting: 1 at and past the task, decaying before."""
    return float(np.exp(alpha * min(0.0, tau - t_task)))


def weighted_update(mission, cfg, t0, x_now, reference=None):
    """Horizon problem where each node adopts the closest upcoming task.

    Node costs ramp exponentially toward each task's time. When the next
    task lies beyond the horizon, the horizon node carries it at full
    weight, which pulls the task to one horizon's distance and hurries the
    controls; this is the strategy's characteristic limitation on
    aggressive missions.
    """
    nodes, terminal = _window_shells(mission, cfg, t0)
    upcoming = sorted((t for t in mission.tasks if t.time > t0 - 1e-9),
                      key=lambda t: t.time)

    def next_task(tau):
        for task in upcoming:
            if task.time >= tau - 1e-9:
                return task
        return None

    for spec in nodes:
        nav = _state_spread(spec.model, cfg.pos_spread * cfg.soft_scale,
                            cfg.pos_spread * cfg.soft_scale,
                            cfg.joint_spread, cfg.vel_spread)
        spec.terms.append(_costs.CostTerm(
            name="nav", kind="state", weight=cfg.nav_weight, spread=nav,
            target=mission.x_goal))
        spec.terms.append(_hover_term(mission, spec.model, cfg.control_weight))
        task = next_task(spec.time)
        if task is not None:
            # dt-scaled running density, ramping up toward the task time
            w = (cfg.task_weight * cfg.dt
                 * task_scale(cfg.weighted_alpha, spec.time, task.time))
            spec.terms.append(_task_term(task, w, cfg.task_spread))
    nav = _state_spread(terminal.model, cfg.pos_spread * cfg.soft_scale,
                        cfg.pos_spread * cfg.soft_scale,
                        cfg.joint_spread, cfg.vel_spread)
    terminal.terms.append(_costs.CostTerm(
        name="nav", kind="state", weight=cfg.nav_weight, spread=nav,
        target=mission.x_goal))
    task = next_task(terminal.time)
    if task is not None:
        terminal.terms.append(_task_term(task, cfg.task_weight, cfg.task_spread))
    return _ocp.OcpProblem(nodes, terminal, x_now, mission.model.control_lower,
                           mission.model.control_upper, cfg.z_reg)


def rail_update(mission, cfg, t0, x_now, reference):
    """Horizon problem tracking the reference at each node's own clock time."""
    if reference is None:
        raise MissionValidationError("rail strategy needs a reference trajectory")
    nodes, terminal = _window_shells(mission, cfg, t0)
    for spec in nodes:
        x_ref, u_ref = reference.reference_at(spec.time)
        sp = _state_spread(spec.model, cfg.pos_spread,
                           cfg.pos_spread * cfg.soft_scale, cfg.joint_spread,
                           cfg.vel_spread * cfg.soft_scale)
        spec.terms.append(_costs.CostTerm(
            name="rail", kind="state", weight=cfg.track_weight, spread=sp,
            target=x_ref))
        spec.terms.append(_costs.CostTerm(
            name="rail_u", kind="control", weight=cfg.track_control_weight,
            spread=np.ones(spec.model.nu), target=u_ref))
    sp = _state_spread(terminal.model, cfg.pos_spread,
                       cfg.pos_spread * cfg.soft_scale, cfg.joint_spread,
                       cfg.vel_spread * cfg.soft_scale)
    terminal.terms.append(_costs.CostTerm(
        name="rail", kind="state", weight=cfg.track_weight, spread=sp,
        target=reference.state_at(terminal.time)))
    return _ocp.OcpProblem(nodes, terminal, x_now, mission.model.control_lower,
                           mission.model.control_upper, cfg.z_reg)


def carrot_update(mission, cfg, t0, x_now, reference):
    """Horizon problem chasing the reference point one horizon ahead."""
    if reference is None:
        raise MissionValidationError("carrot strategy needs a reference trajectory")
    nodes, terminal = _window_shells(mission, cfg, t0)
    t_end = terminal.time
    carrot = (mission.x_goal if t_end >= reference.duration
              else reference.state_at(t_end))
    for spec in nodes:
        nav = _state_spread(spec.model, cfg.pos_spread * cfg.soft_scale,
                            cfg.pos_spread * cfg.soft_scale,
                            cfg.joint_spread, cfg.vel_spread)
        spec.terms.append(_costs.CostTerm(
            name="nav", kind="state", weight=cfg.nav_weight, spread=nav,
            target=carrot))
        spec.terms.append(_hover_term(mission, spec.model, cfg.control_weight))
    # tasks inside the horizon pin to their nearest node at full weight
    for task in mission.tasks:
        k = int(round((task.time - t0) / cfg.dt))
        if abs(task.time - t0 - k * cfg.dt) > cfg.dt / 2 + 1e-9:
            continue
        if 0 <= k < len(nodes):
            nodes[k].terms.append(_task_term(task, cfg.task_weight, cfg.task_spread))
        elif k == len(nodes):
            terminal.terms.append(_task_term(task, cfg.task_weight, cfg.task_spread))
    sharp = _state_spread(terminal.model, cfg.pos_spread,
                          cfg.pos_spread * cfg.soft_scale, cfg.joint_spread,
                          cfg.vel_spread)
    terminal.terms.append(_costs.CostTerm(
        name="carrot", kind="state",
        weight=cfg.nav_weight * cfg.carrot_terminal_scale, spread=sharp,
        target=carrot))
    return _ocp.OcpProblem(nodes, terminal, x_now, mission.model.control_lower,
                           mission.model.control_upper, cfg.z_reg)


_STRATEGIES = {
    "weighted": weighted_update,
    "rail": rail_update,
    "carrot": carrot_update,
}


class MpcController:
    """Receding-horizon controller with latency compensation.

    mpc_step(t, x) plans from the state predicted one solve latency ahead;
    the new plan becomes active once its start time has come. rate_feedback
    queries the active plan's time-indexed affine policy at any t between
    replans. Failed solves keep the previous plan running.
    """

    def __init__(self, mission, reference=None, overrides=None):
        self.mission = mission
        self.cfg = MpcConfig.from_mission(mission, overrides)
        self.reference = reference
        if self.cfg.strategy in ("rail", "carrot") and reference is None:
            raise MissionValidationError(
                f"{self.cfg.strategy} strategy needs a reference trajectory")
        self._update = _STRATEGIES[self.cfg.strategy]
        self._t_plan = None
        self._X = None
        self._Z = None
        self._K = None
        self._pending = None
        self.failures = 0
        self.last_result = None

    # -- plan bookkeeping ----------------------------------------------------

    @property
    def plan_time(self):
        return self._t_plan

    def _promote(self, t):
        if self._pending is not None and t >= self._pending[0] - 1e-9:
            self._t_plan, self._X, self._Z, self._K = self._pending
            self._pending = None

    def _predict(self, t, x, horizon):
        """Integrate the plant model forward under the active policy."""
        ph = self.mission.phase_at(t)
        m = self.mission.phase_model(ph)
        try:
            u = self.rate_feedback(t, x)
        except StaleSolution:
            u = _model.gravity_compensation(m, x)
        return _model.step(m, x, u, horizon, integrator=self.mission.integrator,
                           contacts=self.mission.phase_contact_arrays(ph))

    def _warm_start(self, problem, t_start):
        cfg = self.cfg
        n = cfg.horizon_nodes
        if self._X is None:
            if self.reference is not None:
                X = np.stack([self.reference.state_at(t_start + k * cfg.dt)
                              for k in range(n)])
                U = np.stack([self.reference.control_at(t_start + k * cfg.dt)
                              for k in range(n - 1)])
                Z = unsquash(U, problem.lower, problem.upper)
            else:
                X = np.stack([problem.x0] * n)
                u_h = _model.gravity_compensation(self.mission.model, problem.x0)
                Z = np.stack([problem.raw_from_control(u_h)] * (n - 1))
            return X, Z
        shift = max(int(round((t_start - self._t_plan) / cfg.dt)), 0)
        idx = np.minimum(np.arange(n) + shift, n - 1)
        X = self._X[idx]
        idx_u = np.minimum(np.arange(n - 1) + shift, n - 2)
        Z = self._Z[idx_u]
        return X, Z

    # -- public API ------------------------------------------------------------

    def mpc_step(self, t, x):
        """Replan from time t and measured state x; returns the solver result."""
        cfg = self.cfg
        self._promote(t)
        x = np.asarray(x, dtype=float)
        if self._X is None:
            t_start, x_start = t, x
        else:
            t_start = t + cfg.solve_latency
            x_start = self._predict(t, x, cfg.solve_latency)
        problem = self._update(self.mission, cfg, t_start, x_start, self.reference)
        X_init, Z_init = self._warm_start(problem, t_start)
        settings = SolverSettings(max_iters=cfg.iterations)
        try:
            res = FddpSolver(problem, settings).solve(X_init, Z_init)
        except SolverFailure:
            if self._X is None:
                raise
            self.failures += 1
            return None
        self.last_result = res
        if self._X is None:
            self._t_plan, self._X, self._Z, self._K = t_start, res.X, res.U, res.K
        else:
            self._pending = (t_start, res.X, res.U, res.K)
        return res

    def rate_feedback(self, t, x):
        """Control for time t from the active plan's affine policy."""
        self._promote(t)
        if self._X is None:
            raise StaleSolution("no plan has been computed yet")
        cfg = self.cfg
        k = int(np.floor((t - self._t_plan) / cfg.dt + 1e-9))
        if k < 0:
            k = 0
        if k >= cfg.horizon_nodes - 1:
            raise StaleSolution(
                f"active plan is {t - self._t_plan:.3f}s old, horizon exhausted")
        m = self.mission.model
        dx = _k.state_ominus(np.asarray(x, dtype=float), self._X[k], m.n_joints)
        z = self._Z[k] + self._K[k] @ dx
        return squash(z, m.control_lower, m.control_upper)
