"""Closed-loop simulation, run logging, and disturbance campaigns.

The simulator advances the plant at a fine fixed step (RK4) while the
controller runs on its own coarser tick: every `update_dt` it refreshes the
commanded control from the active plan's affine policy, and every horizon
step `dt` it replans. Controls are zero-order held between ticks. A pulse
disturbance is a world-frame force at the base, mapped into generalized
coordinates through the base rotation.

Every run is deterministic: timing is integer plant-step arithmetic, the
logged solve time is the configured latency (wall clock never enters the
log), and Monte Carlo draws come from a seed sequence keyed by run index.
"""

from dataclasses import dataclass, field

import numpy as np

from . import liealg
from . import model as _model
from . import kernels as _k
from .errors import MissionValidationError, UamocError
from .mpc import MpcController

__all__ = [
    "Disturbance", "SimLog", "McRun", "McResult",
    "run_closed_loop", "task_error", "monte_carlo",
]


@dataclass
class Disturbance:
    """A constant world-frame force pulse applied at the base origin."""
    force: np.ndarray
    t_start: float
    duration: float

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float)
        if self.force.shape != (3,):
            raise MissionValidationError("disturbance force must have 3 components")

    def active(self, t):
        return self.t_start - 1e-12 <= t < self.t_start + self.duration - 1e-12


@dataclass
class SimLog:
    """Time series of one closed-loop run, sampled at controller ticks."""
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    solve_ms: np.ndarray
    iters: np.ndarray
    task_err_pos: np.ndarray
    task_err_ori: np.ndarray
    disturbed: np.ndarray
    n_joints: int
    failures: int = 0

    def row_at(self, t):
        """Index of the logged row closest to time t."""
        return int(np.argmin(np.abs(self.times - t)))

    def control_effort_vs(self, other):
        """Integral of the squared control deviation from another run.

        Both runs must share the same tick grid, which holds for any two
        runs of the same mission and controller configuration.
        """
        n = min(len(self.times), len(other.times))
        dev = np.sum((self.controls[:n] - other.controls[:n]) ** 2, axis=1)
        return float(np.trapezoid(dev, self.times[:n]))

    def to_csv(self, path):
        nx = self.states.shape[1]
        nu = self.controls.shape[1]
        header = (["t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
                  + ["solve_ms", "iters", "task_err_pos", "task_err_ori", "disturbed"])
        lines = [",".join(header)]
        for r in range(len(self.times)):
            cells = [repr(float(self.times[r]))]
            cells += [repr(float(v)) for v in self.states[r]]
            cells += [repr(float(v)) for v in self.controls[r]]
            cells += [repr(float(self.solve_ms[r])), str(int(self.iters[r])),
                      repr(float(self.task_err_pos[r])), repr(float(self.task_err_ori[r])),
                      str(int(self.disturbed[r]))]
            lines.append(",".join(cells))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as f:
            header = f.readline().strip().split(",")
            data = np.array([[float(c) for c in line.strip().split(",")]
                             for line in f if line.strip()])
        nx = sum(1 for h in header if h[0] == "x" and h[1:].isdigit())
        nu = sum(1 for h in header if h[0] == "u" and h[1:].isdigit())
        n_j = (nx - 13) // 2
        return cls(times=data[:, 0], states=data[:, 1:1 + nx],
                   controls=data[:, 1 + nx:1 + nx + nu],
                   solve_ms=data[:, 1 + nx + nu], iters=data[:, 2 + nx + nu].astype(int),
                   task_err_pos=data[:, 3 + nx + nu], task_err_ori=data[:, 4 + nx + nu],
                   disturbed=data[:, 5 + nx + nu].astype(int), n_joints=n_j)


def task_error(mission, t, x):
    """Position and orientation error against the next upcoming task.

    After the last task has passed, the error keeps tracking that task, so
    the log row at a task's time always measures that task. Returns
    (nan, nan) for missions without point tasks; the orientation error is
    0 for tasks that leave orientation free.
    """
    if not mission.tasks:
        return float("nan"), float("nan")
    task = mission.tasks[-1]
    for cand in mission.tasks:
        if cand.time >= t - 1e-9:
            task = cand
            break
    m = mission.model
    if task.frame:
        pose = _model.frame_placement(m, x, task.frame)
        pos, rot = pose.trans, pose.rotation
    else:
        pos = x[0:3]
        rot = _k.quat_to_rot(np.ascontiguousarray(x[3:7]))
    err_pos = float(np.linalg.norm(pos - task.position))
    if task.rotation is None:
        return err_pos, 0.0
    err_ori = float(np.linalg.norm(liealg.so3_log(task.rotation.T @ rot)))
    return err_pos, err_ori


def run_closed_loop(mission, reference=None, overrides=None, disturbance=None,
                    duration=None):
    """Simulate the mission under receding-horizon control.

    The plant integrates the phase-scheduled model (payload swaps and
    contacts follow the mission timeline) with RK4 at the mission's plant
    step. Rows are logged at every controller tick.

    Args:
        mission: parsed Mission.
        reference: ReferenceTrajectory, required by rail and carrot.
        overrides: controller setting overrides, as in MpcConfig.
        disturbance: optional Disturbance pulse.
        duration: simulated seconds; defaults to the mission's setting.

    Returns:
        SimLog.
    """
    controller = MpcController(mission, reference, overrides)
    cfg = controller.cfg
    plant_dt = mission.simulation["plant_dt"]
    horizon_s = duration if duration is not None else mission.simulation["duration"]
    n_steps = int(round(horizon_s / plant_dt))

    x = mission.x0.copy()
    res = controller.mpc_step(0.0, x)
    u = controller.rate_feedback(0.0, x)
    iters_last = res.iterations if res is not None else 0
    latency_ms = cfg.solve_latency_ms

    rows_t, rows_x, rows_u = [0.0], [x.copy()], [u.copy()]
    rows_it, rows_ep, rows_eo, rows_d = [iters_last], [], [], []
    ep, eo = task_error(mission, 0.0, x)
    rows_ep.append(ep)
    rows_eo.append(eo)
    rows_d.append(int(disturbance is not None and disturbance.active(0.0)))

    next_plan = cfg.dt
    next_tick = cfg.update_dt
    for i in range(1, n_steps + 1):
        t_prev = (i - 1) * plant_dt
        phase = mission.phase_at(t_prev)
        plant = mission.phase_model(phase)
        contacts = mission.phase_contact_arrays(phase)
        f_ext = None
        if disturbance is not None and disturbance.active(t_prev):
            f_ext = _model.base_wrench_to_generalized(plant, x, disturbance.force)
        x = _model.step(plant, x, u, plant_dt, integrator="rk4",
                        contacts=contacts, f_ext=f_ext)
        t = i * plant_dt
        if not np.all(np.isfinite(x)):
            raise UamocError(f"plant state became non-finite at t={t:.3f}s")
        if t >= next_plan - 1e-9:
            r = controller.mpc_step(t, x)
            iters_last = r.iterations if r is not None else 0
            next_plan += cfg.dt
        if t >= next_tick - 1e-9:
            u = controller.rate_feedback(t, x)
            next_tick += cfg.update_dt
            rows_t.append(t)
            rows_x.append(x.copy())
            rows_u.append(u.copy())
            rows_it.append(iters_last)
            ep, eo = task_error(mission, t, x)
            rows_ep.append(ep)
            rows_eo.append(eo)
            rows_d.append(int(disturbance is not None and disturbance.active(t)))

    n = len(rows_t)
    return SimLog(
        times=np.asarray(rows_t), states=np.stack(rows_x), controls=np.stack(rows_u),
        solve_ms=np.full(n, latency_ms), iters=np.asarray(rows_it, dtype=int),
        task_err_pos=np.asarray(rows_ep), task_err_ori=np.asarray(rows_eo),
        disturbed=np.asarray(rows_d, dtype=int), n_joints=mission.model.n_joints,
        failures=controller.failures)


# -- disturbance campaigns -----------------------------------------------------


@dataclass
class McRun:
    """Outcome of one disturbed run."""
    window: str
    index: int
    t_start: float
    duration: float
    magnitude: float
    err_pos: float
    err_ori: float
    effort_excess: float
    completed: bool


@dataclass
class McResult:
    """Campaign outcomes grouped by disturbance window."""
    runs: list
    summary: dict
    threshold: float
    baseline_err_pos: float = float("nan")

    @property
    def completion_rate(self):
        if not self.runs:
            return 0.0
        return sum(r.completed for r in self.runs) / len(self.runs)

    def window_errors(self, window):
        return np.array([r.err_pos for r in self.runs if r.window == window])


def _disturbance_spec(mission):
    doc = mission.disturbance
    if not doc or "windows" not in doc or not doc["windows"]:
        raise MissionValidationError(
            "mission has no disturbance.windows; nothing to sample")
    allowed = {"direction", "magnitude_mean", "magnitude_std", "duration_mean",
               "duration_std", "duration_min", "windows", "mc_duration"}
    unknown = set(doc) - allowed
    if unknown:
        raise MissionValidationError(
            f"unknown disturbance keys {sorted(unknown)}")
    direction = np.asarray(doc.get("direction", (1.0, 1.0, 0.0)), dtype=float)
    nrm = np.linalg.norm(direction)
    if nrm < 1e-12:
        raise MissionValidationError("disturbance direction must be nonzero")
    windows = {}
    for name, lohi in doc["windows"].items():
        lo, hi = float(lohi[0]), float(lohi[1])
        if hi < lo:
            raise MissionValidationError(f"disturbance window '{name}' is reversed")
        windows[str(name)] = (lo, hi)
    return {
        "direction": direction / nrm,
        "magnitude_mean": float(doc.get("magnitude_mean", 8.0)),
        "magnitude_std": float(doc.get("magnitude_std", 2.0)),
        "duration_mean": float(doc.get("duration_mean", 0.5)),
        "duration_std": float(doc.get("duration_std", 0.25)),
        "duration_min": float(doc.get("duration_min", 0.05)),
        "windows": windows,
        "mc_duration": float(doc.get("mc_duration", mission.simulation["duration"])),
    }


def sample_disturbance(mission, window, rng):
    """Draw one pulse for the named window of the mission's campaign spec."""
    spec = _disturbance_spec(mission)
    try:
        lo, hi = spec["windows"][window]
    except KeyError:
        raise MissionValidationError(
            f"unknown disturbance window '{window}'") from None
    t0 = float(rng.uniform(lo, hi))
    dur = max(float(rng.normal(spec["duration_mean"], spec["duration_std"])),
              spec["duration_min"])
    mag = max(float(rng.normal(spec["magnitude_mean"], spec["magnitude_std"])), 0.0)
    return Disturbance(mag * spec["direction"], t0, dur)


def monte_carlo(mission, reference=None, overrides=None, runs_per_window=20,
                seed=0, threshold=0.1):
    """Run the mission's disturbance campaign for one controller setup.

    Each window gets `runs_per_window` runs with independently drawn pulse
    start, duration and magnitude. A run's error is the worst task position
    error over the mission's tasks, each read from the log row at that
    task's time; a run completes when every task lands within `threshold`
    meters. Draws are reproducible: run (w, i) uses SeedSequence([seed, w, i]).

    Returns:
        McResult with per-run records and per-window midpoint quartiles.
    """
    spec = _disturbance_spec(mission)
    mc_duration = spec["mc_duration"]
    tasks = [t for t in mission.tasks if t.time <= mc_duration + 1e-9]
    if not tasks:
        raise MissionValidationError("no task inside the campaign duration")

    baseline = run_closed_loop(mission, reference, overrides, None, mc_duration)

    def run_metrics(log):
        errs = [(log.task_err_pos[log.row_at(t.time)],
                 log.task_err_ori[log.row_at(t.time)]) for t in tasks]
        worst = max(errs, key=lambda e: e[0])
        return float(worst[0]), float(worst[1])

    base_err, _ = run_metrics(baseline)

    runs = []
    for wi, window in enumerate(spec["windows"]):
        for ri in range(runs_per_window):
            rng = np.random.default_rng(np.random.SeedSequence([seed, wi, ri]))
            dist = sample_disturbance(mission, window, rng)
            try:
                log = run_closed_loop(mission, reference, overrides, dist,
                                      mc_duration)
                err_pos, err_ori = run_metrics(log)
                effort = log.control_effort_vs(baseline)
            except UamocError:
                # a run the controller lost entirely still counts against
                # the campaign instead of aborting it
                err_pos, err_ori, effort = float("inf"), float("inf"), float("inf")
            runs.append(McRun(
                window=window, index=ri, t_start=dist.t_start,
                duration=dist.duration, magnitude=float(np.linalg.norm(dist.force)),
                err_pos=err_pos, err_ori=err_ori,
                effort_excess=effort,
                completed=err_pos <= threshold))

    summary = {}
    for window in spec["windows"]:
        errs = np.array([r.err_pos for r in runs if r.window == window])
        efforts = np.array([r.effort_excess for r in runs if r.window == window])
        q1, q2, q3 = np.percentile(errs, [25.0, 50.0, 75.0], method="midpoint")
        summary[window] = {
            "err_pos_q1": float(q1), "err_pos_median": float(q2),
            "err_pos_q3": float(q3),
            "effort_median": float(np.percentile(efforts, 50.0, method="midpoint")),
            "completion_rate": float(np.mean([r.completed for r in runs
                                              if r.window == window])),
        }
    return McResult(runs=runs, summary=summary, threshold=threshold,
                    baseline_err_pos=base_err)
