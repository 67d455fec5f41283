"""Command line entry points for mission planning and closed-loop runs.

Subcommands:
  to           solve a mission's trajectory optimization, write the plan CSV
  mpc          run the mission closed loop under one controller strategy
  montecarlo   run the mission's disturbance campaign and summarize it
  validate     parse and cross-check a mission or model file

Exit codes: 0 success, 1 validation error, 2 solver failure,
3 campaign completion below 90%. Set UAMOC_LOG_LEVEL to tune verbosity.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import model as _model
from . import ocp as _ocp
from . import mpc as _mpc
from . import sim as _sim
from .errors import MissionValidationError, ModelConfigError, SolverFailure
from .solver import FddpSolver, SolverSettings

log = logging.getLogger("uamoc")

EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_CAMPAIGN = 3


def _setup_logging():
    level = os.environ.get("UAMOC_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _overrides(args):
    out = {}
    if getattr(args, "controller", None):
        out["strategy"] = args.controller
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise MissionValidationError(f"--set expects key=value, got '{item}'")
        key, val = item.split("=", 1)
        try:
            out[key] = float(val)
        except ValueError:
            out[key] = val
    return out


def _plan_mission(mission, max_iters=300):
    problem = mission.build_problem()
    # plans are consumed as dynamically feasible references: close the gaps
    # to machine level so an open-loop rollout reproduces the written states
    settings = SolverSettings(max_iters=max_iters, gap_tol=1e-13)
    res = FddpSolver(problem, settings).solve()
    log.info("plan: cost=%.6f iterations=%d grad=%.3e gap=%.3e stop=%s",
             res.cost, res.iterations, res.grad_norm, res.gap_norm, res.stop_reason)
    # the solver works in pre-squash variables; references carry real controls
    return res, problem.controls(res.U)


def _reference_for(mission, args, strategy):
    if getattr(args, "reference", None):
        return _mpc.ReferenceTrajectory.from_csv(args.reference,
                                                 mission.model.n_joints)
    needs_ref = strategy in ("rail", "carrot")
    if getattr(args, "generate", False) or needs_ref:
        log.info("generating reference by solving the mission open loop")
        res, U = _plan_mission(mission)
        if not res.converged:
            raise SolverFailure(
                f"reference solve did not converge ({res.stop_reason})")
        return _mpc.ReferenceTrajectory.from_solution(mission, res.X, U)
    return None


def _task_report(mission, log_run):
    lines = []
    for task in mission.tasks:
        if task.time > log_run.times[-1] + 1e-9:
            continue
        k = log_run.row_at(task.time)
        lines.append((task.name, task.time, float(log_run.task_err_pos[k]),
                      float(log_run.task_err_ori[k])))
    return lines


def cmd_to(args):
    mission = _ocp.load_mission(args.mission, dt_override=args.dt_override)
    t0 = time.perf_counter()
    res, U = _plan_mission(mission, max_iters=args.max_iters)
    wall = time.perf_counter() - t0
    ref = _mpc.ReferenceTrajectory.from_solution(mission, res.X, U)
    out = args.out or f"{mission.name}_plan.csv"
    ref.to_csv(out)
    print(f"mission {mission.name}: nodes={mission.n_nodes} cost={res.cost:.6f} "
          f"iterations={res.iterations} converged={res.converged} wall={wall:.1f}s")
    print(f"plan written to {out}")
    if not res.converged:
        print(f"solver stopped without convergence: {res.stop_reason}",
              file=sys.stderr)
        return EXIT_SOLVER
    return 0


def cmd_mpc(args):
    mission = _ocp.load_mission(args.mission, dt_override=args.dt_override)
    overrides = _overrides(args)
    strategy = overrides.get("strategy", mission.controller["strategy"])
    reference = _reference_for(mission, args, strategy)
    disturbance = None
    if args.disturb:
        vals = [float(v) for v in args.disturb.split(",")]
        if len(vals) != 5:
            raise MissionValidationError(
                "--disturb expects t_start,duration,fx,fy,fz")
        disturbance = _sim.Disturbance(vals[2:5], vals[0], vals[1])
    t0 = time.perf_counter()
    run = _sim.run_closed_loop(mission, reference, overrides, disturbance,
                               duration=args.duration)
    wall = time.perf_counter() - t0
    out = args.out or f"{mission.name}_{strategy}.csv"
    run.to_csv(out)
    sim_s = float(run.times[-1])
    print(f"mission {mission.name} [{strategy}]: simulated {sim_s:.2f}s "
          f"in {wall:.1f}s wall, {run.failures} failed solves")
    for name, t_task, ep, eo in _task_report(mission, run):
        print(f"  task {name} @ {t_task:.2f}s: pos_err={ep:.4f} m ori_err={eo:.4f} rad")
    print(f"log written to {out}")
    if args.perf:
        with open(args.perf, "w") as f:
            json.dump({"wall_s": wall, "sim_s": sim_s,
                       "realtime_factor": sim_s / wall if wall > 0 else 0.0,
                       "failures": run.failures}, f, indent=2)
        print(f"performance summary written to {args.perf}")
    return 0


def cmd_montecarlo(args):
    mission = _ocp.load_mission(args.mission, dt_override=args.dt_override)
    overrides = _overrides(args)
    strategy = overrides.get("strategy", mission.controller["strategy"])
    reference = _reference_for(mission, args, strategy)
    res = _sim.monte_carlo(mission, reference, overrides,
                           runs_per_window=args.runs, seed=args.seed,
                           threshold=args.threshold)
    doc = {
        "mission": mission.name,
        "strategy": strategy,
        "seed": args.seed,
        "runs_per_window": args.runs,
        "threshold": res.threshold,
        "baseline_err_pos": res.baseline_err_pos,
        "completion_rate": res.completion_rate,
        "summary": res.summary,
        "runs": [asdict(r) for r in res.runs],
    }
    out = args.out or f"{mission.name}_{strategy}_mc.json"
    with open(out, "w") as f:
        json.dump(doc, f, indent=2)
    print(f"mission {mission.name} [{strategy}]: {len(res.runs)} runs, "
          f"completion {100.0 * res.completion_rate:.1f}%")
    for window, s in res.summary.items():
        print(f"  {window}: median={s['err_pos_median']:.4f} m "
              f"IQR=[{s['err_pos_q1']:.4f}, {s['err_pos_q3']:.4f}] "
              f"completion={100.0 * s['completion_rate']:.0f}%")
    print(f"results written to {out}")
    if res.completion_rate < 0.9:
        print("campaign completion below 90%", file=sys.stderr)
        return EXIT_CAMPAIGN
    return 0


def cmd_validate(args):
    if args.model:
        m = _model.load_model(_ocp.resolve_config(args.model, "models"))
        print(f"model {m.name}: {m.n_joints} joints, {m.nu} controls, "
              f"nx={m.nx} ndx={m.ndx}")
        return 0
    mission = _ocp.load_mission(args.mission, dt_override=args.dt_override)
    mission.build_problem()  # builds every node's cost stack
    cfg = _mpc.MpcConfig.from_mission(mission)
    print(f"mission {mission.name}: {mission.n_nodes} nodes over "
          f"{mission.duration:.3f}s at dt={mission.dt}")
    print(f"  model {mission.model.name}"
          + (f" + payload variant" if mission.payload_model else ""))
    print(f"  phases: " + ", ".join(
        f"{p.name}({'task' if p.instantaneous else f'{p.duration:.2f}s'})"
        for p in mission.phases))
    print(f"  tasks: " + (", ".join(
        f"{t.name}@{t.time:.2f}s" for t in mission.tasks) or "none"))
    print(f"  controller: {cfg.strategy}, horizon {1000.0 * cfg.horizon:.0f} ms")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="uamoc",
        description="Trajectory optimization and MPC for aerial manipulators.")
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--mission", required=True,
                        help="mission YAML path or bundled mission name")
    common.add_argument("--dt-override", type=float, default=None,
                        help="override the mission's transcription step")

    ctrl = argparse.ArgumentParser(add_help=False)
    ctrl.add_argument("--controller", choices=("weighted", "rail", "carrot"),
                      default=None, help="override the mission's strategy")
    ctrl.add_argument("--reference", default=None,
                      help="reference plan CSV (as written by 'to')")
    ctrl.add_argument("--generate", action="store_true",
                      help="solve the mission open loop to build the reference")
    ctrl.add_argument("--set", action="append", metavar="KEY=VALUE",
                      help="override one controller setting")

    p = sub.add_parser("to", parents=[common],
                       help="solve the mission's trajectory optimization")
    p.add_argument("--out", default=None, help="output plan CSV")
    p.add_argument("--max-iters", type=int, default=300)
    p.set_defaults(func=cmd_to)

    p = sub.add_parser("mpc", parents=[common, ctrl],
                       help="run the mission closed loop")
    p.add_argument("--out", default=None, help="output log CSV")
    p.add_argument("--perf", default=None, help="write wall-clock summary JSON")
    p.add_argument("--duration", type=float, default=None,
                   help="simulated seconds (default: mission setting)")
    p.add_argument("--disturb", default=None, metavar="T0,DUR,FX,FY,FZ",
                   help="apply one world-frame force pulse at the base")
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("montecarlo", parents=[common, ctrl],
                       help="run the mission's disturbance campaign")
    p.add_argument("--out", default=None, help="output results JSON")
    p.add_argument("--runs", type=int, default=20, help="runs per window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.1,
                   help="task completion radius in meters")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("validate", help="check a mission or model file")
    p.add_argument("--mission", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--dt-override", type=float, default=None)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "validate" and not (args.mission or args.model):
        ap.error("validate needs --mission or --model")
    try:
        return args.func(args)
    except (MissionValidationError, ModelConfigError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverFailure as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
