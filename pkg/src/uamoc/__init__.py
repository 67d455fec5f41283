"""Torque-level trajectory optimization and receding-horizon control
for multirotor aerial manipulators.

The toolkit covers the full pipeline: rigid-body models of a multirotor
base with an optional serial arm (including point contacts and payload
variants), mission descriptions as phased cost stacks over a fixed
transcription grid, a feasibility-driven differential dynamic programming
solver over squashed controls, three receding-horizon strategies, and a
deterministic closed-loop simulator with disturbance campaigns.
"""

from .errors import (
    AngleNearPi,
    ContactRankError,
    MissionValidationError,
    ModelConfigError,
    NoProgress,
    NonPositiveQuu,
    SolverFailure,
    StaleSolution,
    UamocError,
)
from .model import (
    RobotModel,
    frame_placement,
    gravity_compensation,
    load_model,
    step,
    step_derivatives,
)
from .ocp import Mission, OcpProblem, load_mission, resolve_config
from .solver import FddpSolver, SolverResult, SolverSettings, squash, unsquash
from .mpc import MpcConfig, MpcController, ReferenceTrajectory
from .sim import Disturbance, McResult, SimLog, monte_carlo, run_closed_loop, task_error

__version__ = "0.1.0"

__all__ = [
    "AngleNearPi", "ContactRankError", "MissionValidationError",
    "ModelConfigError", "NoProgress", "NonPositiveQuu", "SolverFailure",
    "StaleSolution", "UamocError",
    "RobotModel", "frame_placement", "gravity_compensation", "load_model",
    "step", "step_derivatives",
    "Mission", "OcpProblem", "load_mission", "resolve_config",
    "FddpSolver", "SolverResult", "SolverSettings", "squash", "unsquash",
    "MpcConfig", "MpcController", "ReferenceTrajectory",
    "Disturbance", "McResult", "SimLog", "monte_carlo", "run_closed_loop",
    "task_error",
    "__version__",
]
