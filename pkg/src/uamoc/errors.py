"""Exception types shared across the package."""


class UamocError(Exception):
    """Base class for all package errors."""


class AngleNearPi(UamocError):
    """Rotation logarithm requested within 1e-6 rad of the pi branch cut."""


class ModelConfigError(UamocError):
    """Robot model document is malformed or physically inconsistent."""


class MissionValidationError(UamocError):
    """Mission document is malformed or inconsistent with its model."""


class ContactRankError(UamocError):
    """Contact Jacobian is rank deficient; the KKT system has no unique solution."""


class SolverFailure(UamocError):
    """Trajectory optimization did not produce a usable iterate."""


class NonPositiveQuu(SolverFailure):
    """Control Hessian stayed indefinite at the regularization ceiling."""


class NoProgress(SolverFailure):
    """Line search could not find an acceptable step at any length."""


class StaleSolution(UamocError):
    """Feedback requested against a solution older than one controller period."""
