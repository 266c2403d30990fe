"""
Exception hierarchy for the condot toolkit.
Validation failures map to CLI exit code 2, numerical failures to exit code 1.
"""

from typing import Optional


class CondotError(Exception):
    """Base error carrying a category and a suggestion for the caller."""

    exit_code = 1
    error_type = "condot"
    default_suggestion = "Check the inputs and rerun with --verbose for details."

    def __init__(self, message: str, suggestion: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.suggestion = suggestion or self.default_suggestion


class CondotValidationError(CondotError):
    exit_code = 2
    error_type = "validation"


class CondotNumericalError(CondotError):
    exit_code = 1
    error_type = "numerical"


class GroupingAmbiguityError(CondotValidationError):
    error_type = "grouping"
    default_suggestion = "Lower the grouping tolerance or separate the condition values."


class MarginalMismatchError(CondotValidationError):
    error_type = "marginal"
    default_suggestion = "Both measures must share the same condition marginal P_Y."


class DimensionMismatchError(CondotValidationError):
    error_type = "dimension"
    default_suggestion = "Make sure both point sets live in the same product space."


class InvalidMeasureError(CondotValidationError):
    error_type = "measure"
    default_suggestion = "Weights must be nonnegative and sum to one."


class InvalidPlanError(CondotValidationError):
    error_type = "plan"
    default_suggestion = "Plans must have matching marginals; some operations need a y-diagonal plan."


class UnsupportedExponentError(CondotValidationError):
    error_type = "exponent"
    default_suggestion = "Exact solvers support p in {1, 2}."


class BatchTooLargeError(CondotValidationError):
    error_type = "batch"
    default_suggestion = "Reduce the coupling batch size (exact assignment is limited)."


class ConfigValidationError(CondotValidationError):
    error_type = "config"
    default_suggestion = "Run `condot <command> --print-defaults` to see the accepted keys."


class InfeasibleTransportError(CondotNumericalError):
    error_type = "infeasible"
    default_suggestion = "Check that both weight vectors sum to one and that a finite plan exists."


class LinearProgramError(CondotNumericalError):
    error_type = "linear_program"
    default_suggestion = "The dual LP failed; try a smaller or non-degenerate instance."


class SinkhornNotConvergedError(CondotNumericalError):
    error_type = "sinkhorn"
    default_suggestion = "Increase max_iter or epsilon."


class VelocityCollisionError(CondotNumericalError):
    error_type = "collision"
    default_suggestion = "Interpolated atoms collide with different velocities; pick another time."


class NonFiniteLossError(CondotNumericalError):
    error_type = "training"
    default_suggestion = "Lower the learning rate or enable gradient clipping."


class ParticleFlowAbortedError(CondotNumericalError):
    error_type = "particle_flow"
    default_suggestion = "Increase epsilon or the Sinkhorn iteration limit."

    def __init__(self, message: str, partial_result=None, suggestion: Optional[str] = None):
        super().__init__(message, suggestion)
        self.partial_result = partial_result
