"""
Input guards for the condot toolkit.
Validate measures, plans and training batches before they reach a solver.
"""

import logging
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from config import Config
from condot.errors import (
    BatchTooLargeError,
    DimensionMismatchError,
    InvalidMeasureError,
    InvalidPlanError,
)

logger = logging.getLogger(__name__)


class GuardLevel(Enum):
    """Validation levels."""
    RELAXED = "relaxed"
    STANDARD = "standard"
    STRICT = "strict"


class MeasureGuard:
    """Guard for weighted atom arrays of a discrete joint measure."""

    def __init__(self, level: GuardLevel = GuardLevel.STANDARD, weight_tol: float = Config.WEIGHT_TOL):
        """Initialize the measure guard.

        Args:
            level: Level of validation to apply
            weight_tol: Allowed deviation of the total mass from one
        """
        self.level = level
        self.weight_tol = weight_tol

    def validate_measure(self, ys: np.ndarray, xs: np.ndarray, weights: np.ndarray) -> Tuple[bool, str]:
        """Validate the arrays of a measure.

        Args:
            ys: Condition vectors, shape (n, d)
            xs: State vectors, shape (n, m)
            weights: Atom weights, shape (n,)

        Returns:
            Tuple of (is_valid, reason)
        """
        if ys.ndim != 2 or xs.ndim != 2 or weights.ndim != 1:
            return False, "ys and xs must be 2-D and weights 1-D"
        if ys.shape[0] < 1:
            return False, "A measure needs at least one atom"
        if not (ys.shape[0] == xs.shape[0] == weights.shape[0]):
            return False, f"Atom count mismatch: {ys.shape[0]} ys, {xs.shape[0]} xs, {weights.shape[0]} weights"

        if self.level == GuardLevel.RELAXED:
            return True, "Shapes are consistent"

        if np.any(weights < 0):
            return False, "Negative weight detected"
        total = float(np.sum(weights))
        if abs(total - 1.0) > self.weight_tol:
            return False, f"Weights sum to {total!r}, not 1"

        if self.level == GuardLevel.STRICT:
            if not (np.all(np.isfinite(ys)) and np.all(np.isfinite(xs)) and np.all(np.isfinite(weights))):
                return False, "Non-finite coordinate or weight detected"

        return True, "Measure is valid"

    def require_measure(self, ys: np.ndarray, xs: np.ndarray, weights: np.ndarray) -> None:
        is_valid, reason = self.validate_measure(ys, xs, weights)
        if not is_valid:
            logger.error(f"Measure validation failed: {reason}")
            if "mismatch" in reason or "2-D" in reason:
                raise DimensionMismatchError(reason)
            raise InvalidMeasureError(reason)


class PlanGuard:
    """Guard for sparse couplings between two weight vectors."""

    def __init__(self, level: GuardLevel = GuardLevel.STANDARD, plan_tol: float = Config.PLAN_TOL):
        """Initialize the plan guard.

        Args:
            level: Level of validation to apply
            plan_tol: Allowed marginal violation
        """
        self.level = level
        self.plan_tol = plan_tol

    def validate_plan(
        self,
        rows: np.ndarray,
        cols: np.ndarray,
        masses: np.ndarray,
        source_weights: np.ndarray,
        target_weights: np.ndarray,
    ) -> Tuple[bool, str]:
        """Validate the entries of a plan against both marginals.

        Args:
            rows: Source atom index per entry
            cols: Target atom index per entry
            masses: Mass per entry
            source_weights: Weights of the source measure
            target_weights: Weights of the target measure

        Returns:
            Tuple of (is_valid, reason)
        """
        if not (rows.shape == cols.shape == masses.shape):
            return False, "Entry arrays must have equal length"
        if rows.size and (rows.min() < 0 or rows.max() >= source_weights.size):
            return False, "Source index out of range"
        if cols.size and (cols.min() < 0 or cols.max() >= target_weights.size):
            return False, "Target index out of range"

        if self.level == GuardLevel.RELAXED:
            return True, "Plan indices are consistent"

        if np.any(masses <= 0):
            return False, "Plan entries must carry positive mass"
        row_sums = np.bincount(rows, weights=masses, minlength=source_weights.size)
        col_sums = np.bincount(cols, weights=masses, minlength=target_weights.size)
        row_err = float(np.max(np.abs(row_sums - source_weights)))
        col_err = float(np.max(np.abs(col_sums - target_weights)))
        if row_err > self.plan_tol:
            return False, f"Row sums deviate from source weights by {row_err:.3e}"
        if col_err > self.plan_tol:
            return False, f"Column sums deviate from target weights by {col_err:.3e}"

        return True, "Plan is valid"

    def require_plan(self, rows, cols, masses, source_weights, target_weights) -> None:
        is_valid, reason = self.validate_plan(rows, cols, masses, source_weights, target_weights)
        if not is_valid:
            logger.error(f"Plan validation failed: {reason}")
            raise InvalidPlanError(reason)


class BatchGuard:
    """Guard for minibatches fed to exact couplings."""

    def __init__(self, max_size: int = Config.MAX_ASSIGNMENT_SIZE):
        self.max_size = max_size

    def validate_batch(self, z: np.ndarray, y: np.ndarray, x: np.ndarray, needs_exact: bool = False) -> Tuple[bool, str]:
        """Validate a (z, y, x) minibatch.

        Returns:
            Tuple of (is_valid, reason)
        """
        if z.ndim != 2 or y.ndim != 2 or x.ndim != 2:
            return False, "Batch arrays must be 2-D"
        if not (z.shape[0] == y.shape[0] == x.shape[0]):
            return False, "Batch arrays must share the batch size"
        if z.shape[0] < 1:
            return False, "Empty batch"
        if z.shape[1] != x.shape[1]:
            return False, f"Noise dim {z.shape[1]} differs from state dim {x.shape[1]}"
        if needs_exact and z.shape[0] > self.max_size:
            return False, f"Batch of {z.shape[0]} exceeds exact assignment limit {self.max_size}"
        return True, "Batch is valid"

    def require_batch(self, z, y, x, needs_exact: bool = False) -> None:
        is_valid, reason = self.validate_batch(z, y, x, needs_exact)
        if not is_valid:
            logger.error(f"Batch validation failed: {reason}")
            if "exceeds" in reason:
                raise BatchTooLargeError(reason)
            raise DimensionMismatchError(reason)


def default_level(name: Optional[str] = None) -> GuardLevel:
    """Resolve a guard level from its name (defaults to the configured one)."""
    return GuardLevel((name or Config.GUARD_LEVEL).lower())
