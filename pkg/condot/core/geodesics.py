"""
Conditional geodesics.
McCann interpolation of plans, per-entry velocity fields, Benamou-Brenier energy and
explicit Euler integration of the induced flow.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from config import Config
from condot.core.measures import DiscreteJointMeasure
from condot.core.ot_exact import Plan4, conditional_wasserstein, plan4_to_plan3, wasserstein
from condot.errors import CondotValidationError, VelocityCollisionError

logger = logging.getLogger(__name__)

# (t, ys, xs) -> (vy, vx)
VelocityField = Callable[[float, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True, eq=False)
class VelocitySample:
    """Interpolated atoms (one per plan entry) with their velocities."""
    t: float
    ys: np.ndarray
    xs: np.ndarray
    vy: np.ndarray
    vx: np.ndarray
    weights: np.ndarray

    def l2_norm_squared(self) -> float:
        """||v||^2 in L^2(mu_t)."""
        speed = np.sum(self.vy ** 2, axis=1) + np.sum(self.vx ** 2, axis=1)
        return float(self.weights @ speed)


@dataclass(frozen=True, eq=False)
class GeodesicPath:
    """The path t -> (e_t)_# alpha of a plan, evaluated at fixed times."""
    plan: Plan4
    times: Tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        for t in times:
            _check_time(t)
        object.__setattr__(self, "times", times)

    def measures(self) -> List[DiscreteJointMeasure]:
        return [interpolate(self.plan, t) for t in self.times]

    def velocities(self, tol: float = Config.GROUP_TOL) -> List[VelocitySample]:
        return [velocity_field(self.plan, t, tol) for t in self.times]


@dataclass(frozen=True, eq=False)
class TrajectoryFrame:
    """Particle positions and velocities at one Euler time."""
    t: float
    ys: np.ndarray
    xs: np.ndarray
    vy: np.ndarray
    vx: np.ndarray
    weights: np.ndarray


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise CondotValidationError(f"Interpolation time must lie in [0, 1], got {t}")


def _interpolated(plan: Plan4, t: float) -> Tuple[np.ndarray, np.ndarray]:
    y1, y2 = plan.source.ys[plan.rows], plan.target.ys[plan.cols]
    x1, x2 = plan.source.xs[plan.rows], plan.target.xs[plan.cols]
    xs = (1.0 - t) * x1 + t * x2
    if plan.y_diagonal:
        ys = y1.copy()
    else:
        ys = (1.0 - t) * y1 + t * y2
    return ys, xs


def interpolate(plan: Plan4, t: float) -> DiscreteJointMeasure:
    """mu_t = (e_t)_# alpha: one atom per plan entry, weighted by its mass.

    For y-diagonal plans the condition of each atom is carried unchanged.
    """
    _check_time(t)
    ys, xs = _interpolated(plan, t)
    return DiscreteJointMeasure(ys, xs, plan.masses)


def merge_entries(plan: Plan4, measure: DiscreteJointMeasure, by: str = "source") -> DiscreteJointMeasure:
    """Collapse per-entry atoms back onto source (or target) atom indices.

    Positions are taken from the first entry of each index, weights are summed.
    """
    if by not in ("source", "target"):
        raise CondotValidationError(f"merge_entries: by must be 'source' or 'target', got {by!r}")
    index = plan.rows if by == "source" else plan.cols
    endpoint = plan.source if by == "source" else plan.target
    n = endpoint.n_atoms
    _, first = np.unique(index, return_index=True)
    order = index[first]
    ys = np.array(endpoint.ys, copy=True)
    xs = np.array(endpoint.xs, copy=True)
    ys[order] = measure.ys[first]
    xs[order] = measure.xs[first]
    weights = np.bincount(index, weights=measure.weights, minlength=n)
    return DiscreteJointMeasure(ys, xs, weights)


def velocity_field(plan: Plan4, t: float, tol: float = Config.GROUP_TOL) -> VelocitySample:
    """Per-entry velocities (y_2, x_2) - (y_1, x_1) at the interpolated atoms.

    Raises:
        VelocityCollisionError: if two interpolated atoms coincide with different velocities
    """
    _check_time(t)
    ys, xs = _interpolated(plan, t)
    vx = plan.target.xs[plan.cols] - plan.source.xs[plan.rows]
    if plan.y_diagonal:
        vy = np.zeros_like(ys)
    else:
        vy = plan.target.ys[plan.cols] - plan.source.ys[plan.rows]

    if plan.n_entries > 1:
        positions = np.hstack([ys, xs])
        velocities = np.hstack([vy, vx])
        for i, j in cKDTree(positions).query_pairs(r=tol):
            if np.linalg.norm(velocities[i] - velocities[j]) > tol:
                raise VelocityCollisionError(
                    f"Entries {i} and {j} meet at t={t:g} with different velocities"
                )
    return VelocitySample(t=t, ys=ys, xs=xs, vy=vy, vx=vx, weights=plan.masses.copy())


def geodesic_identity_check(plan: Plan4, s: float, t: float, tol: float = Config.GROUP_TOL) -> float:
    """|W_{2,Y}(mu_s, mu_t) - |s - t| W_{2,Y}(mu_0, mu_1)| along a y-diagonal plan."""
    if not plan.y_diagonal:
        raise CondotValidationError("Geodesic identity needs a y-diagonal plan")
    _check_time(s)
    _check_time(t)
    endpoint, _ = conditional_wasserstein(plan.source, plan.target, 2.0, tol)
    between, _ = conditional_wasserstein(interpolate(plan, s), interpolate(plan, t), 2.0, tol)
    residual = abs(between - abs(s - t) * endpoint)
    logger.debug(f"Geodesic residual at (s={s:g}, t={t:g}): {residual:.3e}")
    return residual


def condition_geodesic_residuals(plan: Plan4, s: float, t: float,
                                 tol: float = Config.GROUP_TOL) -> np.ndarray:
    """Plain-W_2 geodesic residual of the interpolation inside every condition."""
    plan3 = plan4_to_plan3(plan, tol)
    residuals = []
    for g, (a, b) in enumerate(plan3.group_pairs):
        sel = plan3.group_ids == g
        src, tgt = plan3.source_groups[a], plan3.target_groups[b]
        weight = plan3.masses[sel] / plan3.masses[sel].sum()
        x1, x2 = src.xs[plan3.rows[sel]], tgt.xs[plan3.cols[sel]]
        flat = np.zeros((weight.size, 1))

        def at(time: float) -> DiscreteJointMeasure:
            return DiscreteJointMeasure(flat, (1.0 - time) * x1 + time * x2, weight)

        endpoint, _ = wasserstein(DiscreteJointMeasure(np.zeros((src.size, 1)), src.xs, src.conditional_weights),
                                  DiscreteJointMeasure(np.zeros((tgt.size, 1)), tgt.xs, tgt.conditional_weights))
        between, _ = wasserstein(at(s), at(t))
        residuals.append(abs(between - abs(s - t) * endpoint))
    return np.array(residuals)


def bb_energy(plan: Plan4) -> float:
    """Benamou-Brenier action int_0^1 ||v_t||^2_{L^2(mu_t)} dt along the plan.

    Velocities are constant along each entry, so the integral is sum_k m_k ||v_k||^2.
    """
    dx = plan.target.xs[plan.cols] - plan.source.xs[plan.rows]
    speed = np.sum(dx ** 2, axis=1)
    if not plan.y_diagonal:
        speed = speed + np.sum((plan.target.ys[plan.cols] - plan.source.ys[plan.rows]) ** 2, axis=1)
    return float(plan.masses @ speed)


class PlanVelocityField:
    """Lagrangian velocity of a plan, looked up at the particle positions."""

    def __init__(self, plan: Plan4, tol: float = Config.GROUP_TOL):
        self.plan = plan
        self.tol = tol

    def __call__(self, t: float, ys: np.ndarray, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sample = velocity_field(self.plan, t, self.tol)
        _, nearest = cKDTree(np.hstack([sample.ys, sample.xs])).query(np.hstack([ys, xs]))
        return sample.vy[nearest], sample.vx[nearest]


def euler_trajectory(field: Union[VelocityField, Plan4], initial: DiscreteJointMeasure,
                     steps: int) -> List[TrajectoryFrame]:
    """Explicit Euler integration of d phi/dt = v_t(phi_t) from t=0 to t=1.

    Returns ``steps + 1`` frames; the last frame carries the velocity used in the final step.
    """
    if steps < 1:
        raise CondotValidationError(f"Euler integration needs at least one step, got {steps}")
    if isinstance(field, Plan4):
        field = PlanVelocityField(field)
    dt = 1.0 / steps
    ys = np.array(initial.ys, copy=True)
    xs = np.array(initial.xs, copy=True)
    frames = []
    vy = vx = None
    for k in range(steps):
        t = k * dt
        vy, vx = field(t, ys, xs)
        frames.append(TrajectoryFrame(t=t, ys=ys, xs=xs, vy=vy, vx=vx, weights=initial.weights))
        ys = ys + dt * vy
        xs = xs + dt * vx
    frames.append(TrajectoryFrame(t=1.0, ys=ys, xs=xs, vy=vy, vx=vx, weights=initial.weights))
    return frames


def euler_flow(field: Union[VelocityField, Plan4], initial: DiscreteJointMeasure,
               steps: int) -> DiscreteJointMeasure:
    """Push ``initial`` through the flow of ``field`` with ``steps`` Euler steps."""
    last = euler_trajectory(field, initial, steps)[-1]
    return DiscreteJointMeasure(last.ys, last.xs, last.weights)


def trajectory_frame(frames: List[TrajectoryFrame]) -> pd.DataFrame:
    """Long table with columns t, atom, y*, x*, vy*, vx*."""
    tables = []
    for frame in frames:
        n, d = frame.ys.shape
        m = frame.xs.shape[1]
        columns = {"t": np.full(n, frame.t), "atom": np.arange(n)}
        for name, block, width in (("y", frame.ys, d), ("x", frame.xs, m), ("vy", frame.vy, d), ("vx", frame.vx, m)):
            for k in range(width):
                columns[f"{name}{k}"] = block[:, k]
        tables.append(pd.DataFrame(columns))
    return pd.concat(tables, ignore_index=True)


def dump_trajectory(frames: List[TrajectoryFrame], path: Union[str, Path]) -> None:
    trajectory_frame(frames).to_csv(path, index=False)
    logger.info(f"Trajectory with {len(frames)} frames written to {path}")
