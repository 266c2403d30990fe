"""
Exact discrete optimal transport.
Plain W_p, the conditional distance W_{p,Y}, the relaxed distance W_{p,beta}, plan conversions
and a numerical check of Kantorovich-Rubinstein duality per condition.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from config import Config
from condot.core.measures import (
    ConditionGroup,
    CostSpec,
    DiscreteJointMeasure,
    check_same_space,
    group_by_condition,
    match_groups,
)
from condot.errors import (
    CondotValidationError,
    DimensionMismatchError,
    InfeasibleTransportError,
    InvalidPlanError,
    LinearProgramError,
    MarginalMismatchError,
    UnsupportedExponentError,
)
from condot.guards.numeric_guards import PlanGuard, default_level
from condot.schemas import PlanDocument, PlanEntryDocument

logger = logging.getLogger(__name__)

PointSet = Union[DiscreteJointMeasure, Tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Plan4:
    """Sparse coupling between two joint measures.

    ``cost`` is the transport cost of the plan under the cost it was solved for
    (a p-th power). ``y_diagonal`` marks plans from the restricted set Gamma_Y^4.
    """

    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    source: DiscreteJointMeasure
    target: DiscreteJointMeasure
    y_diagonal: bool
    cost: float = float("nan")

    def __post_init__(self):
        for name, dtype in (("rows", np.int64), ("cols", np.int64), ("masses", np.float64)):
            array = np.array(getattr(self, name), dtype=dtype, copy=True).ravel()
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        PlanGuard(default_level()).require_plan(
            self.rows, self.cols, self.masses, self.source.weights, self.target.weights
        )
        if self.y_diagonal:
            shift = np.linalg.norm(self.source.ys[self.rows] - self.target.ys[self.cols], axis=1)
            if shift.size and shift.max() > Config.GROUP_TOL:
                raise InvalidPlanError(f"Plan flagged y-diagonal moves mass across conditions (max shift {shift.max():.3e})")

    @property
    def entries(self) -> List[Tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.rows, self.cols, self.masses)]

    @property
    def n_entries(self) -> int:
        return self.masses.shape[0]

    def to_document(self) -> PlanDocument:
        return PlanDocument(
            entries=[PlanEntryDocument(i=i, j=j, m=w) for i, j, w in self.entries],
            y_diagonal=self.y_diagonal,
            value=float(self.cost),
        )


@dataclass(frozen=True, eq=False)
class Plan3:
    """Coupling of the two conditionals per condition (the set Gamma_Y^3).

    Entry k moves ``masses[k]`` from atom ``rows[k]`` of source group ``group_ids[k]`` to
    atom ``cols[k]`` of the matched target group. ``group_pairs[g]`` holds the
    (source group, target group) indices of condition g.
    """

    group_ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    source_groups: Sequence[ConditionGroup]
    target_groups: Sequence[ConditionGroup]
    group_pairs: Sequence[Tuple[int, int]]
    source: DiscreteJointMeasure
    target: DiscreteJointMeasure

    def __post_init__(self):
        guard = PlanGuard(default_level())
        for g, (a, b) in enumerate(self.group_pairs):
            sel = self.group_ids == g
            src, tgt = self.source_groups[a], self.target_groups[b]
            guard.require_plan(
                self.rows[sel], self.cols[sel], self.masses[sel],
                src.weight * src.conditional_weights, tgt.weight * tgt.conditional_weights,
            )

    def transport_cost(self, p: float) -> float:
        """Sum of mass * ||x_1 - x_2||^p over all conditions."""
        total = 0.0
        for g, (a, b) in enumerate(self.group_pairs):
            sel = self.group_ids == g
            if not np.any(sel):
                continue
            x1 = self.source_groups[a].xs[self.rows[sel]]
            x2 = self.target_groups[b].xs[self.cols[sel]]
            total += float(np.sum(self.masses[sel] * np.linalg.norm(x1 - x2, axis=1) ** p))
        return total


@dataclass(frozen=True, eq=False)
class TransportResult:
    """Sparse optimal plan of a transportation problem and its value."""
    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray
    value: float


@dataclass(frozen=True, eq=False)
class ConditionPotential:
    """Kantorovich potential h(y, .) on the union of both conditional supports."""
    y: np.ndarray
    points: np.ndarray
    values: np.ndarray
    n_source: int
    weight: float
    dual_value: float

    @property
    def source_values(self) -> np.ndarray:
        return self.values[:self.n_source]

    @property
    def target_values(self) -> np.ndarray:
        return self.values[self.n_source:]

    def lipschitz_violation(self) -> float:
        """max(|h(x_k) - h(x_l)| - ||x_k - x_l||), zero or negative when feasible."""
        if self.values.size < 2:
            return 0.0
        dist = cdist(self.points, self.points)
        diff = np.abs(self.values[:, None] - self.values[None, :])
        return float(np.max(diff - dist))


@dataclass(frozen=True, eq=False)
class DualCertificate:
    """Per-condition potentials with the assembled dual value and the duality gap."""
    potentials: List[ConditionPotential]
    dual_value: float
    primal_value: float

    @property
    def gap(self) -> float:
        return abs(self.dual_value - self.primal_value)

    def lipschitz_violation(self) -> float:
        return max((pot.lipschitz_violation() for pot in self.potentials), default=0.0)


# ---------------------------------------------------------------------------
# Costs and solvers
# ---------------------------------------------------------------------------

def _split(points: PointSet) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(points, DiscreteJointMeasure):
        return points.ys, points.xs
    ys, xs = points
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return ys, xs


def _power_distance(a: np.ndarray, b: np.ndarray, p: float) -> np.ndarray:
    if p == 2:
        return cdist(a, b, "sqeuclidean")
    return cdist(a, b, "euclidean") ** p


def cost_matrix(points_a: PointSet, points_b: PointSet, spec: CostSpec) -> np.ndarray:
    """Dense table of d_beta^p between two point sets.

    Entry (i, j) is ||x_i - x_j||^p + beta ||y_i - y_j||^p. With ``spec.strict`` the
    cross-condition entries are +inf and the rest carry the x part only.
    """
    ys_a, xs_a = _split(points_a)
    ys_b, xs_b = _split(points_b)
    if ys_a.shape[1] != ys_b.shape[1] or xs_a.shape[1] != xs_b.shape[1]:
        raise DimensionMismatchError(
            f"Point sets live in different spaces: ({ys_a.shape[1]}, {xs_a.shape[1]}) vs ({ys_b.shape[1]}, {xs_b.shape[1]})"
        )
    cost = _power_distance(xs_a, xs_b, spec.p)
    if spec.strict:
        cross = cdist(ys_a, ys_b) > Config.GROUP_TOL
        cost = np.where(cross, np.inf, cost)
    elif spec.beta > 0:
        cost = cost + spec.beta * _power_distance(ys_a, ys_b, spec.p)
    return cost


def solve_assignment(cost: np.ndarray) -> Tuple[np.ndarray, float]:
    """Optimal assignment on a square table.

    Returns:
        Tuple of (permutation sigma, mean cost (1/n) sum_i c(i, sigma(i)))

    Raises:
        InfeasibleTransportError: if no finite perfect assignment exists
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DimensionMismatchError(f"Assignment needs a square table, got shape {cost.shape}")
    if np.any(np.isnan(cost)) or np.any(cost == -np.inf):
        raise InfeasibleTransportError("Assignment table contains NaN or -inf")
    try:
        rows, cols = linear_sum_assignment(cost)
    except ValueError as exc:
        logger.error(f"Assignment failed: {exc}")
        raise InfeasibleTransportError(f"No finite assignment exists: {exc}") from exc
    sigma = np.empty(cost.shape[0], dtype=np.int64)
    sigma[rows] = cols
    total = float(cost[rows, cols].mean())
    if not np.isfinite(total):
        raise InfeasibleTransportError("No finite assignment exists")
    return sigma, total


def solve_transport(mu_w: np.ndarray, nu_w: np.ndarray, cost: np.ndarray) -> TransportResult:
    """Exact transportation problem via the network simplex.

    Infinite entries are forbidden cells; the solver fails if mass would have to use one.
    """
    a = np.asarray(mu_w, dtype=np.float64)
    b = np.asarray(nu_w, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise DimensionMismatchError(f"Cost shape {cost.shape} does not match weights ({a.size}, {b.size})")
    if abs(a.sum() - b.sum()) > Config.PLAN_TOL or abs(a.sum() - 1.0) > Config.PLAN_TOL:
        raise InfeasibleTransportError(f"Mismatched totals: {a.sum()!r} vs {b.sum()!r}")
    if np.any(np.isnan(cost)):
        raise InfeasibleTransportError("Cost table contains NaN")

    forbidden = ~np.isfinite(cost)
    work = cost
    if forbidden.any():
        finite = cost[~forbidden]
        big = (float(finite.max()) if finite.size else 0.0) * (a.size + b.size) + 1.0
        work = np.where(forbidden, big, cost)

    plan, log = ot.emd(a, b / b.sum() * a.sum(), work, numItermax=10_000_000, log=True)
    if log.get("warning"):
        logger.warning(f"Network simplex reported: {log['warning']}")
    rows, cols = np.nonzero(plan > 0)
    masses = plan[rows, cols]
    if forbidden.any() and forbidden[rows, cols].any():
        raise InfeasibleTransportError("Mass has to flow through a forbidden (infinite-cost) cell")
    value = float(np.sum(masses * cost[rows, cols]))
    logger.debug(f"Transport solved: {a.size}x{b.size}, {masses.size} entries, value {value:.6g}")
    return TransportResult(rows=rows.astype(np.int64), cols=cols.astype(np.int64), masses=masses, value=value)


def _check_exponent(p: float) -> None:
    if float(p) not in Config.SOLVER_EXPONENTS:
        raise UnsupportedExponentError(f"Exact solvers support p in {Config.SOLVER_EXPONENTS}, got {p}")


def _solve_dense(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> TransportResult:
    """Assignment when both sides are uniform with equal counts, network simplex otherwise."""
    n = a.size
    uniform = (
        n == b.size
        and np.allclose(a, a[0], rtol=0, atol=Config.WEIGHT_TOL)
        and np.allclose(b, b[0], rtol=0, atol=Config.WEIGHT_TOL)
    )
    if uniform:
        sigma, _ = solve_assignment(cost)
        rows = np.arange(n, dtype=np.int64)
        return TransportResult(rows=rows, cols=sigma, masses=a.copy(), value=float(np.sum(a * cost[rows, sigma])))
    return solve_transport(a, b, cost)


def wasserstein(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, p: float = 2.0) -> Tuple[float, Plan4]:
    """Plain W_p between joint measures under the Euclidean norm on (y, x)."""
    _check_exponent(p)
    check_same_space(mu, nu)
    cost = _power_distance(mu.points, nu.points, p)
    result = _solve_dense(mu.weights, nu.weights, cost)
    plan = Plan4(result.rows, result.cols, result.masses, mu, nu, y_diagonal=False, cost=result.value)
    return result.value ** (1.0 / p), plan


def _resolve_p(spec: Union[CostSpec, float]) -> float:
    return spec.p if isinstance(spec, CostSpec) else float(spec)


def conditional_wasserstein(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure,
                            spec: Union[CostSpec, float] = 2.0,
                            tol: float = Config.GROUP_TOL) -> Tuple[float, Plan4]:
    """Conditional Wasserstein distance W_{p,Y} and its optimal y-diagonal plan.

    Solves one OT problem per condition and assembles alpha = sum_y P_Y(y) delta_y alpha_y.

    Returns:
        Tuple of (distance, Plan4 with y_diagonal set and cost = W_{p,Y}^p)
    """
    p = _resolve_p(spec)
    _check_exponent(p)
    check_same_space(mu, nu)
    groups_mu = group_by_condition(mu, tol)
    groups_nu = group_by_condition(nu, tol)
    pairs = match_groups(groups_mu, groups_nu, tol)
    if pairs is None:
        raise MarginalMismatchError("Measures do not share the condition marginal P_Y")

    rows, cols, masses = [], [], []
    total = 0.0
    for a, b in pairs:
        g_mu, g_nu = groups_mu[a], groups_nu[b]
        cost = _power_distance(g_mu.xs, g_nu.xs, p)
        result = _solve_dense(g_mu.conditional_weights, g_nu.conditional_weights, cost)
        rows.append(g_mu.indices[result.rows])
        cols.append(g_nu.indices[result.cols])
        masses.append(result.masses * g_mu.weight)
        total += g_mu.weight * result.value
        logger.debug(f"Condition {a}: {g_mu.size}x{g_nu.size} atoms, W_p^p = {result.value:.6g}")

    plan = Plan4(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(masses),
        mu, nu, y_diagonal=True, cost=total,
    )
    return total ** (1.0 / p), plan


def relaxed_wasserstein(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure,
                        spec: CostSpec) -> Tuple[float, Plan4]:
    """OT distance W_{p,beta} under d_beta^p over all couplings.

    For p = 2 this equals plain W_2 after scaling y by sqrt(beta).
    """
    if spec.strict:
        raise CondotValidationError("relaxed_wasserstein needs a finite beta; use conditional_wasserstein")
    _check_exponent(spec.p)
    check_same_space(mu, nu)
    cost = cost_matrix(mu, nu, spec)
    result = _solve_dense(mu.weights, nu.weights, cost)
    plan = Plan4(result.rows, result.cols, result.masses, mu, nu, y_diagonal=False, cost=result.value)
    return result.value ** (1.0 / spec.p), plan


def y_leakage(plan: Plan4, p: float = 2.0) -> float:
    """Mass-weighted p-th power of the condition displacement of a plan."""
    shift = np.linalg.norm(plan.source.ys[plan.rows] - plan.target.ys[plan.cols], axis=1)
    return float(np.sum(plan.masses * shift ** p))


def plan_x_cost(plan: Plan4, p: float = 2.0) -> float:
    """Sum of mass * ||x_1 - x_2||^p over the plan's entries."""
    shift = np.linalg.norm(plan.source.xs[plan.rows] - plan.target.xs[plan.cols], axis=1)
    return float(np.sum(plan.masses * shift ** p))


# ---------------------------------------------------------------------------
# 4-plan <-> 3-plan
# ---------------------------------------------------------------------------

def _local_positions(groups: Sequence[ConditionGroup], n_atoms: int) -> Tuple[np.ndarray, np.ndarray]:
    group_of = np.empty(n_atoms, dtype=np.int64)
    local_of = np.empty(n_atoms, dtype=np.int64)
    for g, group in enumerate(groups):
        group_of[group.indices] = g
        local_of[group.indices] = np.arange(group.size)
    return group_of, local_of


def plan4_to_plan3(plan: Plan4, tol: float = Config.GROUP_TOL) -> Plan3:
    """Rewrite a y-diagonal 4-plan as a 3-plan over the condition groups."""
    if not plan.y_diagonal:
        raise InvalidPlanError("Only y-diagonal plans have a 3-plan representation")
    groups_mu = group_by_condition(plan.source, tol)
    groups_nu = group_by_condition(plan.target, tol)
    pairs = match_groups(groups_mu, groups_nu, tol)
    if pairs is None:
        raise MarginalMismatchError("Plan endpoints do not share the condition marginal")
    partner = {a: b for a, b in pairs}
    condition_of = {a: g for g, (a, _) in enumerate(pairs)}

    src_group, src_local = _local_positions(groups_mu, plan.source.n_atoms)
    tgt_group, tgt_local = _local_positions(groups_nu, plan.target.n_atoms)
    a_ids = src_group[plan.rows]
    b_ids = tgt_group[plan.cols]
    expected = np.array([partner[a] for a in a_ids], dtype=np.int64)
    if np.any(expected != b_ids):
        raise InvalidPlanError("Plan pairs atoms from different conditions")

    return Plan3(
        group_ids=np.array([condition_of[a] for a in a_ids], dtype=np.int64),
        rows=src_local[plan.rows],
        cols=tgt_local[plan.cols],
        masses=plan.masses.copy(),
        source_groups=groups_mu,
        target_groups=groups_nu,
        group_pairs=pairs,
        source=plan.source,
        target=plan.target,
    )


def plan3_to_plan4(plan3: Plan3, p: float = 2.0) -> Plan4:
    """Lift a 3-plan to the y-diagonal 4-plan alpha = (y, x1, y, x2)."""
    rows = np.empty(plan3.masses.size, dtype=np.int64)
    cols = np.empty(plan3.masses.size, dtype=np.int64)
    for g, (a, b) in enumerate(plan3.group_pairs):
        sel = plan3.group_ids == g
        rows[sel] = plan3.source_groups[a].indices[plan3.rows[sel]]
        cols[sel] = plan3.target_groups[b].indices[plan3.cols[sel]]
    return Plan4(rows, cols, plan3.masses.copy(), plan3.source, plan3.target, y_diagonal=True,
                 cost=plan3.transport_cost(p))


# ---------------------------------------------------------------------------
# Duality
# ---------------------------------------------------------------------------

def _kantorovich_dual(x_source: np.ndarray, w_source: np.ndarray,
                      x_target: np.ndarray, w_target: np.ndarray) -> Tuple[np.ndarray, float]:
    """Maximize E_source h - E_target h over 1-Lipschitz h on the union of supports."""
    points = np.vstack([x_source, x_target])
    k = points.shape[0]
    if k > Config.MAX_LP_VARIABLES:
        raise LinearProgramError(f"Dual LP with {k} variables exceeds the limit of {Config.MAX_LP_VARIABLES}")
    objective = -np.concatenate([w_source, -w_target])
    dist = cdist(points, points)
    pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
    if not pairs:
        return np.zeros(k), 0.0
    a_ub = np.zeros((len(pairs), k))
    b_ub = np.empty(len(pairs))
    for r, (i, j) in enumerate(pairs):
        a_ub[r, i] = 1.0
        a_ub[r, j] = -1.0
        b_ub[r] = dist[i, j]
    # potentials are defined up to a constant; pin the first one
    bounds = [(0.0, 0.0)] + [(None, None)] * (k - 1)
    try:
        result = linprog(
            objective, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs-ds",
            options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
        )
    except ValueError as exc:
        logger.error(f"Dual LP setup failed: {exc}")
        raise LinearProgramError(f"Dual LP setup failed: {exc}") from exc
    if result.status != 0:
        logger.error(f"Dual LP failed: {result.message}")
        raise LinearProgramError(f"Dual LP failed: {result.message}")
    h = np.asarray(result.x, dtype=np.float64)
    value = float(w_source @ h[:x_source.shape[0]] - w_target @ h[x_source.shape[0]:])
    return h, value


def dual_certificate(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure,
                     tol: float = Config.GROUP_TOL) -> DualCertificate:
    """Per-condition Kantorovich-Rubinstein potentials certifying W_{1,Y}(mu, nu).

    The dual value sum_y P_Y(y) (E_{X|y} h - E_{Z|y} h) is compared with the primal value
    from conditional_wasserstein; the gap is exposed on the certificate.
    """
    check_same_space(mu, nu)
    groups_mu = group_by_condition(mu, tol)
    groups_nu = group_by_condition(nu, tol)
    pairs = match_groups(groups_mu, groups_nu, tol)
    if pairs is None:
        raise MarginalMismatchError("Measures do not share the condition marginal P_Y")

    potentials = []
    dual_total = 0.0
    for a, b in pairs:
        g_mu, g_nu = groups_mu[a], groups_nu[b]
        h, value = _kantorovich_dual(g_mu.xs, g_mu.conditional_weights, g_nu.xs, g_nu.conditional_weights)
        potentials.append(ConditionPotential(
            y=g_mu.y, points=np.vstack([g_mu.xs, g_nu.xs]), values=h,
            n_source=g_mu.size, weight=g_mu.weight, dual_value=value,
        ))
        dual_total += g_mu.weight * value

    primal, _ = conditional_wasserstein(mu, nu, 1.0, tol)
    certificate = DualCertificate(potentials=potentials, dual_value=dual_total, primal_value=primal)
    logger.debug(f"Dual certificate: dual {dual_total:.10g}, primal {primal:.10g}, gap {certificate.gap:.3e}")
    return certificate
