"""
Discrete joint measures on the product space A x B.
Grouping by condition (the discrete disintegration), cost specifications and test-instance generation.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from config import Config
from condot.errors import DimensionMismatchError, GroupingAmbiguityError, InvalidMeasureError
from condot.guards.numeric_guards import MeasureGuard, default_level
from condot.schemas import AtomDocument, MeasureDocument

logger = logging.getLogger(__name__)


def _frozen(array, ndim: int) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class DiscreteJointMeasure:
    """Weighted atoms (y_i, x_i) with y in R^d and x in R^m.

    Duplicate atoms are allowed and never merged. Arrays are read-only.
    """

    ys: np.ndarray
    xs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ys", _frozen(self.ys, 2))
        object.__setattr__(self, "xs", _frozen(self.xs, 2))
        object.__setattr__(self, "weights", _frozen(self.weights, 1))
        MeasureGuard(default_level()).require_measure(self.ys, self.xs, self.weights)

    @classmethod
    def uniform(cls, ys, xs) -> "DiscreteJointMeasure":
        n = np.asarray(xs).shape[0]
        return cls(ys, xs, np.full(n, 1.0 / n))

    @classmethod
    def from_atoms(cls, atoms: Sequence[Tuple[Sequence[float], Sequence[float]]],
                   weights: Optional[Sequence[float]] = None) -> "DiscreteJointMeasure":
        """Build a measure from a list of (y, x) pairs (uniform weights by default)."""
        ys = np.array([np.atleast_1d(y) for y, _ in atoms], dtype=np.float64)
        xs = np.array([np.atleast_1d(x) for _, x in atoms], dtype=np.float64)
        if weights is None:
            return cls.uniform(ys, xs)
        return cls(ys, xs, np.asarray(weights, dtype=np.float64))

    @property
    def n_atoms(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.ys.shape[1]

    @property
    def m(self) -> int:
        return self.xs.shape[1]

    @property
    def points(self) -> np.ndarray:
        """Atoms as rows of the concatenated (y, x) vector."""
        return np.hstack([self.ys, self.xs])

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n_atoms, rtol=0.0, atol=Config.WEIGHT_TOL))

    def to_document(self) -> MeasureDocument:
        atoms = [
            AtomDocument(y=self.ys[i].tolist(), x=self.xs[i].tolist(), w=float(self.weights[i]))
            for i in range(self.n_atoms)
        ]
        return MeasureDocument(d=self.d, m=self.m, atoms=atoms)

    @classmethod
    def from_document(cls, document: MeasureDocument) -> "DiscreteJointMeasure":
        ys = np.array([a.y for a in document.atoms], dtype=np.float64).reshape(-1, document.d)
        xs = np.array([a.x for a in document.atoms], dtype=np.float64).reshape(-1, document.m)
        ws = np.array([a.w for a in document.atoms], dtype=np.float64)
        return cls(ys, xs, ws)


@dataclass(frozen=True, eq=False)
class ConditionGroup:
    """One condition y with its P_Y mass and the conditional P_{X|Y=y}.

    ``indices`` are the positions of the member atoms in the grouped measure.
    """

    y: np.ndarray
    weight: float
    xs: np.ndarray
    conditional_weights: np.ndarray
    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def conditional(self) -> List[Tuple[np.ndarray, float]]:
        return [(self.xs[k], float(self.conditional_weights[k])) for k in range(self.size)]


@dataclass(frozen=True)
class CostSpec:
    """Exponent p and relaxation weight beta of d_beta^p.

    ``strict`` encodes beta = infinity: cross-condition pairs are forbidden.
    """

    p: float = 2.0
    beta: float = 0.0
    strict: bool = False

    def __post_init__(self):
        if self.p < 1:
            raise InvalidMeasureError(f"Cost exponent p={self.p} must be >= 1")
        if self.beta < 0 or np.isnan(self.beta):
            raise InvalidMeasureError(f"Relaxation weight beta={self.beta} must be >= 0")


def group_by_condition(mu: DiscreteJointMeasure, tol: float = Config.GROUP_TOL) -> List[ConditionGroup]:
    """Split a measure into condition groups (discrete disintegration).

    Each group is represented by the first atom that opened it; an atom joins the group
    whose representative lies within ``tol``. Groups are ordered by first appearance.

    Args:
        mu: Measure to group
        tol: Euclidean tolerance on condition vectors

    Returns:
        List of condition groups

    Raises:
        GroupingAmbiguityError: if two representatives lie within 2 * tol
    """
    if tol < 0:
        raise InvalidMeasureError(f"Grouping tolerance must be nonnegative, got {tol}")

    tree = cKDTree(mu.ys)
    labels = np.full(mu.n_atoms, -1, dtype=np.int64)
    representatives: List[int] = []
    for i in range(mu.n_atoms):
        if labels[i] >= 0:
            continue
        group_id = len(representatives)
        representatives.append(i)
        neighbours = np.asarray(tree.query_ball_point(mu.ys[i], r=tol), dtype=np.int64)
        free = neighbours[labels[neighbours] < 0]
        labels[free] = group_id

    if len(representatives) > 1:
        rep_tree = cKDTree(mu.ys[representatives])
        close = rep_tree.query_pairs(r=2 * tol)
        if close:
            a, b = sorted(close)[0]
            raise GroupingAmbiguityError(
                f"Condition representatives {representatives[a]} and {representatives[b]} "
                f"lie within 2*tol={2 * tol:g} of each other"
            )

    groups = []
    for group_id, rep in enumerate(representatives):
        members = np.flatnonzero(labels == group_id)
        member_weights = mu.weights[members]
        total = float(member_weights.sum())
        if total > 0:
            conditional = member_weights / total
        else:
            conditional = np.full(members.size, 1.0 / members.size)
        conditional.setflags(write=False)
        members.setflags(write=False)
        groups.append(ConditionGroup(
            y=mu.ys[rep],
            weight=total,
            xs=mu.xs[members],
            conditional_weights=conditional,
            indices=members,
        ))

    logger.debug(f"Grouped {mu.n_atoms} atoms into {len(groups)} conditions")
    return groups


def flatten_groups(groups: Sequence[ConditionGroup], n_atoms: int, d: int, m: int) -> DiscreteJointMeasure:
    """Rebuild a measure from its groups (weight * conditional weight per atom)."""
    ys = np.empty((n_atoms, d))
    xs = np.empty((n_atoms, m))
    ws = np.empty(n_atoms)
    for group in groups:
        ys[group.indices] = group.y
        xs[group.indices] = group.xs
        ws[group.indices] = group.weight * group.conditional_weights
    return DiscreteJointMeasure(ys, xs, ws)


def match_groups(groups_mu: Sequence[ConditionGroup], groups_nu: Sequence[ConditionGroup],
                 tol: float = Config.GROUP_TOL) -> Optional[List[Tuple[int, int]]]:
    """Pair the groups of two groupings with matching (y, weight).

    Returns:
        List of (index in groups_mu, index in groups_nu), or None if the marginals differ
    """
    if len(groups_mu) != len(groups_nu):
        return None
    if groups_mu and groups_mu[0].y.shape != groups_nu[0].y.shape:
        return None
    weight_tol = max(tol, Config.WEIGHT_TOL)
    tree = cKDTree(np.array([g.y for g in groups_nu]))
    pairs = []
    taken = set()
    for a, group in enumerate(groups_mu):
        dist, b = tree.query(group.y)
        if dist > tol or b in taken:
            return None
        if abs(group.weight - groups_nu[b].weight) > weight_tol:
            return None
        taken.add(int(b))
        pairs.append((a, int(b)))
    return pairs


def same_condition_marginal(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure,
                            tol: float = Config.GROUP_TOL) -> bool:
    """True iff both measures have the same condition marginal P_Y (within tol)."""
    if mu.d != nu.d:
        return False
    return match_groups(group_by_condition(mu, tol), group_by_condition(nu, tol), tol) is not None


def rescale_condition(mu: DiscreteJointMeasure, beta: float, p: float = 2.0) -> DiscreteJointMeasure:
    """Scale the condition component by beta^(1/p)."""
    return DiscreteJointMeasure(mu.ys * beta ** (1.0 / p), mu.xs, mu.weights)


def random_measure_on_conditions(rng: np.random.Generator, condition_points: np.ndarray,
                                 n_per_condition: int, m: int) -> DiscreteJointMeasure:
    """Uniform measure with ``n_per_condition`` standard-normal x atoms at each condition point."""
    condition_points = np.atleast_2d(condition_points)
    ys = np.repeat(condition_points, n_per_condition, axis=0)
    xs = rng.standard_normal((ys.shape[0], m))
    return DiscreteJointMeasure.uniform(ys, xs)


def random_joint_instance(seed: int, d: int, m: int, n_conditions: int,
                          n_per_condition: int) -> Tuple[DiscreteJointMeasure, DiscreteJointMeasure]:
    """Two measures sharing a uniform condition marginal on ``n_conditions`` points.

    Deterministic given the seed.
    """
    if min(d, m, n_conditions, n_per_condition) < 1:
        raise InvalidMeasureError("All counts must be >= 1")
    rng = np.random.default_rng(seed)
    condition_points = rng.standard_normal((n_conditions, d))
    mu = random_measure_on_conditions(rng, condition_points, n_per_condition, m)
    nu = random_measure_on_conditions(rng, condition_points, n_per_condition, m)
    return mu, nu


def check_same_space(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure) -> None:
    if mu.d != nu.d or mu.m != nu.m:
        raise DimensionMismatchError(f"Measures live in different spaces: ({mu.d}, {mu.m}) vs ({nu.d}, {nu.m})")


def save_measure(mu: DiscreteJointMeasure, path: Union[str, Path]) -> None:
    Path(path).write_text(mu.to_document().model_dump_json(indent=2))


def load_measure(path: Union[str, Path]) -> DiscreteJointMeasure:
    document = MeasureDocument.model_validate(json.loads(Path(path).read_text()))
    return DiscreteJointMeasure.from_document(document)


def independent_gaussian_instance(n: int, seed: int, d: int = 1, m: int = 1) -> Tuple[DiscreteJointMeasure, DiscreteJointMeasure]:
    """mu_n = (1/n) sum delta_(y_i, x_i) and nu_n = (1/n) sum delta_(y_i, z_i) with independent
    standard normal y, x, z.

    The conditions are almost surely distinct, so the index-aligned coupling is the only
    y-diagonal one.
    """
    if n < 1:
        raise InvalidMeasureError(f"Sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    ys = rng.standard_normal((n, d))
    xs = rng.standard_normal((n, m))
    zs = rng.standard_normal((n, m))
    return DiscreteJointMeasure.uniform(ys, xs), DiscreteJointMeasure.uniform(ys, zs)


def diagonal_coupling_cost(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, p: float = 2.0) -> float:
    """Cost sum_i w_i ||x_i - z_i||^p of the index-aligned coupling of two equal-weight measures."""
    if mu.n_atoms != nu.n_atoms or not np.allclose(mu.weights, nu.weights, rtol=0, atol=Config.WEIGHT_TOL):
        raise InvalidMeasureError("Index-aligned coupling needs equal atom counts and weights")
    return float(mu.weights @ np.linalg.norm(mu.xs - nu.xs, axis=1) ** p)


def swap_counterexample(n: float) -> Tuple[DiscreteJointMeasure, DiscreteJointMeasure]:
    """mu = (delta_(0,0) + delta_(1,n))/2 and nu = (delta_(0,n) + delta_(1,0))/2 in 1-D.

    Joint W_1 is 1 (swap the conditions) while every y-diagonal plan pays n.
    """
    mu = DiscreteJointMeasure.uniform([[0.0], [1.0]], [[0.0], [float(n)]])
    nu = DiscreteJointMeasure.uniform([[0.0], [1.0]], [[float(n)], [0.0]])
    return mu, nu
