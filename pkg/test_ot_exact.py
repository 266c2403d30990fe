#!/usr/bin/env python3
"""
Tests for exact transport: cost tables, assignment, conditional and relaxed distances,
plan conversions and the dual certificate.
"""

import itertools
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from condot.core.measures import (
    CostSpec,
    DiscreteJointMeasure,
    independent_gaussian_instance,
    random_joint_instance,
    random_measure_on_conditions,
    rescale_condition,
    swap_counterexample,
)
from condot.core.ot_exact import (
    conditional_wasserstein,
    cost_matrix,
    dual_certificate,
    plan3_to_plan4,
    plan4_to_plan3,
    plan_x_cost,
    relaxed_wasserstein,
    solve_assignment,
    solve_transport,
    wasserstein,
    y_leakage,
)
from condot.errors import (
    InfeasibleTransportError,
    InvalidPlanError,
    MarginalMismatchError,
    UnsupportedExponentError,
)


# ---------------------------------------------------------------------------
# cost tables and solvers
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("a, b, spec, expected", [
    (([[0.0]], [[0.0]]), ([[1.0]], [[0.0]]), CostSpec(p=1.0, beta=1.0), 1.0),
    (([[0.0]], [[0.0]]), ([[1.0]], [[2.0]]), CostSpec(p=2.0, beta=20.0), 24.0),
])
def test_cost_matrix_values(a, b, spec, expected):
    a = tuple(np.array(v) for v in a)
    b = tuple(np.array(v) for v in b)
    assert cost_matrix(a, b, spec)[0, 0] == pytest.approx(expected)


def test_cost_matrix_zero_diagonal_on_identical_points():
    mu, _ = random_joint_instance(0, d=2, m=3, n_conditions=2, n_per_condition=3)
    cost = cost_matrix(mu, mu, CostSpec(p=2.0, beta=5.0))
    np.testing.assert_array_equal(np.diag(cost), 0.0)


def test_strict_cost_forbids_cross_condition_pairs():
    ys = np.array([[0.0], [1.0]])
    xs = np.array([[0.0], [1.0]])
    cost = cost_matrix((ys, xs), (ys, xs), CostSpec(p=2.0, beta=1.0, strict=True))
    assert np.isinf(cost[0, 1]) and np.isinf(cost[1, 0])
    assert np.isfinite(np.diag(cost)).all()


def test_assignment_on_swap_instance():
    mu, nu = swap_counterexample(5.0)
    sigma, value = solve_assignment(cost_matrix(mu, nu, CostSpec(p=1.0, beta=1.0)))
    assert sigma.tolist() == [1, 0]
    assert value == 1.0


@pytest.mark.parametrize("cost", [
    np.array([[0.0, 9.0, 9.0], [9.0, 0.0, 9.0], [9.0, 9.0, 0.0]]),
    np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]]),
])
def test_assignment_prefers_identity(cost):
    sigma, value = solve_assignment(cost)
    assert sigma.tolist() == [0, 1, 2]
    assert value == 0.0


def test_assignment_without_finite_solution():
    cost = np.array([[np.inf, np.inf], [0.0, 1.0]])
    with pytest.raises(InfeasibleTransportError):
        solve_assignment(cost)


def test_transport_diagonal_plan():
    result = solve_transport(np.array([0.5, 0.5]), np.array([0.5, 0.5]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert result.value == pytest.approx(0.0)
    assert sorted(zip(result.rows.tolist(), result.cols.tolist())) == [(0, 0), (1, 1)]


def test_transport_splits_mass():
    result = solve_transport(np.array([1.0]), np.array([0.5, 0.5]), np.array([[0.0, 1.0]]))
    assert result.value == pytest.approx(0.5)
    np.testing.assert_allclose(result.masses, [0.5, 0.5])


def test_transport_matches_assignment_on_uniform_tables():
    cost = np.random.default_rng(3).uniform(size=(5, 5))
    weights = np.full(5, 0.2)
    _, assignment_value = solve_assignment(cost)
    assert solve_transport(weights, weights, cost).value == pytest.approx(assignment_value, abs=1e-12)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def test_joint_w1_on_swap_instance():
    mu, nu = swap_counterexample(5.0)
    value, plan = wasserstein(mu, nu, 1.0)
    assert value == pytest.approx(1.0)
    assert not plan.y_diagonal


def test_conditional_distance_on_swap_instance():
    mu, nu = swap_counterexample(5.0)
    value, plan = conditional_wasserstein(mu, nu, 1.0)
    assert value == pytest.approx(5.0)
    assert plan.y_diagonal
    assert y_leakage(plan, 1.0) == 0.0


def test_conditional_distance_of_identical_measures():
    mu, _ = random_joint_instance(4, d=1, m=2, n_conditions=3, n_per_condition=3)
    value, plan = conditional_wasserstein(mu, mu, 2.0)
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(plan.rows, plan.cols)


def _brute_force_power(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, n_conditions: int,
                       n_per_condition: int, p: float) -> float:
    """Sum over conditions of P_Y(y) times the best per-condition permutation cost."""
    perms = np.array(list(itertools.permutations(range(n_per_condition))))
    total = 0.0
    for b in range(n_conditions):
        block = slice(b * n_per_condition, (b + 1) * n_per_condition)
        cost = np.linalg.norm(mu.xs[block][:, None, :] - nu.xs[block][None, :, :], axis=2) ** p
        best = cost[np.arange(n_per_condition), perms].sum(axis=1).min() / n_per_condition
        total += best / n_conditions
    return float(total)


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_conditional_distance_matches_brute_force(p):
    for seed in range(100):
        n_conditions, n_per_condition = 1 + seed % 5, 1 + (7 * seed) % 6
        mu, nu = random_joint_instance(seed, d=1, m=2, n_conditions=n_conditions, n_per_condition=n_per_condition)
        value, plan = conditional_wasserstein(mu, nu, p)
        best = _brute_force_power(mu, nu, n_conditions, n_per_condition, p)
        assert plan.cost == pytest.approx(best, abs=1e-10)
        assert value ** p == pytest.approx(best, abs=1e-10)


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_condition_blocks_of_the_plan_are_optimal(p):
    n_conditions, n_per_condition = 3, 5
    for seed in range(20):
        mu, nu = random_joint_instance(seed, d=2, m=2, n_conditions=n_conditions, n_per_condition=n_per_condition)
        _, plan = conditional_wasserstein(mu, nu, p)
        block_of = np.arange(mu.n_atoms) // n_per_condition
        np.testing.assert_array_equal(block_of[plan.rows], block_of[plan.cols])
        entry_costs = np.linalg.norm(mu.xs[plan.rows] - nu.xs[plan.cols], axis=1) ** p
        for b in range(n_conditions):
            own = block_of[plan.rows] == b
            sub_cost = float(plan.masses[own] @ entry_costs[own]) * n_conditions
            block = slice(b * n_per_condition, (b + 1) * n_per_condition)
            weights = np.full(n_per_condition, 1.0 / n_per_condition)
            cost = np.linalg.norm(mu.xs[block][:, None, :] - nu.xs[block][None, :, :], axis=2) ** p
            assert sub_cost == pytest.approx(solve_transport(weights, weights, cost).value, abs=1e-10)


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_relaxed_distance_is_sandwiched(p):
    betas = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 10000.0]
    for seed in range(20):
        mu, nu = random_joint_instance(seed, d=1, m=2, n_conditions=3, n_per_condition=4)
        joint, _ = wasserstein(mu, nu, p)
        conditional, _ = conditional_wasserstein(mu, nu, p)
        relaxed = [relaxed_wasserstein(mu, nu, CostSpec(p=p, beta=beta))[0] for beta in betas]
        assert joint <= conditional + 1e-10
        assert all(b >= a - 1e-10 for a, b in zip(relaxed, relaxed[1:]))
        assert all(value <= conditional + 1e-10 for value in relaxed)
        assert all(joint <= value + 1e-10 for beta, value in zip(betas, relaxed) if beta >= 1.0)


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_conditional_distance_is_a_metric(p):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        points = rng.standard_normal((int(rng.integers(1, 4)), 1))
        n_per_condition = int(rng.integers(1, 4))
        a, b, c = (random_measure_on_conditions(rng, points, n_per_condition, 2) for _ in range(3))
        ab, _ = conditional_wasserstein(a, b, p)
        ba, _ = conditional_wasserstein(b, a, p)
        bc, _ = conditional_wasserstein(b, c, p)
        ac, _ = conditional_wasserstein(a, c, p)
        aa, _ = conditional_wasserstein(a, a, p)
        assert ab == pytest.approx(ba, abs=1e-8)
        assert aa == pytest.approx(0.0, abs=1e-8)
        assert ac <= ab + bc + 1e-8


def test_conditional_distance_rejects_different_condition_marginals():
    mu = DiscreteJointMeasure.uniform([[0.0]], [[0.0]])
    nu = DiscreteJointMeasure.uniform([[1.0]], [[0.0]])
    with pytest.raises(MarginalMismatchError):
        conditional_wasserstein(mu, nu)


def test_unsupported_exponent():
    mu, nu = swap_counterexample(2.0)
    with pytest.raises(UnsupportedExponentError):
        conditional_wasserstein(mu, nu, 3.0)


def test_relaxed_distance_on_swap_instance():
    mu, nu = swap_counterexample(5.0)
    value, plan = relaxed_wasserstein(mu, nu, CostSpec(p=1.0, beta=1.0))
    assert value == pytest.approx(1.0)
    assert y_leakage(plan, 1.0) == pytest.approx(1.0)
    assert plan_x_cost(plan, 1.0) == pytest.approx(0.0)


def test_relaxed_distance_with_large_beta_stays_on_conditions():
    mu, nu = swap_counterexample(5.0)
    value, plan = relaxed_wasserstein(mu, nu, CostSpec(p=1.0, beta=10.0))
    assert value == pytest.approx(5.0)
    assert y_leakage(plan, 1.0) == 0.0


@pytest.mark.parametrize("beta", [0.5, 3.0, 40.0])
def test_relaxed_w2_equals_plain_w2_after_rescaling(beta):
    mu, nu = random_joint_instance(6, d=2, m=2, n_conditions=3, n_per_condition=3)
    relaxed, _ = relaxed_wasserstein(mu, nu, CostSpec(p=2.0, beta=beta))
    plain, _ = wasserstein(rescale_condition(mu, beta, 2.0), rescale_condition(nu, beta, 2.0), 2.0)
    assert plain == pytest.approx(relaxed, rel=1e-10)


def test_relaxed_distance_of_identical_measures():
    mu, _ = random_joint_instance(2, d=1, m=1, n_conditions=2, n_per_condition=4)
    value, _ = relaxed_wasserstein(mu, mu, CostSpec(p=2.0, beta=3.0))
    assert value == pytest.approx(0.0, abs=1e-12)


def test_leakage_shrinks_as_beta_grows():
    mu, nu = independent_gaussian_instance(1000, seed=0)
    conditional, _ = conditional_wasserstein(mu, nu, 2.0)
    bound = conditional ** 2
    leakages = []
    betas = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6, 1e7]
    for beta in betas:
        _, plan = relaxed_wasserstein(mu, nu, CostSpec(p=2.0, beta=beta))
        leakage = y_leakage(plan, 2.0)
        assert beta * leakage <= bound * (1.0 + 1e-9)
        leakages.append(leakage)
    assert all(b <= a + 1e-12 for a, b in zip(leakages, leakages[1:]))
    assert leakages[-1] < 1e-3 * leakages[0]


# ---------------------------------------------------------------------------
# plan conversions
# ---------------------------------------------------------------------------

def test_identity_plan_to_plan3():
    mu, _ = random_joint_instance(5, d=1, m=1, n_conditions=2, n_per_condition=3)
    _, plan = conditional_wasserstein(mu, mu, 2.0)
    plan3 = plan4_to_plan3(plan)
    np.testing.assert_array_equal(plan3.rows, plan3.cols)
    assert plan3.transport_cost(2.0) == pytest.approx(0.0)


def test_swap_plan3_cost():
    mu, nu = swap_counterexample(5.0)
    _, plan = conditional_wasserstein(mu, nu, 1.0)
    assert plan4_to_plan3(plan).transport_cost(1.0) == pytest.approx(5.0)


def test_plan_round_trip_preserves_entries_and_cost():
    mu, nu = random_joint_instance(9, d=2, m=2, n_conditions=3, n_per_condition=4)
    _, plan = conditional_wasserstein(mu, nu, 2.0)
    back = plan3_to_plan4(plan4_to_plan3(plan), p=2.0)
    original = sorted(zip(plan.rows.tolist(), plan.cols.tolist(), plan.masses.tolist()))
    restored = sorted(zip(back.rows.tolist(), back.cols.tolist(), back.masses.tolist()))
    assert original == restored
    assert back.cost == pytest.approx(plan.cost, abs=1e-12)


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_plan_round_trip_over_seeds(p):
    for seed in range(100):
        mu, nu = random_joint_instance(seed, d=1, m=2, n_conditions=1 + seed % 4, n_per_condition=1 + seed % 5)
        _, plan = conditional_wasserstein(mu, nu, p)
        back = plan3_to_plan4(plan4_to_plan3(plan), p=p)
        assert back.cost == pytest.approx(plan.cost, abs=1e-12)
        assert back.y_diagonal


def test_non_diagonal_plan_has_no_plan3():
    mu, nu = swap_counterexample(5.0)
    _, plan = relaxed_wasserstein(mu, nu, CostSpec(p=1.0, beta=1.0))
    with pytest.raises(InvalidPlanError):
        plan4_to_plan3(plan)


# ---------------------------------------------------------------------------
# duality
# ---------------------------------------------------------------------------

def test_dual_certificate_on_swap_instance():
    mu, nu = swap_counterexample(5.0)
    certificate = dual_certificate(mu, nu)
    assert certificate.dual_value == pytest.approx(5.0, abs=1e-8)
    assert certificate.gap < 1e-8


def test_dual_certificate_of_identical_measures():
    mu, _ = random_joint_instance(1, d=1, m=2, n_conditions=2, n_per_condition=3)
    certificate = dual_certificate(mu, mu)
    assert certificate.dual_value == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("seed", range(50))
def test_dual_certificate_closes_gap(seed):
    mu, nu = random_joint_instance(seed, d=1, m=2, n_conditions=1 + seed % 3, n_per_condition=1 + seed % 8)
    certificate = dual_certificate(mu, nu)
    assert certificate.gap < 1e-6
    assert certificate.lipschitz_violation() < 1e-8
