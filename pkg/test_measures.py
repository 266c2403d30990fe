#!/usr/bin/env python3
"""
Tests for discrete joint measures, condition grouping and instance generators.
"""

import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from condot.core.measures import (
    CostSpec,
    DiscreteJointMeasure,
    diagonal_coupling_cost,
    flatten_groups,
    group_by_condition,
    independent_gaussian_instance,
    load_measure,
    random_joint_instance,
    rescale_condition,
    same_condition_marginal,
    save_measure,
    swap_counterexample,
)
from condot.errors import DimensionMismatchError, GroupingAmbiguityError, InvalidMeasureError
from condot.guards.numeric_guards import GuardLevel, MeasureGuard


def test_swap_instance_groups():
    """Two atoms at different conditions give two point-mass conditionals."""
    mu, _ = swap_counterexample(5.0)
    groups = group_by_condition(mu, tol=1e-9)
    assert len(groups) == 2
    for group in groups:
        assert group.weight == pytest.approx(0.5)
        assert group.size == 1
        assert group.conditional_weights.tolist() == [1.0]


def test_single_atom_is_one_group():
    mu = DiscreteJointMeasure.from_atoms([([0.3], [1.0, 2.0])])
    groups = group_by_condition(mu)
    assert len(groups) == 1
    assert groups[0].weight == 1.0


def test_three_conditions_two_atoms_each():
    ys = [[0.0], [0.0], [1.0], [1.0], [2.0], [2.0]]
    xs = [[0.1], [0.2], [0.3], [0.4], [0.5], [0.6]]
    groups = group_by_condition(DiscreteJointMeasure.uniform(ys, xs), tol=1e-9)
    assert len(groups) == 3
    for group in groups:
        assert group.weight == pytest.approx(1.0 / 3.0)
        np.testing.assert_allclose(group.conditional_weights, [0.5, 0.5])


def test_groups_flatten_back_to_measure():
    mu, _ = random_joint_instance(3, d=2, m=2, n_conditions=3, n_per_condition=4)
    rebuilt = flatten_groups(group_by_condition(mu), mu.n_atoms, mu.d, mu.m)
    np.testing.assert_array_equal(rebuilt.ys, mu.ys)
    np.testing.assert_array_equal(rebuilt.xs, mu.xs)
    np.testing.assert_allclose(rebuilt.weights, mu.weights, atol=1e-15)


def test_ambiguous_grouping_is_rejected():
    mu = DiscreteJointMeasure.uniform([[0.0], [1.5e-9], [3.0e-9]], [[0.0], [1.0], [2.0]])
    with pytest.raises(GroupingAmbiguityError):
        group_by_condition(mu, tol=1e-9)


@pytest.mark.parametrize("ys_mu, ys_nu, expected", [
    ([[0.0], [1.0]], [[1.0], [0.0]], True),
    ([[0.0], [0.0]], [[1.0], [1.0]], False),
    ([[0.0], [1.0]], [[0.0], [0.0]], False),
])
def test_same_condition_marginal(ys_mu, ys_nu, expected):
    mu = DiscreteJointMeasure.uniform(ys_mu, [[0.0], [1.0]])
    nu = DiscreteJointMeasure.uniform(ys_nu, [[5.0], [7.0]])
    assert same_condition_marginal(mu, nu) is expected


def test_same_condition_marginal_is_reflexive():
    mu, _ = random_joint_instance(0, d=1, m=1, n_conditions=2, n_per_condition=2)
    assert same_condition_marginal(mu, mu)


def test_random_instance_is_deterministic():
    mu_a, nu_a = random_joint_instance(0, d=1, m=1, n_conditions=2, n_per_condition=2)
    mu_b, nu_b = random_joint_instance(0, d=1, m=1, n_conditions=2, n_per_condition=2)
    mu_c, _ = random_joint_instance(1, d=1, m=1, n_conditions=2, n_per_condition=2)
    assert mu_a.n_atoms == nu_a.n_atoms == 4
    assert same_condition_marginal(mu_a, nu_a)
    np.testing.assert_array_equal(mu_a.xs, mu_b.xs)
    np.testing.assert_array_equal(nu_a.xs, nu_b.xs)
    assert not np.array_equal(mu_a.xs, mu_c.xs)


def test_rescale_condition_scales_only_y():
    mu = DiscreteJointMeasure.uniform([[1.0], [2.0]], [[3.0], [4.0]])
    scaled = rescale_condition(mu, beta=4.0, p=2.0)
    np.testing.assert_allclose(scaled.ys, [[2.0], [4.0]])
    np.testing.assert_array_equal(scaled.xs, mu.xs)


def test_measure_rejects_bad_weights():
    with pytest.raises(InvalidMeasureError):
        DiscreteJointMeasure([[0.0], [1.0]], [[0.0], [1.0]], [0.7, 0.7])
    with pytest.raises(InvalidMeasureError):
        DiscreteJointMeasure([[0.0], [1.0]], [[0.0], [1.0]], [1.5, -0.5])
    with pytest.raises(DimensionMismatchError):
        DiscreteJointMeasure([[0.0], [1.0]], [[0.0]], [0.5, 0.5])


def test_relaxed_guard_accepts_unnormalized_weights():
    guard = MeasureGuard(GuardLevel.RELAXED)
    ok, _ = guard.validate_measure(np.zeros((2, 1)), np.zeros((2, 1)), np.array([2.0, 2.0]))
    assert ok


def test_measures_are_read_only():
    mu = DiscreteJointMeasure.uniform([[0.0]], [[1.0]])
    with pytest.raises(ValueError):
        mu.xs[0, 0] = 2.0


def test_cost_spec_validation():
    with pytest.raises(InvalidMeasureError):
        CostSpec(p=0.5)
    with pytest.raises(InvalidMeasureError):
        CostSpec(p=2.0, beta=-1.0)


def test_measure_file_round_trip(tmp_path):
    mu, _ = random_joint_instance(7, d=2, m=3, n_conditions=2, n_per_condition=3)
    path = tmp_path / "mu.json"
    save_measure(mu, path)
    loaded = load_measure(path)
    np.testing.assert_array_equal(loaded.ys, mu.ys)
    np.testing.assert_array_equal(loaded.xs, mu.xs)
    np.testing.assert_array_equal(loaded.weights, mu.weights)


def test_independent_gaussian_instance_shares_conditions():
    mu, nu = independent_gaussian_instance(50, seed=0)
    np.testing.assert_array_equal(mu.ys, nu.ys)
    assert not np.array_equal(mu.xs, nu.xs)


def test_diagonal_coupling_cost_limit():
    """E|X - Z|^2 = 2 for independent standard normals."""
    mu, nu = independent_gaussian_instance(100_000, seed=0)
    assert diagonal_coupling_cost(mu, nu, 2.0) == pytest.approx(2.0, abs=0.05)


def test_diagonal_coupling_cost_needs_equal_counts():
    mu = DiscreteJointMeasure.uniform([[0.0], [1.0]], [[0.0], [1.0]])
    nu = DiscreteJointMeasure.uniform([[0.0]], [[0.0]])
    with pytest.raises(InvalidMeasureError):
        diagonal_coupling_cost(mu, nu)
