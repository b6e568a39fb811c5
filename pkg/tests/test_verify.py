#!/usr/bin/env python

"""Tests for the linear quadratic oracles and the distribution metrics."""
import os
import json

import numpy as np
import pytest

from pyflowalign.numcore import Rng
from pyflowalign.flow import LinearField, FunctionField, SamplerConfig, integrate
from pyflowalign.verify import (LQProblem, riccati_solve, lq_value_gradient, LqFeedbackField, lq_rollout,
                                brute_force_control, feedback_discrepancy, w2_distance, w2_is_exact, diversity,
                                kl_between_flows, estimate_lipschitz, w2_bound_check, evaluate_against_base)
from pyflowalign.errors import ConfigError, NumericalError, ShapeError


@pytest.fixture
def problem():
    return LQProblem([[0.0, -0.1], [0.1, 0.0]], np.eye(2), [2.0, 1.0], 1.0)


# RICCATI
# -------

def test_zero_reward_has_zero_value_gradient():
    solution = riccati_solve(LQProblem([[0.5, 0.0], [0.0, -0.5]], np.zeros((2, 2)), [0.0, 0.0], 1.0))
    x = Rng(0).normal(size=(10, 2))
    assert np.allclose(lq_value_gradient(solution, x, Rng(1).uniform(size=10)), 0.0)


def test_scalar_riccati_closed_form():
    H, lam = 2.0, 0.5
    solution = riccati_solve(LQProblem([[0.0]], [[H]], [1.0], lam), n_grid=1000)
    t = solution.times
    expected_P = lam * H / (lam + H * (1.0 - t))
    assert np.max(np.abs(solution.P[:, 0, 0] - expected_P)) < 1e-8
    # q follows P: q(t) = -h P(t) / H
    assert np.max(np.abs(solution.q[:, 0] + expected_P / H)) < 1e-8


def test_negligible_temperature_keeps_the_terminal_gradient():
    problem = LQProblem(np.zeros((2, 2)), np.eye(2), [1.0, 2.0], 1e9)
    solution = riccati_solve(problem)
    x = np.array([0.5, -0.5])
    assert np.allclose(solution(x, 0.0), x - problem.h, atol=1e-6)
    assert np.allclose(LqFeedbackField(solution, problem.beta)(x, 0.0), 0.0, atol=1e-8)


def test_riccati_reports_blow_up():
    problem = LQProblem(10.0 * np.eye(1), np.eye(1), [0.0], 1e9)
    with pytest.raises(NumericalError) as error:
        riccati_solve(problem, cap=1e8)
    assert 0.0 <= error.value.location < 1.0


def test_riccati_validation(problem):
    with pytest.raises(ConfigError):
        riccati_solve(problem, n_grid=8)
    with pytest.raises(ValueError):
        riccati_solve(problem).coefficients(1.5)
    with pytest.raises(ConfigError):
        LQProblem(np.eye(2), np.eye(2), [0.0, 0.0], 0.0)


def test_value_gradient_at_the_terminal_time_is_the_negative_reward_gradient(problem):
    solution = riccati_solve(problem)
    x = Rng(0).normal(size=(5, 2))
    assert np.allclose(solution(x, 1.0), -problem.reward.grad(x))


def test_feedback_improves_on_the_base(problem):
    solution = riccati_solve(problem)
    x0 = Rng(0).normal(size=(64, 2))
    rollout = lq_rollout(problem, solution, x0, 50)

    base = integrate(problem.base_field(), x0, SamplerConfig(n_steps=50))
    assert rollout.mean_reward > np.mean(problem.reward.value(base.terminal))
    assert rollout.controls.shape == (50, 64, 2)


def test_brute_force_agrees_with_the_feedback_law(problem):
    solution = riccati_solve(problem, n_grid=2000)
    result = brute_force_control(problem, np.array([0.5, -1.0]), 100, 500)

    assert all(b <= a for a, b in zip(result.history, result.history[1:]))
    assert feedback_discrepancy(problem, solution, result) < 1e-3


def test_random_instances_are_valid():
    problem = LQProblem.random(3, Rng(0))
    assert problem.A.shape == (3, 3)
    assert np.min(np.linalg.eigvalsh(problem.H)) > 0.0
    assert LQProblem.from_dict(problem.to_dict()).to_dict() == problem.to_dict()


# METRICS
# -------

def test_w2_of_identical_and_shifted_samples():
    a = Rng(0).normal(size=(100, 2))
    assert w2_distance(a, a) == 0.0
    assert w2_distance(a, a + np.array([0.3, -0.4])) == pytest.approx(0.25)


def test_w2_in_one_dimension_sorts():
    assert w2_distance(np.array([0.0, 1.0]), np.array([1.0, 0.0])) == 0.0
    assert w2_distance(np.array([[0.0], [1.0]]), np.array([[2.0], [3.0]])) == pytest.approx(4.0)


def test_w2_is_symmetric_and_satisfies_the_triangle_inequality():
    rng = Rng(4)
    a = rng.child('a').normal(size=(50, 2))
    b = rng.child('b').normal(size=(50, 2)) * 1.5 + np.array([1.0, 0.0])
    c = rng.child('c').uniform(-2.0, 2.0, size=(50, 2))

    assert w2_distance(a, b) == pytest.approx(w2_distance(b, a), rel=1e-12)
    pairs = {'ab': (a, b), 'bc': (b, c), 'ac': (a, c)}
    distance = {name: np.sqrt(w2_distance(*pair)) for name, pair in pairs.items()}
    assert distance['ac'] <= distance['ab'] + distance['bc'] + 1e-12
    assert distance['ab'] <= distance['ac'] + distance['bc'] + 1e-12


def test_w2_is_approximate_for_large_sample_sets():
    a = Rng(0).normal(size=(300, 2))
    assert w2_is_exact(a[:256])
    assert not w2_is_exact(a)
    assert w2_distance(a, a, Rng(1)) == 0.0


def test_w2_rejects_mismatching_shapes():
    with pytest.raises(ShapeError):
        w2_distance(np.zeros((3, 2)), np.zeros((4, 2)))


def test_diversity_is_the_covariance_trace():
    assert diversity(np.array([[0.0, 1.0], [2.0, 1.0]])) == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        diversity(np.zeros((1, 2)))


def test_kl_between_identical_flows_vanishes():
    field = LinearField([[0.5]])
    report = kl_between_flows(field, field, 64, 16, Rng(0), n_time=4)
    assert abs(report.kl) <= 3.0 * report.stderr + 1e-12
    assert report.rhs == pytest.approx(0.0, abs=1e-12)


def test_kl_between_gaussian_flows():
    spread = 3.0
    expected = np.log(spread) + 1.0 / (2.0 * spread ** 2) - 0.5
    report = kl_between_flows(LinearField([[0.0]]), LinearField([[np.log(spread)]]), 1024, 32, Rng(0), n_time=4)
    assert abs(report.kl - expected) < 4.0 * report.stderr


def test_lipschitz_of_a_linear_field_is_its_spectral_norm():
    field = LinearField([[3.0, 0.0], [0.0, -4.0]])
    assert estimate_lipschitz(field, 2, Rng(0)) == pytest.approx(4.0)


def test_w2_bound_for_a_constant_perturbation():
    base = LinearField(np.zeros((2, 2)))
    shift = np.array([0.3, -0.4])
    perturbed = FunctionField(lambda x, t: base(x, t) + shift, 2)

    report = w2_bound_check(perturbed, base, 32, 20, Rng(0))
    assert report.lhs == pytest.approx(0.25)
    assert report.rhs == pytest.approx(np.e * 0.25)
    assert report.holds


def test_evaluate_a_model_against_itself(tmp_path, problem):
    base = problem.base_field()
    report, finetuned, base_samples = evaluate_against_base(base, base, problem.reward, 64, 10, Rng(0),
                                                            bound_samples=16)
    assert np.array_equal(finetuned, base_samples)
    assert report.w2_to_base == 0.0
    assert report.mean_reward == report.base_mean_reward
    assert report.w2_bound.holds

    path = os.path.join(str(tmp_path), 'report.json')
    report.save(path)
    with open(path) as file:
        data = json.load(file)
    assert data['w2_approximate'] is False
    assert data['kl_to_base'] is None
