#!/usr/bin/env python

"""Tests for the velocity fields, the integrators, the finite difference kernels and pretraining."""

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import norm
from scipy.integrate import trapezoid

from pyflowalign.numcore import Rng
from pyflowalign.nets import MlpSpec, init_mlp
from pyflowalign.data import PointMass
from pyflowalign.flow import (ConstantField, LinearField, FunctionField, MlpField, ResidualField, SamplerConfig,
                              integrate, solve, divergence_fd, jvp_fd, vjp_fd, log_density,
                              RectifiedFlowTrainer, pretrain_rectified_flow)
from pyflowalign.errors import ConfigError, NumericalError, ShapeError


@pytest.fixture
def matrix():
    return np.array([[0.3, -1.0], [0.5, 0.2]])


@pytest.fixture
def points():
    return Rng(0).normal(size=(8, 2))


def test_constant_field_is_integrated_exactly():
    trajectory = integrate(ConstantField([1.0, -2.0]), np.zeros(2), SamplerConfig(n_steps=7))
    assert trajectory.n_steps == 7
    assert trajectory.states.shape == (8, 2)
    assert trajectory.velocities.shape == (7, 2)
    assert np.allclose(trajectory.terminal, [1.0, -2.0])


def test_euler_and_rk4_on_exponential_growth():
    field = LinearField([[1.0]])
    euler = integrate(field, np.ones(1), SamplerConfig(n_steps=20))
    assert euler.terminal[0] == pytest.approx(1.05 ** 20, rel=1e-12)

    rk4 = integrate(field, np.ones(1), SamplerConfig(n_steps=20, integrator='rk4'))
    assert abs(rk4.terminal[0] - np.e) < 1e-6


def test_rk4_matches_the_matrix_exponential(matrix, points):
    trajectory = integrate(LinearField(matrix), points, SamplerConfig(n_steps=40, integrator='rk4'))
    assert np.allclose(trajectory.terminal, points @ expm(matrix).T, atol=1e-7)


def test_batches_are_integrated_at_once(points):
    trajectory = integrate(LinearField([[0.0, 1.0], [-1.0, 0.0]]), points, SamplerConfig(n_steps=10))
    assert trajectory.states.shape == (11, 8, 2)
    single = integrate(LinearField([[0.0, 1.0], [-1.0, 0.0]]), points[3], SamplerConfig(n_steps=10))
    assert np.allclose(single.terminal, trajectory.terminal[3])


def test_solve_runs_backwards_in_time():
    times, states, _ = solve(LinearField([[1.0]]), np.array([np.e]), 1.0, 0.0, 50, 'rk4')
    assert times[0] == 1.0 and times[-1] == 0.0
    assert states[-1][0] == pytest.approx(1.0, abs=1e-8)


def test_non_finite_states_report_the_step():
    field = FunctionField(lambda x, t: np.full_like(x, np.inf), dim=1)
    with pytest.raises(NumericalError) as error:
        integrate(field, np.zeros(1), SamplerConfig(n_steps=5))
    assert error.value.location == 1


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(n_steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(integrator='heun')
    with pytest.raises(ConfigError):
        SamplerConfig.from_dict({'steps': 3})


def test_linear_field_needs_a_square_matrix():
    with pytest.raises(ShapeError):
        LinearField(np.zeros((2, 3)))


def test_divergence_of_a_linear_field_is_the_trace(matrix, points):
    divergence = divergence_fd(LinearField(matrix), points, 0.5)
    assert divergence.shape == (8,)
    assert np.allclose(divergence, np.trace(matrix), atol=1e-8)


def test_jvp_and_vjp_of_a_linear_field(matrix, points):
    field = LinearField(matrix)
    w = Rng(1).normal(size=(8, 2))
    assert np.allclose(jvp_fd(field, points, 0.0, w, 1e-3), w @ matrix.T, atol=1e-8)
    assert np.allclose(vjp_fd(field, points, 0.0, w, 1e-3), w @ matrix, atol=1e-8)


def test_fd_kernels_accept_a_step_per_row(matrix, points):
    field = LinearField(matrix)
    w = Rng(1).normal(size=(8, 2))
    eps = np.linspace(1e-4, 1e-2, 8)
    assert np.allclose(vjp_fd(field, points, 0.0, w, eps), w @ matrix, atol=1e-8)


def test_log_density_of_a_scaling_flow():
    # x_1 = 2 x_0, so the marginal at t=1 is N(0, 4)
    field = LinearField([[np.log(2.0)]])
    x1 = np.linspace(-3.0, 3.0, 13)[:, None]
    x0, logp = log_density(field, x1, 64)
    assert np.allclose(x0, x1 / 2.0, atol=1e-8)
    assert np.allclose(logp, norm(scale=2.0).logpdf(x1[:, 0]), atol=1e-6)


def test_log_density_of_a_nonlinear_flow_integrates_to_one():
    field = FunctionField(lambda x, t: 0.5 * np.tanh(x) + 0.3, dim=1)
    grid = np.linspace(-8.0, 10.0, 901)
    _, logp = log_density(field, grid[:, None], 50)
    assert trapezoid(np.exp(logp), grid) == pytest.approx(1.0, abs=1e-2)


def test_log_density_of_a_rotating_flow_integrates_to_one():
    matrix = np.array([[-0.2, 1.0], [-1.0, -0.2]])
    field = FunctionField(lambda x, t: x @ matrix.T + 0.3 * np.tanh(x), dim=2)
    axis = np.linspace(-7.0, 7.0, 141)
    grid = np.stack(np.meshgrid(axis, axis, indexing='ij'), axis=-1).reshape(-1, 2)
    _, logp = log_density(field, grid, 50)
    density = np.exp(logp).reshape(len(axis), len(axis))
    assert trapezoid(trapezoid(density, axis, axis=1), axis) == pytest.approx(1.0, abs=1e-2)


def test_residual_field_with_tiny_residual_equals_the_base(points):
    spec = MlpSpec(2, hidden=[16], final_init='tiny')
    base = LinearField([[0.0, 1.0], [1.0, 0.0]])
    field = ResidualField(base, MlpField(spec, init_mlp(spec, Rng(0))))
    assert np.array_equal(field(points, 0.4), base(points, 0.4))


def test_pretraining_without_steps_returns_the_initialization():
    spec = MlpSpec(2, hidden=[16])
    field = pretrain_rectified_flow(PointMass([1.0, 1.0]), spec, steps=0, batch=8, lr=1e-3, rng=Rng(3))
    expected = init_mlp(spec, Rng(3).child('init'))
    for name, value in expected.items():
        assert np.array_equal(field.params[name], value)


def test_pretraining_is_deterministic_and_reduces_the_loss():
    spec = MlpSpec(2, time_embed_dim=4, hidden=[32, 32])
    data = PointMass([2.0, -1.0])

    first = RectifiedFlowTrainer(data, spec, steps=300, batch=64, lr=1e-2, rng=Rng(1), log_every=0)
    first.run()
    second = RectifiedFlowTrainer(data, spec, steps=300, batch=64, lr=1e-2, rng=Rng(1), log_every=0)
    second.run()

    assert first.losses == second.losses
    assert np.mean(first.losses[-20:]) < 0.5 * np.mean(first.losses[:20])


def test_pretraining_rejects_mismatching_dimensions():
    with pytest.raises(ShapeError):
        RectifiedFlowTrainer(PointMass([0.0, 0.0, 0.0]), MlpSpec(2), steps=1, batch=4, lr=1e-3, rng=Rng(0))
