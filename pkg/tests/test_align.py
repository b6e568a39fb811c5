#!/usr/bin/env python

"""Tests for value gradient matching: clipping, subsampling, the losses and the training loop."""

import numpy as np
import pytest

from pyflowalign.numcore import Rng
from pyflowalign.nets import MlpSpec, init_mlp
from pyflowalign.flow import ConstantField, LinearField, MlpField, ResidualField, SamplerConfig, integrate
from pyflowalign.rewards import Quadratic, Ring
from pyflowalign.align import (ETA_SCHEDULES, one_step_prediction, value_gradient, percentile_threshold,
                               percentile_clip, clip_to_norm, ValueGradientField, TransitionBatch, bin_ranges,
                               BinnedSubsampling, NoSubsampling, FractionSubsampling, subsample_transitions,
                               consistency_residual, shrink_steps, consistency_loss, boundary_loss, matching_loss,
                               differentiate, FinetuneConfig, DivergenceGuard, ValueGradientTrainer, vgg_flow_train)
from pyflowalign.verify import LQProblem, riccati_solve
from pyflowalign.errors import ConfigError


@pytest.fixture
def reward():
    return Quadratic(np.eye(2), [2.0, 1.0])


@pytest.fixture
def base():
    return LinearField([[0.0, -0.1], [0.1, 0.0]])


def _fields(base, reward, final_init='tiny', seed=0):
    residual_spec = MlpSpec(2, hidden=[16], final_init=final_init)
    value_spec = MlpSpec(2, hidden=[16], final_init=final_init)
    v_theta = ResidualField(base, MlpField(residual_spec, init_mlp(residual_spec, Rng(seed).child('theta'))))
    gfield = ValueGradientField(reward, v_theta, MlpField(value_spec, init_mlp(value_spec, Rng(seed).child('phi'))))
    return v_theta, gfield


def _batch(v_theta, n_trajectories=6, n_steps=10, bins=5):
    x0 = Rng(9).normal(size=(n_trajectories, 2))
    trajectory = integrate(v_theta, x0, SamplerConfig(n_steps=n_steps))
    return BinnedSubsampling(bins)(trajectory, Rng(10))


# CLIPPING
# --------

def test_percentile_threshold_interpolates_linearly():
    assert percentile_threshold(np.arange(1.0, 6.0)[:, None], 80.0) == pytest.approx(4.2)


def test_percentile_threshold_validation():
    with pytest.raises(ValueError):
        percentile_threshold(np.zeros((0, 2)), 80.0)
    with pytest.raises(ValueError):
        percentile_threshold(np.ones((3, 2)), 0.0)


def test_clipping_is_idempotent_for_a_fixed_threshold():
    vectors = Rng(0).normal(size=(50, 3))
    threshold = percentile_threshold(vectors, 80.0)
    once = percentile_clip(vectors, 80.0)
    twice = percentile_clip(once, 80.0, threshold=threshold)
    assert np.allclose(once, twice)
    assert np.max(np.linalg.norm(once, axis=-1)) <= threshold * (1.0 + 1e-12)


def test_clipping_keeps_short_and_zero_vectors():
    vectors = np.array([[0.0, 0.0], [0.3, 0.4], [6.0, 8.0]])
    clipped = clip_to_norm(vectors, 1.0)
    assert np.array_equal(clipped[:2], vectors[:2])
    assert np.allclose(clipped[2], [0.6, 0.8])


# THE VALUE GRADIENT FIELD
# ------------------------

def test_one_step_prediction():
    x = np.array([[1.0, 1.0], [0.0, 0.0]])
    prediction = one_step_prediction(ConstantField([2.0, 0.0]), x, np.array([0.5, 0.0]))
    assert np.allclose(prediction, [[2.0, 1.0], [2.0, 0.0]])


def test_value_gradient_at_initialization_is_the_leading_term(base, reward):
    v_theta, gfield = _fields(base, reward)
    x = Rng(1).normal(size=(5, 2))
    t = np.linspace(0.1, 0.9, 5)

    x_hat = x + (1.0 - t)[:, None] * base(x, t)
    expected = -(t ** 2)[:, None] * reward.grad(x_hat)
    assert np.allclose(gfield(x, t), expected)
    assert np.allclose(value_gradient(gfield, x, t), expected)


@pytest.mark.parametrize('eta', sorted(ETA_SCHEDULES.keys()))
def test_eta_schedules_end_at_one(eta):
    assert ETA_SCHEDULES[eta](1.0) == 1.0
    assert np.all(ETA_SCHEDULES[eta](np.linspace(0.0, 1.0, 5)) <= 1.0)


def test_unknown_eta_schedule(base, reward):
    v_theta, gfield = _fields(base, reward)
    with pytest.raises(ConfigError):
        ValueGradientField(reward, v_theta, gfield.correction, eta='cubic')


# SUBSAMPLING
# -----------

def test_bin_ranges_cover_all_steps():
    assert bin_ranges(20, 5) == [(0, 4), (4, 8), (8, 12), (12, 16), (16, 20)]
    assert bin_ranges(7, 3) == [(0, 3), (3, 5), (5, 7)]
    with pytest.raises(ConfigError):
        bin_ranges(4, 5)


def test_binned_subsampling_draws_one_step_per_bin():
    indices = BinnedSubsampling(5).select(20, 100, Rng(0))
    assert indices.shape == (100, 5)
    for column, (start, stop) in enumerate(bin_ranges(20, 5)):
        assert np.all((indices[:, column] >= start) & (indices[:, column] < stop))


def test_other_subsampling_strategies():
    assert NoSubsampling().select(6, 2, Rng(0)).tolist() == [list(range(6)), list(range(6))]
    assert FractionSubsampling(0.25).select(20, 3, Rng(0)).shape == (3, 5)
    with pytest.raises(ConfigError):
        FractionSubsampling(1.5)


def test_transition_batch_from_a_trajectory(base):
    trajectory = integrate(base, Rng(0).normal(size=(4, 2)), SamplerConfig(n_steps=10))
    batch = BinnedSubsampling(5)(trajectory, Rng(1))
    assert len(batch) == 20
    assert np.array_equal(subsample_transitions(trajectory, 5, Rng(1)).x, batch.x)
    assert batch.terminals.shape == (4, 2)
    assert np.all(batch.t < 1.0)
    assert np.allclose(batch.x, trajectory.states[batch.steps, np.repeat(np.arange(4), 5)])


def test_transition_batch_rejects_inconsistent_lengths():
    with pytest.raises(ValueError):
        TransitionBatch(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2)), np.zeros((1, 2)))


# LOSSES
# ------

def test_boundary_loss_is_exactly_zero_at_initialization(base, reward):
    v_theta, gfield = _fields(base, reward)
    terminals = Rng(2).normal(size=(32, 2))
    assert boundary_loss(gfield, terminals, reward) == 0.0


def test_consistency_residual_vanishes_for_the_exact_lq_solution():
    problem = LQProblem([[0.0, -0.1], [0.1, 0.0]], np.eye(2), [2.0, 1.0], 1.0)
    solution = riccati_solve(problem, n_grid=2000)
    base = problem.base_field()

    x = Rng(0).normal(size=(64, 2))
    t = Rng(1).uniform(0.0, 0.9, size=64)
    residual = consistency_residual(solution, base, base, x, t, 1e-3, problem.beta)
    relative = np.linalg.norm(residual, axis=-1) / (1.0 + np.linalg.norm(x, axis=-1))
    assert np.mean(relative) < 5e-3


def test_consistency_modes_differ_when_the_point_is_displaced():
    problem = LQProblem([[0.0, -0.1], [0.1, 0.0]], np.eye(2), [2.0, 1.0], 1.0)
    solution = riccati_solve(problem, n_grid=200)
    base = problem.base_field()
    moving = ConstantField([1.0, 1.0])

    x = Rng(0).normal(size=(8, 2))
    t = np.full(8, 0.5)
    partial = consistency_residual(solution, base, moving, x, t, 1e-3, 1.0, mode='partial')
    displaced = consistency_residual(solution, base, moving, x, t, 1e-3, 1.0, mode='paper_c1')
    assert not np.allclose(partial, displaced)
    alias = consistency_residual(solution, base, moving, x, t, 1e-3, 1.0, mode='displaced')
    assert np.array_equal(alias, displaced)


def test_consistency_residual_validation(base):
    x, t = np.zeros((2, 2)), np.array([0.5, 0.9995])
    with pytest.raises(ValueError):
        consistency_residual(base, base, base, x, t, 1e-3, 1.0)
    with pytest.raises(ConfigError):
        consistency_residual(base, base, base, x, np.array([0.1, 0.2]), 1e-3, 1.0, mode='exact')

    assert np.allclose(shrink_steps(1e-3, t), [1e-3, 5e-4])


def test_matching_loss_only_depends_on_theta(base, reward):
    v_theta, gfield = _fields(base, reward, final_init='standard')
    batch = _batch(v_theta)

    _, grads = differentiate(lambda theta, phi: matching_loss(v_theta, gfield, batch, 1.0, theta, phi),
                             theta=v_theta.params, phi=gfield.params)
    assert all(np.all(g == 0.0) for g in grads['phi'].values())
    assert any(np.any(g != 0.0) for g in grads['theta'].values())


def test_consistency_loss_only_depends_on_phi(base, reward):
    v_theta, gfield = _fields(base, reward, final_init='standard')
    batch = _batch(v_theta)
    config = FinetuneConfig()

    _, grads = differentiate(lambda theta, phi: consistency_loss(gfield, base, v_theta, batch, config, phi),
                             theta=v_theta.params, phi=gfield.params)
    assert all(np.all(g == 0.0) for g in grads['theta'].values())
    assert any(np.any(g != 0.0) for g in grads['phi'].values())


# TRAINING
# --------

def test_finetune_config_defaults_and_validation():
    config = FinetuneConfig()
    assert config.bins == 5
    assert config.alpha == 1e4
    assert config.clip_percentile == 80.0
    assert config.eta == 'quadratic'

    with pytest.raises(ConfigError) as error:
        FinetuneConfig.from_dict({'gamma': 1.0})
    assert error.value.key == 'gamma'
    with pytest.raises(ConfigError):
        FinetuneConfig(bins=30)


def test_finetune_config_consistency_modes():
    assert FinetuneConfig.from_dict({'consistency_mode': 'paper_c1'}).consistency_mode == 'paper_c1'
    assert FinetuneConfig(consistency_mode='displaced').consistency_mode == 'paper_c1'
    with pytest.raises(ConfigError) as error:
        FinetuneConfig(consistency_mode='exact')
    assert error.value.key == 'consistency_mode'


def test_divergence_guard_warns_once_after_the_patience():
    guard = DivergenceGuard(margin=0.1, patience=3)
    for index, value in enumerate([1.0, 0.5, 0.5, 0.5, 0.5]):
        guard.update(index, value)
    assert [warning['round'] for warning in guard.warnings] == [3]


def _small_config(**kwargs):
    options = dict(n_rounds=3, trajectories=8, residual_hidden=[16], value_hidden=[16],
                   sampler={'n_steps': 10, 'integrator': 'euler'}, eval_every=2, log_every=0)
    options.update(kwargs)
    return FinetuneConfig(**options)


def test_zero_temperature_keeps_the_base_field(base, reward):
    result = vgg_flow_train(_small_config(beta=0.0), base, reward, Rng(0))
    x = Rng(1).normal(size=(10, 2))
    assert np.array_equal(result.field.residual_velocity(x, 0.3), np.zeros((10, 2)))


def test_training_is_deterministic(base, reward):
    first = vgg_flow_train(_small_config(), base, reward, Rng(4))
    second = vgg_flow_train(_small_config(), base, reward, Rng(4))
    assert first.records == second.records
    assert [round_index for round_index, _ in first.snapshots] == [0, 2, 3]


def test_trainer_records_every_round(base, reward):
    trainer = ValueGradientTrainer(_small_config(), base, reward, Rng(0))
    records = list(trainer)
    assert [record['round'] for record in records] == [0, 1, 2]
    assert records[0]['loss_boundary'] == 0.0
    assert all(np.isfinite(record['loss_consistency']) for record in records)


@pytest.mark.slow
def test_training_increases_the_mean_reward(base, reward):
    config = _small_config(n_rounds=150, trajectories=32, lr_theta=2e-3, lr_phi=2e-3, eval_every=0)
    result = vgg_flow_train(config, base, reward, Rng(0))
    rewards = [record['mean_reward'] for record in result.records]
    assert np.mean(rewards[-10:]) > np.mean(rewards[:10])


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_training_moves_samples_towards_the_ring(seed):
    base = LinearField(np.zeros((2, 2)))
    reward = Ring(2.0, 0.5)
    config = _small_config(n_rounds=150, trajectories=32, lr_theta=2e-3, lr_phi=2e-3, eval_every=0)
    result = vgg_flow_train(config, base, reward, Rng(seed))

    x0 = Rng(seed).child('evaluation').normal(size=(256, 2))
    finetuned = integrate(result.field, x0, config.sampler).terminal
    assert np.mean(reward.value(finetuned)) > np.mean(reward.value(x0))
