#!/usr/bin/env python

"""Tests for the AdamW optimizer and the gradient clipping."""

import numpy as np
import pytest

from pyflowalign.optim import OptState, adamw_step, global_norm, clip_global_norm, optimizer_update
from pyflowalign.errors import ShapeError, NumericalError


@pytest.fixture
def params():
    return {'w': np.array([1.0, -2.0]), 'b': np.array([0.5])}


def test_first_step_moves_every_coordinate_by_the_learning_rate(params):
    state = OptState.create(params, lr=0.1)
    grads = {'w': np.array([0.5, -3.0]), 'b': np.array([2.0])}

    updated, state = adamw_step(params, grads, state)
    # the bias corrected first step is lr * g / |g|
    assert np.allclose(updated['w'], [0.9, -1.9], atol=1e-6)
    assert np.allclose(updated['b'], [0.4], atol=1e-6)
    assert state.step == 1


def test_weight_decay_is_decoupled(params):
    state = OptState.create(params, lr=0.1, weight_decay=0.5)
    grads = {'w': np.zeros(2), 'b': np.zeros(1)}

    updated, _ = adamw_step(params, grads, state)
    assert np.allclose(updated['w'], params['w'] * (1.0 - 0.1 * 0.5))


def test_adamw_step_does_not_modify_its_inputs(params):
    original = {key: value.copy() for key, value in params.items()}
    state = OptState.create(params, lr=0.1)
    adamw_step(params, {'w': np.ones(2), 'b': np.ones(1)}, state)

    assert state.step == 0
    for key in params:
        assert np.array_equal(params[key], original[key])


def test_adamw_step_rejects_mismatching_gradients(params):
    state = OptState.create(params, lr=0.1)
    with pytest.raises(ShapeError):
        adamw_step(params, {'w': np.ones(2)}, state)
    with pytest.raises(ShapeError):
        adamw_step(params, {'w': np.ones(3), 'b': np.ones(1)}, state)


def test_adamw_step_rejects_non_finite_gradients(params):
    state = OptState.create(params, lr=0.1)
    with pytest.raises(NumericalError):
        adamw_step(params, {'w': np.array([np.nan, 0.0]), 'b': np.ones(1)}, state)


def test_clipping_rescales_to_the_maximum_norm():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    assert global_norm(grads) == 5.0

    clipped = clip_global_norm(grads, 1.0)
    assert np.allclose(clipped['a'], [0.6])
    assert np.allclose(clipped['b'], [0.8])
    assert np.array_equal(clip_global_norm(grads, 10.0)['a'], grads['a'])


def test_clipping_leaves_zero_gradients_alone():
    clipped = clip_global_norm({'a': np.zeros(3)}, 1.0)
    assert np.array_equal(clipped['a'], np.zeros(3))


def test_optimizer_update_reports_the_norm_before_clipping(params):
    state = OptState.create(params, lr=0.01)
    grads = {'w': np.array([3.0, 0.0]), 'b': np.array([4.0])}

    _, state, norm = optimizer_update(params, grads, state, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert state.step == 1
