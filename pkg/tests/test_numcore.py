#!/usr/bin/env python

"""Tests for the tape, the differentiable operations and the random streams."""

import numpy as np
import pytest

from pyflowalign import numcore
from pyflowalign.numcore import Tape, Rng, tensor, backward
from pyflowalign.errors import ShapeError, NumericalError


@pytest.fixture
def x():
    return Rng(3).normal(size=(5, 3))


def test_tensor_reshapes_and_is_read_only():
    value = tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
    assert value.shape == (2, 3)
    assert value.dtype == np.float64
    with pytest.raises(ValueError):
        value[0, 0] = 10.0


def test_tensor_rejects_bad_shape_and_non_finite_data():
    with pytest.raises(ShapeError):
        tensor([1, 2, 3], shape=(2, 2))
    with pytest.raises(NumericalError):
        tensor([1.0, np.inf])


def test_operations_without_nodes_return_plain_arrays(x):
    w = np.ones((3, 2))
    result = numcore.tanh(numcore.matmul(x, w))
    assert isinstance(result, np.ndarray)
    assert np.allclose(result, np.tanh(x @ w))


def test_backward_matches_the_analytic_gradient(x):
    tape = Tape()
    w_value = Rng(4).normal(size=(3, 2))
    w = tape.parameter('w', w_value)
    output = numcore.sum(numcore.tanh(numcore.matmul(x, w)))

    gradient = backward(tape, output)['w']
    expected = x.T @ (1.0 - np.tanh(x @ w_value) ** 2)
    assert np.allclose(gradient, expected, rtol=1e-12, atol=1e-12)


def test_backward_broadcast_bias_gradient_is_reduced(x):
    tape = Tape()
    b = tape.parameter('b', np.zeros(3))
    output = numcore.mean(numcore.add(x, b))

    gradient = backward(tape, output)['b']
    assert gradient.shape == (3,)
    assert np.allclose(gradient, np.full(3, 1.0 / 3.0))


def test_unreached_parameters_receive_zero_gradients(x):
    tape = Tape()
    used = tape.parameter('used', np.ones(3))
    tape.parameter('unused', np.ones((2, 2)))
    output = numcore.sum(numcore.mul(x, used))

    gradients = backward(tape, output)
    assert set(gradients.keys()) == {'used', 'unused'}
    assert np.array_equal(gradients['unused'], np.zeros((2, 2)))


def test_stop_gradient_blocks_the_backward_pass(x):
    tape = Tape()
    w = tape.parameter('w', np.ones(3))
    stopped = numcore.stop_gradient(numcore.mul(x, w))
    output = numcore.sum(numcore.add(numcore.square(stopped), numcore.mul(x, w)))

    # only the second summand contributes
    gradient = backward(tape, output)['w']
    assert np.allclose(gradient, np.sum(x, axis=0))


def test_concat_slice_and_sqdist_gradients():
    tape = Tape()
    a = tape.parameter('a', np.array([[1.0, 2.0]]))
    b = tape.parameter('b', np.array([[3.0]]))
    joined = numcore.concat([a, b])
    output = numcore.sum(numcore.sqdist(numcore.slice_(joined, 1, 3), np.array([[0.0, 0.0]])))

    gradients = backward(tape, output)
    assert np.allclose(gradients['a'], [[0.0, 4.0]])
    assert np.allclose(gradients['b'], [[6.0]])


def test_backward_requires_a_scalar(x):
    tape = Tape()
    w = tape.parameter('w', np.ones(3))
    with pytest.raises(ShapeError):
        backward(tape, numcore.mul(x, w))


def test_backward_reports_non_finite_values():
    tape = Tape()
    w = tape.parameter('w', np.array([np.nan, 1.0]))
    with pytest.raises(NumericalError) as error:
        backward(tape, numcore.sum(w))
    assert error.value.location is not None


def test_parameter_names_are_unique_per_tape():
    tape = Tape()
    tape.parameter('w', 1.0)
    with pytest.raises(ValueError):
        tape.parameter('w', 2.0)


def test_rng_children_only_depend_on_seed_and_name():
    parent = Rng(11)
    first = parent.child('noise').normal(size=8)
    parent.normal(size=100)
    second = parent.child('noise').normal(size=8)
    assert np.array_equal(first, second)

    assert not np.array_equal(first, parent.child('data').normal(size=8))
    assert not np.array_equal(first, Rng(12).child('noise').normal(size=8))


def test_rng_accepts_the_full_unsigned_64_bit_range():
    values = Rng(2 ** 64 - 1).child('a').uniform(size=4)
    assert np.all((0.0 <= values) & (values < 1.0))
