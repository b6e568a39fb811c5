"""
Analytic reward functions with exact gradients.

All rewards evaluate single points of shape (d,) as well as batches of shape (B, d). Values are scalars or
arrays of shape (B,), gradients have the shape of the input.

.. code:: python

    reward = reward_from_dict({'kind': 'ring', 'radius': 2.0, 'width': 0.5})
    reward_eval(reward, np.array([2.0, 0.0]))   # 0.0, the maximum
"""
import logging
from typing import Optional, Dict, Any

import numpy as np
from scipy.special import logsumexp, softmax

from pyflowalign.numcore import Tensor
from pyflowalign.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


class Reward:
    """
    Interface for a differentiable reward function.

    **The value method**

    ``value(x)`` returns the reward of a point or of every row of a batch.

    **The grad method**

    ``grad(x)`` returns the gradient of the reward with respect to x.

    **The dim attribute**

    The dimension of the input or None if the reward is defined for every dimension.
    """

    KIND = None

    def __init__(self, dim: Optional[int]):
        self.dim = dim

    def value(self, x: Tensor) -> Tensor:
        raise NotImplementedError()

    def grad(self, x: Tensor) -> Tensor:
        raise NotImplementedError()

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError()

    def check_input(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if self.dim is not None and x.shape[-1] != self.dim:
            raise ShapeError(f'{self.KIND} reward expects inputs of dimension {self.dim}, got {x.shape[-1]}')
        return x

    def __str__(self):
        return '{}({})'.format(self.__class__.__name__, self.to_dict())


class Quadratic(Reward):
    """
    The concave quadratic ``r(x) = -1/2 x^T H x + h^T x`` with a symmetric positive semidefinite H. This is
    the terminal reward of the linear quadratic problems which have an exact solution.
    """

    KIND = 'quadratic'

    def __init__(self, H, h):
        self.H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        self.h = np.atleast_1d(np.asarray(h, dtype=np.float64))
        super(Quadratic, self).__init__(self.h.shape[0])

        if self.H.shape != (self.dim, self.dim):
            raise ConfigError(f'H has to be a {self.dim}x{self.dim} matrix, got shape {self.H.shape}', key='H')
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ConfigError('H has to be symmetric', key='H')
        if np.min(np.linalg.eigvalsh(self.H)) < -1e-10:
            raise ConfigError('H has to be positive semidefinite', key='H')

    def value(self, x: Tensor) -> Tensor:
        x = self.check_input(x)
        return -0.5 * np.sum(x * (x @ self.H), axis=-1) + x @ self.h

    def grad(self, x: Tensor) -> Tensor:
        x = self.check_input(x)
        return -(x @ self.H) + self.h

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.KIND, 'H': self.H.tolist(), 'h': self.h.tolist()}


class GaussMixLogDensity(Reward):
    """
    The log density of an isotropic Gaussian mixture. Its gradient is the responsibility weighted sum of
    ``(mu_k - x) / variance``.
    """

    KIND = 'gauss_mix_log_density'

    def __init__(self, means, weights, variance: float):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        self.variance = float(variance)
        super(GaussMixLogDensity, self).__init__(self.means.shape[1])

        if self.weights.shape != (self.means.shape[0],) or np.any(self.weights <= 0):
            raise ConfigError('mixture weights have to be positive, one per component', key='weights')
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ConfigError('mixture weights have to sum to 1', key='weights')
        if self.variance <= 0:
            raise ConfigError('the mixture variance has to be positive', key='variance')

    def _log_terms(self, x: Tensor) -> Tensor:
        sqdist = np.sum(np.square(x[..., None, :] - self.means), axis=-1)
        log_norm = -0.5 * self.dim * np.log(2.0 * np.pi * self.variance)
        return np.log(self.weights) + log_norm - 0.5 * sqdist / self.variance

    def value(self, x: Tensor) -> Tensor:
        x = self.check_input(x)
        return logsumexp(self._log_terms(x), axis=-1)

    def grad(self, x: Tensor) -> Tensor:
        x = self.check_input(x)
        responsibilities = softmax(self._log_terms(x), axis=-1)
        return (responsibilities @ self.means - x) / self.variance

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind':         self.KIND,
            'means':        self.means.tolist(),
            'weights':      self.weights.tolist(),
            'variance':     self.variance,
        }


class Ring(Reward):
    """
    ``r(x) = -(|x| - radius)^2 / (2 width^2)`` which is maximal (zero) on the sphere of the given radius.
    At the origin the gradient is not defined and taken to be zero.
    """

    KIND = 'ring'

    def __init__(self, radius: float, width: float):
        super(Ring, self).__init__(None)
        self.radius = float(radius)
        self.width = float(width)

        if self.radius <= 0:
            raise ConfigError('the ring radius has to be positive', key='radius')
        if self.width <= 0:
            raise ConfigError('the ring width has to be positive', key='width')

    def value(self, x: Tensor) -> Tensor:
        x = self.check_input(x)
        norm = np.linalg.norm(x, axis=-1)
        return -np.square(norm - self.radius) / (2.0 * self.width ** 2)

    def grad(self, x: Tensor) -> Tensor:
        x = self.check_input(x)
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        safe_norm = np.where(norm > 0.0, norm, 1.0)
        direction = np.where(norm > 0.0, x / safe_norm, 0.0)
        return -(norm - self.radius) / self.width ** 2 * direction

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.KIND, 'radius': self.radius, 'width': self.width}


class ReluWrapped(Reward):
    """
    ``max(0, inner(x))``. The gradient is zero wherever the inner reward is not positive, including the kink.
    """

    KIND = 'relu'

    def __init__(self, inner: Reward):
        super(ReluWrapped, self).__init__(inner.dim)
        self.inner = inner

    def value(self, x: Tensor) -> Tensor:
        return np.maximum(self.inner.value(x), 0.0)

    def grad(self, x: Tensor) -> Tensor:
        active = self.inner.value(x) > 0.0
        return self.inner.grad(x) * np.expand_dims(active, -1)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.KIND, 'inner': self.inner.to_dict()}


# CONSTANTS
# ---------

REWARD_KINDS = {
    Quadratic.KIND:             Quadratic,
    GaussMixLogDensity.KIND:    GaussMixLogDensity,
    Ring.KIND:                  Ring,
    ReluWrapped.KIND:           ReluWrapped,
}


def reward_from_dict(data: dict) -> Reward:
    """
    :raises ConfigError: for unknown kinds and invalid parameters
    """
    data = dict(data)
    kind = data.pop('kind', None)
    if kind not in REWARD_KINDS:
        raise ConfigError(f'unknown reward kind "{kind}", has to be one of {sorted(REWARD_KINDS.keys())}',
                          key='kind')

    if kind == ReluWrapped.KIND:
        if 'inner' not in data:
            raise ConfigError('relu rewards need an "inner" reward', key='inner')
        return ReluWrapped(reward_from_dict(data['inner']))

    try:
        return REWARD_KINDS[kind](**data)
    except TypeError as error:
        raise ConfigError(f'invalid parameters for reward "{kind}": {error}', key=kind)


def reward_eval(reward: Reward, x) -> Tensor:
    """
    :raises ShapeError: if the dimension of x does not match the reward
    """
    return reward.value(x)


def reward_grad(reward: Reward, x) -> Tensor:
    """
    :raises ShapeError: if the dimension of x does not match the reward
    """
    return reward.grad(x)
