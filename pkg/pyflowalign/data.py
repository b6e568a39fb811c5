"""
Toy data distributions which a base flow can be pretrained on.

Every distribution is described by a dict with a "kind" key, which is the form in which it appears in the
experiment configuration:

.. code:: python

    data = distribution_from_dict({'kind': 'gaussian_mixture', 'means': [[-2, 0], [2, 0]], 'variance': 0.1})
    samples = data.sample(512, Rng(0))
"""
import logging
from typing import List, Optional, Dict, Any

import numpy as np
from scipy.special import logsumexp

from pyflowalign.numcore import Rng, Tensor
from pyflowalign.errors import ConfigError

logger = logging.getLogger(__name__)


class ToyDistribution:
    """
    Interface for a sampleable data distribution.

    **The dim attribute**

    The dimension of the samples.

    **The sample method**

    ``sample(n, rng)`` returns an array of shape (n, dim).
    """

    KIND = None

    def __init__(self, dim: int):
        self.dim = dim

    def sample(self, n: int, rng: Rng) -> Tensor:
        raise NotImplementedError()

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError()

    def __str__(self):
        return '{}({})'.format(self.__class__.__name__, self.to_dict())


class GaussianMixture(ToyDistribution):
    """
    An isotropic Gaussian mixture with the given component means, a shared variance and optional weights.
    """

    KIND = 'gaussian_mixture'

    def __init__(self, means, variance: float, weights: Optional[List[float]] = None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        super(GaussianMixture, self).__init__(self.means.shape[1])

        self.variance = float(variance)
        n_components = self.means.shape[0]
        self.weights = (np.full(n_components, 1.0 / n_components) if weights is None
                        else np.asarray(weights, dtype=np.float64))

        if self.variance <= 0:
            raise ConfigError('the mixture variance has to be positive', key='variance')
        if self.weights.shape != (n_components,) or np.any(self.weights <= 0):
            raise ConfigError('mixture weights have to be positive, one per component', key='weights')
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ConfigError('mixture weights have to sum to 1', key='weights')

    def sample(self, n: int, rng: Rng) -> Tensor:
        components = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.normal(size=(n, self.dim))
        return self.means[components] + np.sqrt(self.variance) * noise

    def log_density(self, x: Tensor) -> Tensor:
        x = np.atleast_2d(x)
        sqdist = np.sum(np.square(x[:, None, :] - self.means[None, :, :]), axis=-1)
        log_norm = -0.5 * self.dim * np.log(2 * np.pi * self.variance)
        return logsumexp(np.log(self.weights)[None, :] + log_norm - 0.5 * sqdist / self.variance, axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind':         self.KIND,
            'means':        self.means.tolist(),
            'variance':     self.variance,
            'weights':      self.weights.tolist(),
        }


class Checkerboard(ToyDistribution):
    """
    Uniform distribution on the "black" cells of a two dimensional checkerboard which covers the square
    ``[-extent, extent]^2`` with cells of the given size.
    """

    KIND = 'checkerboard'

    def __init__(self, cell_size: float = 1.0, extent: float = 2.0):
        super(Checkerboard, self).__init__(2)
        self.cell_size = float(cell_size)
        self.extent = float(extent)

        if self.cell_size <= 0 or self.extent < self.cell_size:
            raise ConfigError('checkerboard needs 0 < cell_size <= extent', key='cell_size')

    def sample(self, n: int, rng: Rng) -> Tensor:
        accepted = []
        count = 0
        while count < n:
            candidates = rng.uniform(-self.extent, self.extent, size=(2 * (n - count) + 8, 2))
            cells = np.floor(candidates / self.cell_size).astype(np.int64)
            black = candidates[(cells[:, 0] + cells[:, 1]) % 2 == 0]
            accepted.append(black)
            count += len(black)

        return np.concatenate(accepted, axis=0)[:n]

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.KIND, 'cell_size': self.cell_size, 'extent': self.extent}


class Gaussian(ToyDistribution):
    """
    A Gaussian with diagonal covariance.
    """

    KIND = 'gaussian'

    def __init__(self, mean, covariance_diagonal):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.covariance_diagonal = np.atleast_1d(np.asarray(covariance_diagonal, dtype=np.float64))
        super(Gaussian, self).__init__(self.mean.shape[0])

        if self.covariance_diagonal.shape != self.mean.shape:
            raise ConfigError('the covariance diagonal has to match the dimension of the mean',
                              key='covariance_diagonal')
        if np.any(self.covariance_diagonal <= 0):
            raise ConfigError('variances have to be positive', key='covariance_diagonal')

    def sample(self, n: int, rng: Rng) -> Tensor:
        return self.mean + np.sqrt(self.covariance_diagonal) * rng.normal(size=(n, self.dim))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind':                 self.KIND,
            'mean':                 self.mean.tolist(),
            'covariance_diagonal':  self.covariance_diagonal.tolist(),
        }


class PointMass(ToyDistribution):
    """
    All mass at a single location. The optimal rectified flow transports every noise sample onto it, which
    makes it a convenient sanity check for pretraining.
    """

    KIND = 'point_mass'

    def __init__(self, location):
        self.location = np.atleast_1d(np.asarray(location, dtype=np.float64))
        super(PointMass, self).__init__(self.location.shape[0])

    def sample(self, n: int, rng: Rng) -> Tensor:
        return np.tile(self.location, (n, 1))

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.KIND, 'location': self.location.tolist()}


# CONSTANTS
# ---------

DISTRIBUTION_KINDS = {
    GaussianMixture.KIND:   GaussianMixture,
    Checkerboard.KIND:      Checkerboard,
    Gaussian.KIND:          Gaussian,
    PointMass.KIND:         PointMass,
}


def distribution_from_dict(data: dict) -> ToyDistribution:
    """
    :raises ConfigError: if the kind is unknown or the parameters are not valid for the kind
    """
    data = dict(data)
    kind = data.pop('kind', None)
    if kind not in DISTRIBUTION_KINDS:
        raise ConfigError(f'unknown data distribution kind "{kind}", has to be one of '
                          f'{sorted(DISTRIBUTION_KINDS.keys())}', key='kind')

    try:
        return DISTRIBUTION_KINDS[kind](**data)
    except TypeError as error:
        raise ConfigError(f'invalid parameters for data distribution "{kind}": {error}', key=kind)
