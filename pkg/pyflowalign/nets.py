"""
Small multilayer perceptrons with sinusoidal time conditioning and their checkpoint files.

A network maps a point x of dimension d and a time t to a vector of dimension d. The input of the first layer
is the concatenation of x and the time embedding of t. The parameters are stored in a flat ``ParamSet`` with
the names ``layer{i}.weight`` (shape ``(fan_in, fan_out)``) and ``layer{i}.bias``.

Checkpoint format
-----------------
A checkpoint is a single JSON document::

    {
        "schema_version": 1,
        "spec": {...MlpSpec fields...},
        "tensors": {"layer0.weight": {"shape": [10, 64], "data": "<base64 little-endian float64>"}, ...},
        "meta": {"seed": 0, "step": 2000}
    }
"""
import json
import base64
import binascii
import logging
from typing import List, Optional, Dict, Any

import numpy as np

from pyflowalign import numcore
from pyflowalign.numcore import ParamSet, Rng, Tensor
from pyflowalign.errors import CheckpointError, ConfigError, ShapeError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class MlpSpec:
    """
    The architecture of a time conditioned MLP.

    The final layer can be initialized in two modes. "standard" uses fan-in scaled random weights. "tiny"
    sets the final weights and biases to exactly zero, so the network outputs zero for all inputs at
    initialization. Residual fields and value-gradient corrections use the tiny mode.
    """

    _ARGS = ['input_dim', 'time_embed_dim', 'hidden', 'activation', 'output_dim', 'final_init']

    _DEFAULT_CONFIG = {
        'input_dim':        2,
        'time_embed_dim':   8,
        'hidden':           [64, 64],
        'activation':       'silu',
        'output_dim':       None,
        'final_init':       'standard',
    }

    def __init__(self,
                 input_dim: int,
                 time_embed_dim: int = 8,
                 hidden: Optional[List[int]] = None,
                 activation: str = 'silu',
                 output_dim: Optional[int] = None,
                 final_init: str = 'standard'):
        self.input_dim = int(input_dim)
        self.time_embed_dim = int(time_embed_dim)
        self.hidden = [64, 64] if hidden is None else [int(width) for width in hidden]
        self.activation = activation
        self.output_dim = self.input_dim if output_dim is None else int(output_dim)
        self.final_init = final_init

        self._validate()

    # PUBLIC METHODS
    # --------------

    def layer_shapes(self) -> List[tuple]:
        widths = [self.input_dim + self.time_embed_dim] + self.hidden + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    def with_final_init(self, final_init: str) -> 'MlpSpec':
        data = self.to_dict()
        data['final_init'] = final_init
        return MlpSpec.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_dim':        self.input_dim,
            'time_embed_dim':   self.time_embed_dim,
            'hidden':           list(self.hidden),
            'activation':       self.activation,
            'output_dim':       self.output_dim,
            'final_init':       self.final_init,
        }

    @classmethod
    def from_dict(cls, data: dict, config: dict = _DEFAULT_CONFIG) -> 'MlpSpec':
        unknown = set(data.keys()) - set(cls._ARGS)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f'unknown key "{key}" in network spec', key=key)

        kwargs = {key: data[key] if key in data.keys() else config[key] for key in cls._ARGS}
        return MlpSpec(**kwargs)

    # PROTECTED METHODS
    # -----------------

    def _validate(self):
        widths = [self.input_dim, self.output_dim] + self.hidden
        if any(width < 1 for width in widths):
            raise ConfigError('all network widths have to be at least 1')
        if self.time_embed_dim < 0 or self.time_embed_dim % 2 != 0:
            raise ConfigError(f'time embedding dim has to be even, got {self.time_embed_dim}',
                              key='time_embed_dim')
        if self.activation not in numcore.ACTIVATIONS:
            raise ConfigError(f'unknown activation "{self.activation}"', key='activation')
        if self.final_init not in ('standard', 'tiny'):
            raise ConfigError(f'unknown final layer init "{self.final_init}"', key='final_init')

    # MAGIC METHODS
    # -------------

    def __eq__(self, other):
        return isinstance(other, MlpSpec) and self.to_dict() == other.to_dict()

    def __str__(self):
        return 'MlpSpec(d={}, hidden={}, activation={}, final_init={})'.format(
            self.input_dim,
            self.hidden,
            self.activation,
            self.final_init
        )


def time_embed(t, dim: int) -> Tensor:
    """
    Returns the sinusoidal embedding ``[sin(2 pi f_k t)..., cos(2 pi f_k t)...]`` with the frequencies
    ``f_k = 2^(k-1)`` for k = 1 .. dim/2.

    :param t: a scalar time or an array of shape (B,)
    :param dim: the even embedding dimension

    :raises ConfigError: for odd dimensions

    :return: array of shape (dim,) for scalar t, (B, dim) otherwise
    """
    if dim % 2 != 0:
        raise ConfigError(f'time embedding dim has to be even, got {dim}', key='time_embed_dim')

    frequencies = 2.0 ** np.arange(dim // 2)
    angles = 2.0 * np.pi * np.multiply.outer(np.asarray(t, dtype=np.float64), frequencies)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def init_mlp(spec: MlpSpec, rng: Rng) -> ParamSet:
    """
    Hidden layers use He-style fan-in scaling. The final layer uses 1/sqrt(fan_in) scaling in "standard"
    mode and exact zeros in "tiny" mode.
    """
    params = {}
    shapes = spec.layer_shapes()
    for index, (fan_in, fan_out) in enumerate(shapes):
        final = index == len(shapes) - 1
        if final and spec.final_init == 'tiny':
            weight = np.zeros((fan_in, fan_out))
        else:
            std = np.sqrt((1.0 if final else 2.0) / fan_in)
            weight = rng.normal(0.0, std, size=(fan_in, fan_out))

        params[f'layer{index}.weight'] = weight
        params[f'layer{index}.bias'] = np.zeros(fan_out)

    return params


def mlp_forward(params: ParamSet, x, t, spec: MlpSpec):
    """
    Evaluates the network on the concatenation of x and the time embedding of t.

    The parameters as well as x may either be plain arrays or tape nodes; in the latter case the pass is
    recorded and can be differentiated.

    :param x: point of shape (d,) or batch of shape (B, d)
    :param t: scalar time or array of shape (B,)

    :raises ShapeError: if the last dimension of x does not match the network input

    :return: output of shape (d_out,) or (B, d_out)
    """
    x_value = numcore.value_of(x)
    if x_value.shape[-1] != spec.input_dim:
        raise ShapeError(f'network expects inputs of dimension {spec.input_dim}, got {x_value.shape[-1]}')

    t = np.asarray(t, dtype=np.float64)
    if x_value.ndim == 2 and t.ndim == 0:
        t = np.full(x_value.shape[0], float(t))

    h = x
    if spec.time_embed_dim > 0:
        h = numcore.concat([x, time_embed(t, spec.time_embed_dim)], axis=-1)

    activation = numcore.ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_shapes())
    for index in range(n_layers):
        h = numcore.add(numcore.matmul(h, params[f'layer{index}.weight']), params[f'layer{index}.bias'])
        if index < n_layers - 1:
            h = activation(h)

    return h


# CHECKPOINTS
# ###########


class Checkpoint:

    def __init__(self, spec: MlpSpec, params: ParamSet, meta: Optional[dict] = None):
        self.spec = spec
        self.params = params
        self.meta = meta or {}

    def __str__(self):
        return 'Checkpoint(spec={}, meta={})'.format(self.spec, self.meta)


def _encode_tensor(value: Tensor) -> dict:
    data = np.ascontiguousarray(value, dtype='<f8').tobytes()
    return {'shape': list(value.shape), 'data': base64.b64encode(data).decode('ascii')}


def _decode_tensor(name: str, entry: dict) -> Tensor:
    shape = tuple(entry['shape'])
    if not all(isinstance(size, int) and not isinstance(size, bool) and size >= 0 for size in shape):
        raise CheckpointError(f'tensor "{name}" has the invalid shape {shape}')

    buffer = base64.b64decode(entry['data'], validate=True)
    try:
        array = np.frombuffer(buffer, dtype='<f8')
    except ValueError as error:
        raise CheckpointError(f'tensor "{name}" is not a float64 buffer: {error}')
    if array.size != int(np.prod(shape)):
        raise CheckpointError(f'tensor "{name}" holds {array.size} values, expected shape {shape}')
    return array.reshape(shape).astype(np.float64)


def save_checkpoint(path: str, spec: MlpSpec, params: ParamSet, meta: Optional[dict] = None):
    document = {
        'schema_version':   SCHEMA_VERSION,
        'spec':             spec.to_dict(),
        'tensors':          {name: _encode_tensor(value) for name, value in params.items()},
        'meta':             meta or {},
    }
    with open(path, mode='w') as file:
        json.dump(document, file)


def load_checkpoint(path: str) -> Checkpoint:
    """
    Loads a checkpoint written by ``save_checkpoint``. The parameters are bitwise identical to the saved ones.

    :raises CheckpointError: if the file is malformed, has a different schema version or holds tensors
        which do not match the embedded network spec
    """
    try:
        with open(path, mode='r') as file:
            document = json.load(file)
    except (json.JSONDecodeError, UnicodeDecodeError) as error:
        raise CheckpointError(f'malformed checkpoint file "{path}": {error}')

    if not isinstance(document, dict) or 'schema_version' not in document:
        raise CheckpointError(f'malformed checkpoint file "{path}": missing schema version')
    if document['schema_version'] != SCHEMA_VERSION:
        raise CheckpointError('checkpoint schema version {} is not supported, expected {}'.format(
            document['schema_version'], SCHEMA_VERSION
        ))

    try:
        spec = MlpSpec.from_dict(document['spec'])
        params = {name: _decode_tensor(name, entry) for name, entry in document['tensors'].items()}
        meta = document.get('meta', {})
    except (KeyError, TypeError, binascii.Error, ConfigError) as error:
        raise CheckpointError(f'malformed checkpoint file "{path}": {error}')

    expected = {}
    for index, shape in enumerate(spec.layer_shapes()):
        expected[f'layer{index}.weight'] = tuple(shape)
        expected[f'layer{index}.bias'] = (shape[1],)
    actual = {name: value.shape for name, value in params.items()}
    if actual != expected:
        raise CheckpointError(f'checkpoint tensors {actual} do not match the spec {expected}')

    return Checkpoint(spec, params, meta)
