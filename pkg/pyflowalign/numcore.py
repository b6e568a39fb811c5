"""
Minimal dense tensor numerics: a recording tape for reverse-mode automatic differentiation, the fixed set of
differentiable operations and seeded random streams.

Values are plain float64 numpy arrays. The differentiable handles are ``Node`` objects which belong to a
``Tape``. Every operation in this module accepts both: if none of the arguments is a node, the operation is
evaluated directly with numpy and no tape is involved. This makes it possible to write a function such as a
network forward pass once and use it for fast evaluation as well as for differentiation.

.. code:: python

    tape = Tape()
    w = tape.parameter('w', np.ones((3, 3)))
    y = numcore.sum(numcore.tanh(w @ x))
    gradients = backward(tape, y)

Stop-gradient
-------------
``stop_gradient(node)`` creates a new node with the same value, but the backward pass does not propagate
anything through it. Parameter gradients therefore behave exactly as if the value was a constant.
"""
import zlib
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union, Callable

import numpy as np

from pyflowalign.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
"""Tensors are float64 numpy arrays. Shape and row-major data are the ones of the array."""

ParamSet = Dict[str, Tensor]


def tensor(data, shape: Optional[Sequence[int]] = None) -> Tensor:
    """
    Creates a read-only float64 tensor from the given data.

    :param data: anything which numpy can convert into an array
    :param shape: optional target shape. The size of the data has to match the product of the shape.

    :raises ShapeError: if the data does not fit the shape
    :raises NumericalError: if the data contains non-finite values

    :return: the tensor
    """
    array = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if array.size != int(np.prod(shape)):
            raise ShapeError(f'data of size {array.size} does not fit shape {shape}')
        array = array.reshape(shape)

    if not np.all(np.isfinite(array)):
        raise NumericalError('tensor data contains non-finite values')

    array.flags.writeable = False
    return array


# THE TAPE
# ########


class Node:
    """
    A single recorded value on a ``Tape``.

    Nodes are created by the tape and by the operations of this module, never directly. The arithmetic
    operators are overloaded, so ``a + b``, ``a - b``, ``a * b``, ``a @ b`` and ``-a`` record the
    corresponding operation.
    """

    # Makes numpy return NotImplemented for "array + node", so the reflected operators of the node are used
    __array_ufunc__ = None

    def __init__(self,
                 tape: 'Tape',
                 index: int,
                 kind: str,
                 parents: Tuple['Node', ...],
                 value: Tensor,
                 saved: Optional[dict] = None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.parents = parents
        self.value = value
        self.saved = saved or {}

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    # MAGIC METHODS
    # -------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        assert np.isscalar(other), 'nodes can only be divided by scalars'
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __str__(self):
        return 'Node(index={}, kind={}, shape={})'.format(self.index, self.kind, self.shape)


class Tape:
    """
    Records the nodes of a computation in topological order. Parents are always recorded before their
    children, because a node can only be created from already existing nodes.

    Each tape is meant to be used by a single thread and for a single backward pass.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, int] = {}

    # PUBLIC METHODS
    # --------------

    def parameter(self, name: str, value) -> Node:
        """
        Registers a named parameter. The backward pass returns a gradient for every registered parameter,
        which is the zero tensor if the output does not depend on it.

        :raises ValueError: if the name is already taken on this tape
        """
        if name in self.parameters:
            raise ValueError(f'parameter "{name}" is already registered on this tape')

        node = self.record('parameter', (), np.asarray(value, dtype=np.float64), name=name)
        self.parameters[name] = node.index
        return node

    def parameters_from(self, params: ParamSet, prefix: str = '') -> Dict[str, Node]:
        """
        Registers all the tensors of a parameter set and returns the dict of the corresponding nodes, keyed
        by the original names. The tape names are prefixed with the given string.
        """
        return {name: self.parameter(prefix + name, value) for name, value in params.items()}

    def constant(self, value) -> Node:
        return self.record('constant', (), np.asarray(value, dtype=np.float64))

    def stop_gradient(self, node: Node) -> Node:
        return self.record('stop', (node,), node.value)

    def record(self, kind: str, parents: Tuple[Node, ...], value: Tensor, **saved) -> Node:
        node = Node(self, len(self.nodes), kind, parents, value, saved)
        self.nodes.append(node)
        return node

    def lift(self, value: Union[Node, Tensor, float]) -> Node:
        if isinstance(value, Node):
            assert value.tape is self, 'nodes of different tapes cannot be combined'
            return value
        return self.constant(value)

    # MAGIC METHODS
    # -------------

    def __len__(self) -> int:
        return len(self.nodes)


def value_of(x: Union[Node, Tensor, float]) -> Tensor:
    """Returns the plain numpy value of a node or array."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def is_node(x) -> bool:
    return isinstance(x, Node)


def _find_tape(*args) -> Optional[Tape]:
    for arg in args:
        if isinstance(arg, Node):
            return arg.tape
    return None


# OPERATIONS
# ##########
# Every operation dispatches on its arguments: with at least one node it records on the tape of that node,
# otherwise it simply computes the numpy result.


def matmul(a, b):
    tape = _find_tape(a, b)
    value = np.matmul(value_of(a), value_of(b))
    if tape is None:
        return value
    return tape.record('matmul', (tape.lift(a), tape.lift(b)), value)


def add(a, b):
    tape = _find_tape(a, b)
    value = value_of(a) + value_of(b)
    if tape is None:
        return value
    return tape.record('add', (tape.lift(a), tape.lift(b)), value)


def sub(a, b):
    tape = _find_tape(a, b)
    value = value_of(a) - value_of(b)
    if tape is None:
        return value
    return tape.record('sub', (tape.lift(a), tape.lift(b)), value)


def mul(a, b):
    tape = _find_tape(a, b)
    value = value_of(a) * value_of(b)
    if tape is None:
        return value
    return tape.record('mul', (tape.lift(a), tape.lift(b)), value)


def scale(a, factor: float):
    factor = float(factor)
    value = value_of(a) * factor
    if not isinstance(a, Node):
        return value
    return a.tape.record('scale', (a,), value, factor=factor)


def sum(a, axis: Optional[int] = None):
    value = np.sum(value_of(a), axis=axis)
    if not isinstance(a, Node):
        return value
    return a.tape.record('sum', (a,), np.asarray(value), axis=axis)


def mean(a, axis: Optional[int] = None):
    value = np.mean(value_of(a), axis=axis)
    if not isinstance(a, Node):
        return value
    return a.tape.record('mean', (a,), np.asarray(value), axis=axis)


def tanh(a):
    value = np.tanh(value_of(a))
    if not isinstance(a, Node):
        return value
    return a.tape.record('tanh', (a,), value)


def _sigmoid(x: Tensor) -> Tensor:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a):
    x = value_of(a)
    value = x * _sigmoid(x)
    if not isinstance(a, Node):
        return value
    return a.tape.record('silu', (a,), value)


def relu(a):
    value = np.maximum(value_of(a), 0.0)
    if not isinstance(a, Node):
        return value
    return a.tape.record('relu', (a,), value)


def square(a):
    value = np.square(value_of(a))
    if not isinstance(a, Node):
        return value
    return a.tape.record('square', (a,), value)


def sqdist(a, b):
    """Squared euclidean distance along the last axis."""
    tape = _find_tape(a, b)
    value = np.sum(np.square(value_of(a) - value_of(b)), axis=-1)
    if tape is None:
        return value
    return tape.record('sqdist', (tape.lift(a), tape.lift(b)), np.asarray(value))


def concat(items: Sequence, axis: int = -1):
    tape = _find_tape(*items)
    values = [value_of(item) for item in items]
    value = np.concatenate(values, axis=axis)
    if tape is None:
        return value
    sizes = [v.shape[axis] for v in values]
    return tape.record('concat', tuple(tape.lift(item) for item in items), value, axis=axis, sizes=sizes)


def slice_(a, start: int, stop: int):
    """Slices the last axis."""
    value = value_of(a)[..., start:stop]
    if not isinstance(a, Node):
        return value
    return a.tape.record('slice', (a,), value, start=start, stop=stop)


def stop_gradient(a):
    if not isinstance(a, Node):
        return value_of(a)
    return a.tape.stop_gradient(a)


ACTIVATIONS: Dict[str, Callable] = {
    'silu':     silu,
    'tanh':     tanh,
    'relu':     relu,
    'identity': lambda a: a,
}


# BACKWARD
# ########


def _unbroadcast(gradient: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum-reduces a gradient over the axes along which the forward pass has broadcast."""
    while gradient.ndim > len(shape):
        gradient = gradient.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and gradient.shape[axis] != 1:
            gradient = gradient.sum(axis=axis, keepdims=True)
    return gradient.reshape(shape)


def _vjp_matmul(node: Node, g: Tensor):
    a, b = node.parents[0].value, node.parents[1].value
    assert a.ndim <= 2 and b.ndim <= 2, 'matmul supports vectors and matrices only'
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def _vjp_reduce(node: Node, g: Tensor, count: float):
    x = node.parents[0].value
    axis = node.saved['axis']
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape) / count,)


def _vjp_silu(node: Node, g: Tensor):
    x = node.parents[0].value
    s = _sigmoid(x)
    return (g * (s + x * s * (1.0 - s)),)


def _vjp_sqdist(node: Node, g: Tensor):
    a, b = node.parents[0].value, node.parents[1].value
    ga = 2.0 * (a - b) * np.expand_dims(g, -1)
    return ga, -ga


def _vjp_concat(node: Node, g: Tensor):
    axis = node.saved['axis']
    splits = np.cumsum(node.saved['sizes'])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _vjp_slice(node: Node, g: Tensor):
    x = node.parents[0].value
    result = np.zeros_like(x)
    result[..., node.saved['start']:node.saved['stop']] = g
    return (result,)


VJP_RULES: Dict[str, Callable[[Node, Tensor], tuple]] = {
    'matmul':   _vjp_matmul,
    'add':      lambda node, g: (g, g),
    'sub':      lambda node, g: (g, -g),
    'mul':      lambda node, g: (g * node.parents[1].value, g * node.parents[0].value),
    'scale':    lambda node, g: (g * node.saved['factor'],),
    'sum':      lambda node, g: _vjp_reduce(node, g, 1.0),
    'mean':     lambda node, g: _vjp_reduce(node, g, node.parents[0].value.size / max(node.value.size, 1)),
    'tanh':     lambda node, g: (g * (1.0 - np.square(node.value)),),
    'silu':     _vjp_silu,
    'relu':     lambda node, g: (g * (node.parents[0].value > 0.0),),
    'square':   lambda node, g: (2.0 * g * node.parents[0].value,),
    'sqdist':   _vjp_sqdist,
    'concat':   _vjp_concat,
    'slice':    _vjp_slice,
}
"""Maps the kind of a node to the function computing the gradients of its parents from its own gradient."""


def backward(tape: Tape, output: Node) -> Dict[str, Tensor]:
    """
    Computes the gradient of the scalar ``output`` with respect to every parameter registered on ``tape``.

    The nodes are visited in reverse recording order, which is a valid reverse topological order. Nodes of
    kind "stop" end the propagation, so everything that only contributes through them receives a zero
    gradient.

    :raises ShapeError: if the output is not a scalar
    :raises NumericalError: if a non-finite value or gradient is encountered. The location is the node id.

    :return: dict mapping parameter names to their gradient tensors
    """
    assert output.tape is tape, 'the output node has to belong to the given tape'
    if output.value.size != 1:
        raise ShapeError(f'backward requires a scalar output, got shape {output.shape}')

    adjoints: Dict[int, Tensor] = {output.index: np.ones_like(output.value)}
    for node in reversed(tape.nodes[:output.index + 1]):
        g = adjoints.pop(node.index, None)
        if g is None:
            continue

        if not np.all(np.isfinite(node.value)) or not np.all(np.isfinite(g)):
            raise NumericalError(f'non-finite value encountered at node {node.index} ({node.kind})',
                                 location=node.index)

        if node.kind in ('parameter', 'constant', 'stop'):
            if node.kind == 'parameter':
                adjoints[node.index] = g
            continue

        parent_gradients = VJP_RULES[node.kind](node, g)
        for parent, pg in zip(node.parents, parent_gradients):
            if parent.kind == 'constant':
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
            if parent.index in adjoints:
                adjoints[parent.index] = adjoints[parent.index] + pg
            else:
                adjoints[parent.index] = pg

    gradients = {}
    for name, index in tape.parameters.items():
        node = tape.nodes[index]
        g = adjoints.get(index)
        gradients[name] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.shape)
    return gradients


# RANDOM STREAMS
# ##############


class Rng:
    """
    A seeded random stream based on the counter-based Philox generator.

    Named substreams are derived with ``child(name)``. They only depend on the seed and the sequence of
    names, not on how much randomness the parent stream has already consumed, so every component of an
    experiment can draw from its own independent stream.

    .. code:: python

        rng = Rng(42)
        x0 = rng.child('trajectories').normal(size=(64, 2))
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    # PUBLIC METHODS
    # --------------

    def child(self, name: str) -> 'Rng':
        return Rng(self.seed, self.path + (zlib.crc32(name.encode('utf-8')),))

    def normal(self, loc=0.0, scale=1.0, size=None) -> Tensor:
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> Tensor:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, p=None):
        return self.generator.choice(a, size=size, p=p)

    # MAGIC METHODS
    # -------------

    def __str__(self):
        return 'Rng(seed={}, path={})'.format(self.seed, self.path)
