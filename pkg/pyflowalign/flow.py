"""
Velocity fields, ODE sampling, rectified flow pretraining and log densities along a flow.

A velocity field is any callable ``v(x, t)`` which maps a point of shape (d,) or a batch of shape (B, d) and a
scalar time or a time array of shape (B,) to velocities of the same shape as x. The fields of this module
additionally accept tape nodes as x, which is what the truncated backpropagation baselines rely on.

.. code:: python

    base = pretrain_rectified_flow(data, MlpSpec(2), steps=2000, batch=256, lr=1e-3, rng=Rng(0))
    trajectory = integrate(base, Rng(1).normal(size=(512, 2)), SamplerConfig(n_steps=20))
    samples = trajectory.terminal
"""
import logging
from typing import Optional, Callable, Iterator, Tuple, List, Dict, Any

import numpy as np
from scipy.integrate import trapezoid

from pyflowalign import numcore
from pyflowalign.numcore import Tape, Rng, Tensor, ParamSet, backward
from pyflowalign.nets import MlpSpec, init_mlp, mlp_forward
from pyflowalign.optim import OptState, optimizer_update
from pyflowalign.data import ToyDistribution
from pyflowalign.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


# VELOCITY FIELDS
# ###############


class VelocityField:
    """
    Interface for a time dependent velocity field on R^d.

    **The dim attribute**

    The dimension d of the space, or None if the field works for any dimension.

    **The __call__ method**

    ``field(x, t)`` returns the velocity at x and t.
    """

    def __init__(self, dim: Optional[int]):
        self.dim = dim

    def __call__(self, x, t):
        raise NotImplementedError()


class ConstantField(VelocityField):

    def __init__(self, velocity):
        self.velocity = np.atleast_1d(np.asarray(velocity, dtype=np.float64))
        super(ConstantField, self).__init__(self.velocity.shape[0])

    def __call__(self, x, t):
        return np.broadcast_to(self.velocity, numcore.value_of(x).shape).copy()


class LinearField(VelocityField):
    """
    The time independent linear field ``v(x) = A x``. Since the Jacobian is A itself, the exact Lipschitz
    constant is the spectral norm of A.
    """

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if self.A.shape[0] != self.A.shape[1]:
            raise ShapeError(f'linear fields need a square matrix, got shape {self.A.shape}')
        super(LinearField, self).__init__(self.A.shape[0])

    def __call__(self, x, t):
        return numcore.matmul(x, self.A.T)

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.A, ord=2))


class FunctionField(VelocityField):
    """
    Wraps a plain function ``fn(x, t)``. The function only ever receives numpy arrays, so such a field can be
    sampled from but not differentiated through.
    """

    def __init__(self, fn: Callable, dim: Optional[int] = None):
        super(FunctionField, self).__init__(dim)
        self.fn = fn

    def __call__(self, x, t):
        return np.asarray(self.fn(numcore.value_of(x), t), dtype=np.float64)


class MlpField(VelocityField):
    """
    A velocity field given by a time conditioned MLP. Calling the field with an explicit ``params`` argument
    evaluates the same architecture with other parameters, for instance with tape nodes during training.
    """

    def __init__(self, spec: MlpSpec, params: ParamSet):
        super(MlpField, self).__init__(spec.input_dim)
        self.spec = spec
        self.params = params

    def with_params(self, params: ParamSet) -> 'MlpField':
        return MlpField(self.spec, params)

    def __call__(self, x, t, params=None):
        return mlp_forward(self.params if params is None else params, x, t, self.spec)

    def __str__(self):
        return 'MlpField(spec={})'.format(self.spec)


class ResidualField(VelocityField):
    """
    The finetuned field ``v_theta = v_base + residual``. Only the residual is trained; if it is an MLP its
    parameters theta can be passed explicitly with the ``params`` argument.
    """

    def __init__(self, base: VelocityField, residual: VelocityField):
        super(ResidualField, self).__init__(base.dim)
        self.base = base
        self.residual = residual

    @property
    def params(self) -> ParamSet:
        return self.residual.params

    def with_params(self, params: ParamSet) -> 'ResidualField':
        return ResidualField(self.base, self.residual.with_params(params))

    def residual_velocity(self, x, t, params=None):
        if params is None:
            return self.residual(x, t)
        return self.residual(x, t, params=params)

    def __call__(self, x, t, params=None):
        return numcore.add(self.base(x, t), self.residual_velocity(x, t, params))


# SAMPLING
# ########


class SamplerConfig:

    _ARGS = ['n_steps', 'integrator']

    _DEFAULT_CONFIG = {
        'n_steps':      20,
        'integrator':   'euler',
    }

    INTEGRATORS = ['euler', 'rk4']

    def __init__(self, n_steps: int = 20, integrator: str = 'euler'):
        self.n_steps = n_steps
        self.integrator = integrator

        if not isinstance(n_steps, int) or isinstance(n_steps, bool) or n_steps < 1:
            raise ConfigError(f'the number of sampler steps has to be a positive integer, got {n_steps}',
                              key='n_steps')
        if integrator not in self.INTEGRATORS:
            raise ConfigError(f'unknown integrator "{integrator}", has to be one of {self.INTEGRATORS}',
                              key='integrator')

    def to_dict(self) -> Dict[str, Any]:
        return {'n_steps': self.n_steps, 'integrator': self.integrator}

    @classmethod
    def from_dict(cls, data: dict, config: dict = _DEFAULT_CONFIG) -> 'SamplerConfig':
        unknown = set(data.keys()) - set(cls._ARGS)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f'unknown key "{key}" in sampler config', key=key)

        kwargs = {key: data[key] if key in data.keys() else config[key] for key in cls._ARGS}
        return SamplerConfig(**kwargs)

    def __str__(self):
        return 'SamplerConfig(n_steps={}, integrator={})'.format(self.n_steps, self.integrator)


class Trajectory:
    """
    The result of integrating a field from t=0 to t=1.

    ``states`` has the shape (n+1, d) for a single initial point or (n+1, B, d) for a batch, ``velocities``
    caches the field value at the beginning of every step and therefore has one entry less.
    """

    def __init__(self, times: Tensor, states: Tensor, velocities: Tensor):
        if len(states) != len(times):
            raise ShapeError(f'{len(states)} states do not match {len(times)} times')
        if np.any(np.diff(times) <= 0):
            raise ValueError('trajectory times have to be strictly increasing')

        self.times = times
        self.states = states
        self.velocities = velocities

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def terminal(self) -> Tensor:
        return self.states[-1]

    def __len__(self):
        return len(self.times)

    def __str__(self):
        return 'Trajectory(n_steps={}, state_shape={})'.format(self.n_steps, self.states.shape[1:])


def _step(v: Callable, x: Tensor, t: float, dt: float, method: str) -> Tuple[Tensor, Tensor]:
    k1 = numcore.value_of(v(x, t))
    if method == 'euler':
        return x + dt * k1, k1

    k2 = numcore.value_of(v(x + 0.5 * dt * k1, t + 0.5 * dt))
    k3 = numcore.value_of(v(x + 0.5 * dt * k2, t + 0.5 * dt))
    k4 = numcore.value_of(v(x + dt * k3, t + dt))
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def solve(v: Callable, x: Tensor, t_start: float, t_end: float, n_steps: int, method: str = 'euler'):
    """
    Integrates the ODE on the uniform grid from ``t_start`` to ``t_end``, which may also run backwards in
    time.

    :raises NumericalError: if a state becomes non-finite. The location is the index of the step.

    :return: tuple of the time grid, the stacked states and the stacked velocities at the grid points
    """
    times = np.linspace(t_start, t_end, n_steps + 1)
    dt = (t_end - t_start) / n_steps
    x = np.asarray(x, dtype=np.float64)

    states, velocities = [x], []
    for index in range(n_steps):
        x, velocity = _step(v, x, times[index], dt, method)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f'non-finite state after integration step {index + 1}', location=index + 1)

        states.append(x)
        velocities.append(velocity)

    return times, np.stack(states), np.stack(velocities)


def integrate(v: Callable, x0, cfg: SamplerConfig) -> Trajectory:
    """
    Integrates the field from t=0 to t=1 with ``cfg.n_steps`` steps of the configured integrator.

    The initial points may be a single point or a whole batch, in which case all trajectories are
    integrated at once.

    :raises NumericalError: if a state becomes non-finite
    """
    times, states, velocities = solve(v, x0, 0.0, 1.0, cfg.n_steps, cfg.integrator)
    return Trajectory(times, states, velocities)


# FINITE DIFFERENCE KERNELS
# #########################


def _as_column(eps, x: Tensor):
    """Turns a per-row step of shape (B,) into a column which broadcasts against x of shape (B, d)."""
    eps = np.asarray(eps, dtype=np.float64)
    return eps[..., None] if eps.ndim > 0 else eps


def divergence_fd(v: Callable, x, t, eps: float = 1e-4) -> Tensor:
    """
    Central finite difference estimate of the divergence of v at x:

        sum_i (v_i(x + eps e_i, t) - v_i(x - eps e_i, t)) / (2 eps)

    :return: a scalar for a single point, an array of shape (B,) for a batch
    """
    assert eps > 0, 'the finite difference step has to be positive'

    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    total = np.zeros(x.shape[:-1])
    for i in range(dim):
        offset = np.zeros(dim)
        offset[i] = eps
        forward = numcore.value_of(v(x + offset, t))[..., i]
        backward_ = numcore.value_of(v(x - offset, t))[..., i]
        total = total + (forward - backward_) / (2.0 * eps)

    return total


def jvp_fd(f: Callable, x: Tensor, t, w: Tensor, eps):
    """
    Central difference directional derivative ``(f(x + eps w) - f(x - eps w)) / (2 eps)`` which approximates
    ``[grad f] w``. If f returns tape nodes, the result is recorded on their tape; the direction itself is
    always treated as a constant.
    """
    column = _as_column(eps, x)
    difference = numcore.sub(f(x + column * w, t), f(x - column * w, t))
    return numcore.mul(difference, 0.5 / column)


def vjp_fd(f: Callable, x: Tensor, t, u: Tensor, eps) -> Tensor:
    """
    Central difference estimate of the vector Jacobian product ``[grad f]^T u``. Coordinate i is the
    directional derivative of the scalar ``u . f`` along the unit vector e_i, which takes 2d evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    column = _as_column(eps, x)
    dim = x.shape[-1]

    result = np.zeros_like(x)
    for i in range(dim):
        unit = np.zeros(dim)
        unit[i] = 1.0
        forward = np.sum(u * numcore.value_of(f(x + column * unit, t)), axis=-1)
        backward_ = np.sum(u * numcore.value_of(f(x - column * unit, t)), axis=-1)
        result[..., i] = (forward - backward_) * (0.5 / np.asarray(eps))

    return result


# LOG DENSITIES
# #############


def standard_normal_log_density(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    return -0.5 * np.sum(np.square(x), axis=-1) - 0.5 * dim * np.log(2.0 * np.pi)


def log_density(v: Callable,
                x1,
                n_steps: int,
                eps_div: float = 1e-4,
                t_end: float = 1.0) -> Tuple[Tensor, Tensor]:
    """
    Computes the log density of the flow's marginal at time ``t_end`` (usually 1) by integrating the ODE
    backwards with rk4 and accumulating the divergence along the way:

        log p_t(x_t) = log p_0(x_0) - integral_0^t div v(x_s, s) ds

    with the standard normal base density p_0. The divergence is evaluated with central finite differences on
    the grid points and integrated with the trapezoidal rule.

    :param x1: point of shape (d,) or batch of shape (B, d) at time t_end
    :param n_steps: the number of rk4 steps between t_end and 0

    :raises NumericalError: if the state or the divergence become non-finite

    :return: tuple of the points traced back to time 0 and their log densities at time t_end
    """
    x1 = np.asarray(x1, dtype=np.float64)
    if t_end <= 0.0:
        return x1, standard_normal_log_density(x1)

    times, states, _ = solve(v, x1, t_end, 0.0, n_steps, 'rk4')
    divergences = np.stack([divergence_fd(v, state, time, eps_div) for state, time in zip(states, times)])
    if not np.all(np.isfinite(divergences)):
        raise NumericalError('non-finite divergence encountered during density integration')

    integral = trapezoid(divergences[::-1], times[::-1], axis=0)
    x0 = states[-1]
    return x0, standard_normal_log_density(x0) - integral


# PRETRAINING
# ###########


class RectifiedFlowTrainer:
    """
    Trains an MLP velocity field with the rectified flow objective

        E || v(x_t, t) - (x_1 - x_0) ||^2,   x_t = (1 - t) x_0 + t x_1

    with standard normal noise x_0, data samples x_1 and uniform times t.

    The trainer is an iterator: every ``next`` call performs one optimizer step and returns the tuple of the
    step index and the loss. The initial parameters are drawn from the "init" substream of the given rng,
    the noise, data and times from the "noise", "data" and "time" substreams.

    .. code:: python

        trainer = RectifiedFlowTrainer(data, spec, steps=2000, batch=256, lr=1e-3, rng=Rng(0))
        for step, loss in trainer:
            pass
        field = trainer.field
    """

    def __init__(self,
                 data: ToyDistribution,
                 spec: MlpSpec,
                 steps: int,
                 batch: int,
                 lr: float,
                 rng: Rng,
                 weight_decay: float = 0.0,
                 max_grad_norm: Optional[float] = None,
                 log_every: int = 100):
        if steps < 0:
            raise ConfigError('the number of pretraining steps can not be negative', key='steps')
        if data.dim != spec.input_dim:
            raise ShapeError(f'data of dimension {data.dim} does not fit a network of dimension {spec.input_dim}')

        self.data = data
        self.spec = spec
        self.steps = steps
        self.batch = batch
        self.max_grad_norm = max_grad_norm
        self.log_every = log_every

        self.noise_rng = rng.child('noise')
        self.data_rng = rng.child('data')
        self.time_rng = rng.child('time')

        self.params = init_mlp(spec, rng.child('init'))
        self.state = OptState.create(self.params, lr=lr, weight_decay=weight_decay)
        self.step = 0
        self.losses: List[float] = []

    # PUBLIC METHODS
    # --------------

    @property
    def field(self) -> MlpField:
        return MlpField(self.spec, self.params)

    def run(self) -> MlpField:
        for _ in self:
            pass
        return self.field

    # PROTECTED METHODS
    # -----------------

    def _loss_and_gradients(self) -> Tuple[float, Dict[str, Tensor]]:
        dim = self.spec.input_dim
        x0 = self.noise_rng.normal(size=(self.batch, dim))
        x1 = self.data.sample(self.batch, self.data_rng)
        t = self.time_rng.uniform(size=self.batch)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1

        tape = Tape()
        nodes = tape.parameters_from(self.params)
        loss = numcore.mean(numcore.sqdist(mlp_forward(nodes, xt, t, self.spec), x1 - x0))
        if not np.isfinite(loss.value):
            raise NumericalError(f'pretraining loss became non-finite at step {self.step}', location=self.step)

        return float(loss.value), backward(tape, loss)

    # MAGIC METHODS
    # -------------

    def __iter__(self) -> Iterator[Tuple[int, float]]:
        return self

    def __next__(self) -> Tuple[int, float]:
        if self.step >= self.steps:
            raise StopIteration

        loss, grads = self._loss_and_gradients()
        self.params, self.state, _ = optimizer_update(self.params, grads, self.state, self.max_grad_norm)
        self.losses.append(loss)

        step = self.step
        self.step += 1
        if self.log_every and step % self.log_every == 0:
            logger.info('pretraining step %d/%d, loss %.5f', step, self.steps, loss)

        return step, loss


def pretrain_rectified_flow(data: ToyDistribution,
                            spec: MlpSpec,
                            steps: int,
                            batch: int,
                            lr: float,
                            rng: Rng,
                            **kwargs) -> MlpField:
    """
    Pretrains a base field with the rectified flow objective. With ``steps=0`` the returned field is the
    initialization drawn from ``rng.child('init')``.

    :raises NumericalError: if the loss becomes non-finite, reporting the step
    """
    return RectifiedFlowTrainer(data, spec, steps, batch, lr, rng, **kwargs).run()
