"""
Finetuning baselines which the value gradient method is compared against.

- "refl": one step reward backpropagation. A trajectory is truncated at a random late step, the terminal point
  is predicted with one Euler step and the reward gradient is backpropagated through that step only.
- "draft": the reward gradient is backpropagated through the last K Euler steps of the sampler.
- "pmp_adjoint": the costate of the control problem is integrated backwards along the trajectory (including
  the terms which depend on the finetuned residual) and the residual is regressed onto ``-beta * a``.
- "lean_adjoint": like "pmp_adjoint", but the costate only follows the base field.

All baselines share the metric record layout of the value gradient trainer, the losses which they do not have
are reported as zero.
"""
import logging
from typing import Dict, Iterator, List, Optional, Tuple, Any

import numpy as np

from pyflowalign import numcore
from pyflowalign.numcore import Rng, Tensor, ParamSet
from pyflowalign.nets import MlpSpec, init_mlp
from pyflowalign.optim import OptState, optimizer_update
from pyflowalign.flow import VelocityField, MlpField, ResidualField, SamplerConfig, Trajectory, integrate, vjp_fd
from pyflowalign.rewards import Reward, ReluWrapped
from pyflowalign.align import (METRIC_COLUMNS, BinnedSubsampling, DivergenceGuard, FinetuneResult,
                               differentiate)
from pyflowalign.util import require_integers
from pyflowalign.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


class BaselineConfig:

    _ARGS = ['kind', 'K', 'refl_range', 'beta', 'lr', 'weight_decay', 'max_grad_norm', 'n_rounds', 'trajectories',
             'sampler', 'bins', 'fd_eps', 'relu_reward', 'max_adjoint_norm', 'residual_hidden', 'reward_margin',
             'divergence_patience', 'eval_every', 'log_every']

    _DEFAULT_CONFIG = {
        'kind':                 'refl',
        'K':                    5,
        'refl_range':           [15, 20],
        'beta':                 1.0,
        'lr':                   1e-4,
        'weight_decay':         1e-2,
        'max_grad_norm':        1.0,
        'n_rounds':             400,
        'trajectories':         32,
        'sampler':              {'n_steps': 20, 'integrator': 'euler'},
        'bins':                 5,
        'fd_eps':               1e-3,
        'relu_reward':          True,
        'max_adjoint_norm':     None,
        'residual_hidden':      [64, 64],
        'reward_margin':        0.1,
        'divergence_patience':  50,
        'eval_every':           50,
        'log_every':            10,
    }

    KINDS = ['refl', 'draft', 'pmp_adjoint', 'lean_adjoint']

    INTEGER_KEYS = ['K', 'n_rounds', 'trajectories', 'bins', 'divergence_patience', 'eval_every', 'log_every']

    def __init__(self, **kwargs):
        values = dict(self._DEFAULT_CONFIG)
        values.update(kwargs)
        for key in self._ARGS:
            setattr(self, key, values[key])

        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig.from_dict(self.sampler)
        self.refl_range = list(self.refl_range)

        self._validate()

    @property
    def lam(self) -> float:
        return 1.0 / self.beta

    def to_dict(self) -> Dict[str, Any]:
        data = {key: getattr(self, key) for key in self._ARGS}
        data['sampler'] = self.sampler.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'BaselineConfig':
        unknown = set(data.keys()) - set(cls._ARGS)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f'unknown key "{key}" in baseline config', key=key)
        return cls(**data)

    def _validate(self):
        require_integers(self, self.INTEGER_KEYS)
        n_steps = self.sampler.n_steps
        if self.kind not in self.KINDS:
            raise ConfigError(f'unknown baseline "{self.kind}", has to be one of {self.KINDS}', key='kind')
        if not 1 <= self.K <= n_steps:
            raise ConfigError(f'K has to be between 1 and the number of sampler steps {n_steps}', key='K')
        if len(self.refl_range) != 2 or not 0 <= self.refl_range[0] < self.refl_range[1] <= n_steps:
            raise ConfigError(f'the truncation range has to be a non-empty range within [0, {n_steps}]',
                              key='refl_range')
        if self.kind in ('pmp_adjoint', 'lean_adjoint') and self.beta <= 0:
            raise ConfigError('the adjoint baselines need a positive beta', key='beta')
        if self.beta < 0:
            raise ConfigError('beta can not be negative', key='beta')
        if not 1 <= self.bins <= n_steps:
            raise ConfigError('bins has to be between 1 and the number of sampler steps', key='bins')
        if self.fd_eps <= 0:
            raise ConfigError('the finite difference step has to be positive', key='fd_eps')

    def __str__(self):
        return 'BaselineConfig(kind={}, K={}, refl_range={}, beta={}, n_rounds={})'.format(
            self.kind,
            self.K,
            self.refl_range,
            self.beta,
            self.n_rounds
        )


def _reward_surrogate(x_hat, reward: Reward):
    """
    A scalar whose theta gradient is the gradient of ``-mean r(x_hat)``: the reward gradient at the current
    value of x_hat enters as a constant weight.
    """
    value = numcore.value_of(x_hat)
    rows = value.shape[0] if value.ndim == 2 else 1
    weights = reward.grad(value) / rows
    return numcore.scale(numcore.sum(numcore.mul(x_hat, weights)), -1.0)


# DIRECT REWARD BACKPROPAGATION
# #############################


def refl_gradients(v_theta: ResidualField,
                   reward: Reward,
                   trajectory: Trajectory,
                   steps: Tensor) -> Tuple[float, Dict[str, Tensor]]:
    """
    Gradient of the mean reward of the one step predictions ``x_t + (1 - t) v_theta(x_t, t)`` with respect to
    theta. The states x_t at the given truncation steps (one per trajectory) enter as constants.

    :return: tuple of the mean predicted reward and the theta gradients of the negative mean reward
    """
    steps = np.asarray(steps, dtype=np.int64)
    x = trajectory.states[steps, np.arange(len(steps))]
    t = trajectory.times[steps]
    remaining = (1.0 - t)[:, None]

    predicted = {}

    def objective(theta):
        x_hat = numcore.add(x, numcore.mul(v_theta(x, t, params=theta), remaining))
        predicted['x_hat'] = numcore.value_of(x_hat)
        return _reward_surrogate(x_hat, reward)

    _, grads = differentiate(objective, theta=v_theta.params)
    return float(np.mean(reward.value(predicted['x_hat']))), grads['theta']


def draft_gradients(v_theta: ResidualField,
                    reward: Reward,
                    x_start: Tensor,
                    start_step: int,
                    n_steps: int) -> Tuple[float, Dict[str, Tensor]]:
    """
    Gradient of the mean terminal reward with respect to theta, backpropagated through the Euler steps from
    ``start_step`` to ``n_steps``. The state at ``start_step`` enters as a constant.

    :return: tuple of the mean terminal reward and the theta gradients of the negative mean reward
    """
    dt = 1.0 / n_steps
    terminal = {}

    def objective(theta):
        x = x_start
        for index in range(start_step, n_steps):
            x = numcore.add(x, numcore.scale(v_theta(x, index * dt, params=theta), dt))
        terminal['x'] = numcore.value_of(x)
        return _reward_surrogate(x, reward)

    _, grads = differentiate(objective, theta=v_theta.params)
    return float(np.mean(reward.value(terminal['x']))), grads['theta']


def _sample(v_theta: VelocityField, config: BaselineConfig, rng: Rng, dim: int) -> Trajectory:
    x0 = rng.normal(size=(config.trajectories, dim))
    return integrate(v_theta, x0, config.sampler)


def refl_update(v_theta: ResidualField,
                reward: Reward,
                config: BaselineConfig,
                rng: Rng,
                state: OptState) -> Tuple[ResidualField, OptState, dict]:
    """
    One optimizer step of one step reward backpropagation. The truncation step of every trajectory is drawn
    uniformly from ``config.refl_range``.

    :return: tuple of the updated field, the updated optimizer state and an info dict with the "loss", the
        "grad_norm" and the "terminals" of the sampled trajectories
    """
    trajectory = _sample(v_theta, config, rng, v_theta.dim)
    low, high = config.refl_range
    steps = rng.integers(low, high, size=config.trajectories)

    objective, grads = refl_gradients(v_theta, reward, trajectory, steps)
    theta, state, norm = optimizer_update(v_theta.params, grads, state, config.max_grad_norm)
    return v_theta.with_params(theta), state, {'loss': -objective, 'grad_norm': norm,
                                               'terminals': trajectory.terminal}


def draft_update(v_theta: ResidualField,
                 reward: Reward,
                 K: int,
                 config: BaselineConfig,
                 rng: Rng,
                 state: OptState) -> Tuple[ResidualField, OptState, dict]:
    """
    One optimizer step of truncated backpropagation through the last K sampler steps.

    :raises ConfigError: if K is not within 1 .. n_steps
    """
    n_steps = config.sampler.n_steps
    if not 1 <= K <= n_steps:
        raise ConfigError(f'K has to be between 1 and {n_steps}, got {K}', key='K')

    trajectory = _sample(v_theta, config, rng, v_theta.dim)
    objective, grads = draft_gradients(v_theta, reward, trajectory.states[n_steps - K], n_steps - K, n_steps)
    theta, state, norm = optimizer_update(v_theta.params, grads, state, config.max_grad_norm)
    return v_theta.with_params(theta), state, {'loss': -objective, 'grad_norm': norm,
                                               'terminals': trajectory.terminal}


# ADJOINT METHODS
# ###############


class AdjointTrajectory:
    """
    The costates ``a(t_i)`` on the time grid of a forward trajectory. ``costates`` has the same shape as the
    states of the trajectory.
    """

    def __init__(self, times: Tensor, costates: Tensor, trajectory: Trajectory):
        if len(times) != len(trajectory.times) or not np.allclose(times, trajectory.times):
            raise ShapeError('the costate grid does not match the grid of the forward trajectory')
        if costates.shape != trajectory.states.shape:
            raise ShapeError(f'costates of shape {costates.shape} do not match states {trajectory.states.shape}')

        self.times = times
        self.costates = costates
        self.trajectory = trajectory

    def __str__(self):
        return 'AdjointTrajectory(n_steps={})'.format(len(self.times) - 1)


def _solve_adjoint(trajectory: Trajectory, reward: Reward, drift) -> AdjointTrajectory:
    times, states = trajectory.times, trajectory.states
    costate = -reward.grad(states[-1])
    costates = [costate]
    for index in reversed(range(trajectory.n_steps)):
        dt = times[index + 1] - times[index]
        costate = costate + dt * drift(states[index + 1], times[index + 1], costate)
        if not np.all(np.isfinite(costate)):
            raise NumericalError(f'non-finite costate at step {index}', location=index)
        costates.append(costate)

    return AdjointTrajectory(times, np.stack(costates[::-1]), trajectory)


def pmp_adjoint_solve(trajectory: Trajectory,
                      v_theta: VelocityField,
                      v_base: VelocityField,
                      reward: Reward,
                      lam: float,
                      eps: float = 1e-3) -> AdjointTrajectory:
    """
    Integrates the costate equation of the control problem

        da/dt = -(lam [grad r~]^T r~ + [grad v_theta]^T a),    a(1) = -grad r(x_1)

    with the residual ``r~ = v_theta - v_base`` backwards along the stored states with Euler steps. The
    Jacobian products are central differences with step eps.
    """
    def residual(x, t):
        return numcore.value_of(v_theta(x, t)) - numcore.value_of(v_base(x, t))

    def drift(x, t, costate):
        return lam * vjp_fd(residual, x, t, residual(x, t), eps) + vjp_fd(v_theta, x, t, costate, eps)

    return _solve_adjoint(trajectory, reward, drift)


def lean_adjoint_solve(trajectory: Trajectory,
                       v_base: VelocityField,
                       reward: Reward,
                       eps: float = 1e-3) -> AdjointTrajectory:
    """
    Integrates ``da/dt = -[grad v_base]^T a`` with ``a(1) = -grad r(x_1)`` backwards along the trajectory.
    """
    def drift(x, t, costate):
        return vjp_fd(v_base, x, t, costate, eps)

    return _solve_adjoint(trajectory, reward, drift)


def adjoint_keep_mask(adjoints: AdjointTrajectory, max_norm: Optional[float]) -> Tensor:
    """
    Marks the trajectories whose costate norm stays below ``max_norm`` at every step. Without a maximum all
    trajectories are kept.
    """
    costates = adjoints.costates
    if costates.ndim == 2:
        costates = costates[:, None, :]
    norms = np.max(np.linalg.norm(costates, axis=-1), axis=0)
    if max_norm is None:
        return np.ones_like(norms, dtype=bool)
    return norms <= max_norm


def adjoint_matching_loss(v_theta: ResidualField, x: Tensor, t: Tensor, costates: Tensor, beta: float,
                          theta=None):
    """``E || residual_theta(x_t, t) + beta * a_t ||^2``"""
    residual = v_theta.residual_velocity(x, t, theta)
    return numcore.mean(numcore.sqdist(residual, -beta * costates))


def adjoint_matching_update(v_theta: ResidualField,
                            adjoints: AdjointTrajectory,
                            lam: float,
                            state: OptState,
                            config: BaselineConfig,
                            rng: Rng,
                            keep: Optional[Tensor] = None) -> Tuple[ResidualField, OptState, dict]:
    """
    One optimizer step on the adjoint matching loss over one transition per bin of every kept trajectory.
    """
    trajectory = adjoints.trajectory
    states, costates = trajectory.states, adjoints.costates
    if states.ndim == 2:
        states, costates = states[:, None, :], costates[:, None, :]
    if keep is None:
        keep = np.ones(states.shape[1], dtype=bool)

    rows = np.flatnonzero(keep)
    if len(rows) == 0:
        logger.warning('all trajectories exceeded the maximum costate norm, skipping the update')
        return v_theta, state, {'loss': 0.0, 'grad_norm': 0.0}

    indices = BinnedSubsampling(config.bins).select(trajectory.n_steps, len(rows), rng)
    steps = indices.reshape(-1)
    selected_rows = np.repeat(rows, indices.shape[1])
    x = states[steps, selected_rows]
    t = trajectory.times[steps]
    a = costates[steps, selected_rows]

    beta = 1.0 / lam
    loss, grads = differentiate(lambda theta: adjoint_matching_loss(v_theta, x, t, a, beta, theta),
                                theta=v_theta.params)
    theta, state, norm = optimizer_update(v_theta.params, grads['theta'], state, config.max_grad_norm)
    return v_theta.with_params(theta), state, {'loss': loss, 'grad_norm': norm}


# TRAINING
# ########


class BaselineTrainer:
    """
    Runs the rounds of one of the baselines. Like the value gradient trainer it is an iterator which returns
    one metric record per round.

    The residual starts with a zero final layer, so initially v_theta = v_base. For "refl" and "draft" the
    reward is wrapped in a ReLU if ``config.relu_reward`` is set. The reported mean reward is always the one
    of the unwrapped reward.
    """

    def __init__(self, config: BaselineConfig, v_base: VelocityField, reward: Reward, rng: Rng):
        dim = v_base.dim if v_base.dim is not None else reward.dim
        if dim is None:
            raise ShapeError('either the base field or the reward has to define the dimension')

        self.config = config
        self.v_base = v_base
        self.reward = reward
        self.dim = dim

        self.objective_reward = reward
        if config.kind in ('refl', 'draft') and config.relu_reward and not isinstance(reward, ReluWrapped):
            self.objective_reward = ReluWrapped(reward)

        residual_spec = MlpSpec(dim, hidden=config.residual_hidden, final_init='tiny')
        theta = init_mlp(residual_spec, rng.child('theta'))
        self.v_theta = ResidualField(v_base, MlpField(residual_spec, theta))
        self.state = OptState.create(theta, lr=config.lr, weight_decay=config.weight_decay)

        self.trajectory_rng = rng.child('trajectories')
        self.subsampling_rng = rng.child('subsampling')
        self.guard = DivergenceGuard(config.reward_margin, config.divergence_patience)

        self.round = 0
        self.records: List[dict] = []
        self.snapshots: List[Tuple[int, ParamSet]] = []

    # PUBLIC METHODS
    # --------------

    def run(self) -> FinetuneResult:
        for _ in self:
            pass
        self.snapshots.append((self.round, dict(self.v_theta.params)))
        return FinetuneResult(self.v_theta, self.records, self.guard.warnings, self.snapshots)

    def train_round(self) -> dict:
        config = self.config
        try:
            if config.kind == 'refl':
                self.v_theta, self.state, info = refl_update(
                    self.v_theta, self.objective_reward, config, self.trajectory_rng, self.state
                )
            elif config.kind == 'draft':
                self.v_theta, self.state, info = draft_update(
                    self.v_theta, self.objective_reward, config.K, config, self.trajectory_rng, self.state
                )
            else:
                info = self._adjoint_round()
        except NumericalError as error:
            raise NumericalError(f'training diverged in round {self.round}: {error}', location=self.round)

        return {
            'round':            self.round,
            'mean_reward':      float(np.mean(self.reward.value(info['terminals']))),
            'loss_matching':    info['loss'],
            'loss_consistency': 0.0,
            'loss_boundary':    0.0,
            'grad_norm_theta':  info['grad_norm'],
            'grad_norm_phi':    0.0,
        }

    # PROTECTED METHODS
    # -----------------

    def _adjoint_round(self) -> dict:
        config = self.config
        trajectory = _sample(self.v_theta, config, self.trajectory_rng, self.dim)
        if config.kind == 'pmp_adjoint':
            adjoints = pmp_adjoint_solve(trajectory, self.v_theta, self.v_base, self.reward, config.lam,
                                         config.fd_eps)
        else:
            adjoints = lean_adjoint_solve(trajectory, self.v_base, self.reward, config.fd_eps)

        keep = adjoint_keep_mask(adjoints, config.max_adjoint_norm)
        self.v_theta, self.state, info = adjoint_matching_update(
            self.v_theta, adjoints, config.lam, self.state, config, self.subsampling_rng, keep
        )
        info['terminals'] = trajectory.terminal
        return info

    # MAGIC METHODS
    # -------------

    def __iter__(self) -> Iterator[dict]:
        return self

    def __next__(self) -> dict:
        if self.round >= self.config.n_rounds:
            raise StopIteration

        if self.config.eval_every and self.round % self.config.eval_every == 0:
            self.snapshots.append((self.round, dict(self.v_theta.params)))

        record = self.train_round()
        self.records.append(record)
        self.guard.update(self.round, record['mean_reward'])
        if self.config.log_every and self.round % self.config.log_every == 0:
            logger.info('%s %s', self.config.kind,
                        ' '.join('{}={:.6g}'.format(key, record[key]) for key in METRIC_COLUMNS))

        self.round += 1
        return record


def baseline_train(config: BaselineConfig, v_base: VelocityField, reward: Reward, rng: Rng) -> FinetuneResult:
    return BaselineTrainer(config, v_base, reward, rng).run()
