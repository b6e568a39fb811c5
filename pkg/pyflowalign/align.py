"""
Reward alignment of a pretrained flow by value gradient matching.

The finetuned field is ``v_theta = v_base + residual_theta``. The gradient of the value function is
represented by the forward-looking parametrization

    g_phi(x, t) = -eta_t * grad r(x_hat_1) + nu_phi(x, t),   x_hat_1 = x + (1 - t) * stopgrad(v_theta(x, t))

which is exact at t=1 as long as the correction nu_phi vanishes there. Every training round

1. collects trajectories under the current v_theta,
2. updates phi with one optimizer step on ``L_consistency + alpha * L_boundary``,
3. updates theta with one optimizer step on ``L_matching = E || residual_theta + beta * stopgrad(g_phi) ||^2``.

.. code:: python

    config = FinetuneConfig.from_dict({'beta': 2.0, 'n_rounds': 400})
    result = vgg_flow_train(config, base_field, reward, Rng(0))
    for record in result.records:
        print(record['round'], record['mean_reward'])
"""
import logging
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Any

import numpy as np

from pyflowalign import numcore
from pyflowalign.numcore import Tape, Rng, Tensor, ParamSet, backward
from pyflowalign.nets import MlpSpec, init_mlp
from pyflowalign.optim import OptState, optimizer_update
from pyflowalign.flow import (VelocityField, MlpField, ResidualField, SamplerConfig, Trajectory, integrate,
                              jvp_fd, vjp_fd)
from pyflowalign.rewards import Reward
from pyflowalign.util import require_integers
from pyflowalign.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


# CONSTANTS
# ---------

ETA_SCHEDULES: Dict[str, Callable] = {
    'quadratic':    lambda t: np.square(t),
    'linear':       lambda t: np.asarray(t, dtype=np.float64),
    'constant':     lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
}

CONSISTENCY_MODES = ['partial', 'paper_c1']

CONSISTENCY_ALIASES = {'displaced': 'paper_c1'}

METRIC_COLUMNS = ['round', 'mean_reward', 'loss_matching', 'loss_consistency', 'loss_boundary',
                  'grad_norm_theta', 'grad_norm_phi']


def _time_column(t, x: Tensor):
    """Makes a time (or any per-row quantity) broadcastable against points of shape (d,) or (B, d)."""
    t = np.asarray(t, dtype=np.float64)
    return t[..., None] if t.ndim > 0 else t


def one_step_prediction(v: Callable, x, t) -> Tensor:
    """
    Predicts the terminal point with a single Euler step, ``x + (1 - t) * v(x, t)``. The velocity is frozen:
    its value is used as a constant, even if v is evaluated with tape nodes.
    """
    x = numcore.value_of(x)
    velocity = numcore.value_of(v(x, t))
    return x + (1.0 - _time_column(t, x)) * velocity


# PERCENTILE CLIPPING
# ###################


def percentile_threshold(vectors, p: float) -> float:
    """
    The linearly interpolated p-th percentile of the L2 norms of the given vectors.

    :raises ValueError: for an empty batch or a percentile outside of (0, 100]
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.size == 0 or len(vectors) == 0:
        raise ValueError('percentile clipping needs at least one vector')
    if not 0.0 < p <= 100.0:
        raise ValueError(f'the clipping percentile has to be in (0, 100], got {p}')

    return float(np.percentile(np.linalg.norm(vectors, axis=-1), p))


def clip_to_norm(vectors, threshold: float) -> Tensor:
    """Rescales every vector whose norm exceeds the threshold to exactly that norm. Others are unchanged."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    safe_norms = np.where(norms > 0.0, norms, 1.0)
    factors = np.where(norms > threshold, threshold / safe_norms, 1.0)
    return vectors * factors


def percentile_clip(vectors, p: float, threshold: Optional[float] = None) -> Tensor:
    """
    Clips the norms of a batch of vectors to the p-th percentile of the batch norms.

    The threshold can also be passed explicitly, which is how a threshold computed for a training batch is
    applied to further evaluations within the same round. Clipping twice with the same threshold is the
    same as clipping once.

    :raises ValueError: for an empty batch or a percentile outside of (0, 100]
    """
    if threshold is None:
        threshold = percentile_threshold(vectors, p)
    return clip_to_norm(vectors, threshold)


# THE VALUE GRADIENT FIELD
# ########################


class ValueGradientField:
    """
    The forward-looking parametrization of the value gradient:

        g(x, t) = -eta_t * grad r(x_hat_1(x, t)) + nu(x, t)

    The leading term is a plain array which never carries parameter gradients. The correction nu is an MLP
    which is evaluated with its own parameters, or with the ``params`` that are passed explicitly.

    :ivar predictor: the field used for the one step prediction x_hat_1. This is the current finetuned field.
    """

    def __init__(self,
                 reward: Reward,
                 predictor: VelocityField,
                 correction: MlpField,
                 eta: str = 'quadratic'):
        if eta not in ETA_SCHEDULES:
            raise ConfigError(f'unknown eta schedule "{eta}", has to be one of {sorted(ETA_SCHEDULES.keys())}',
                              key='eta')

        self.reward = reward
        self.predictor = predictor
        self.correction = correction
        self.eta = eta

    # PUBLIC METHODS
    # --------------

    def leading_term(self, x, t, threshold: Optional[float] = None) -> Tensor:
        x_hat = one_step_prediction(self.predictor, x, t)
        gradient = self.reward.grad(x_hat)
        if threshold is not None:
            gradient = clip_to_norm(gradient, threshold)

        return -_time_column(ETA_SCHEDULES[self.eta](t), x_hat) * gradient

    def with_params(self, params: ParamSet) -> 'ValueGradientField':
        return ValueGradientField(self.reward, self.predictor, self.correction.with_params(params), self.eta)

    def with_predictor(self, predictor: VelocityField) -> 'ValueGradientField':
        return ValueGradientField(self.reward, predictor, self.correction, self.eta)

    @property
    def params(self) -> ParamSet:
        return self.correction.params

    # MAGIC METHODS
    # -------------

    def __call__(self, x, t, params=None, threshold: Optional[float] = None):
        correction = self.correction(x, t) if params is None else self.correction(x, t, params=params)
        return numcore.add(self.leading_term(x, t, threshold), correction)

    def __str__(self):
        return 'ValueGradientField(eta={}, reward={})'.format(self.eta, self.reward)


def value_gradient(gfield: ValueGradientField, x, t, params=None, threshold: Optional[float] = None):
    return gfield(x, t, params=params, threshold=threshold)


# TRANSITIONS
# ###########


class TransitionBatch:
    """
    Transitions ``(x_t, t, v_theta(x_t, t))`` drawn from a batch of trajectories together with the terminal
    states of all these trajectories.
    """

    def __init__(self, x: Tensor, t: Tensor, velocities: Tensor, terminals: Tensor, steps: Optional[Tensor] = None):
        if not (len(x) == len(t) == len(velocities)):
            raise ShapeError('states, times and velocities of a transition batch need the same length')
        if len(x) == 0 or len(terminals) == 0:
            raise ValueError('transition batches can not be empty')

        self.x = x
        self.t = t
        self.velocities = velocities
        self.terminals = terminals
        self.steps = steps

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory, indices: Tensor) -> 'TransitionBatch':
        """
        :param indices: integer array of shape (n_trajectories, k) with the selected step indices of every
            trajectory
        """
        states, velocities = trajectory.states, trajectory.velocities
        if states.ndim == 2:
            states, velocities = states[:, None, :], velocities[:, None, :]

        indices = np.asarray(indices, dtype=np.int64)
        rows = np.broadcast_to(np.arange(states.shape[1])[:, None], indices.shape)
        steps = indices.reshape(-1)
        rows = rows.reshape(-1)

        return cls(
            x=states[steps, rows],
            t=trajectory.times[steps],
            velocities=velocities[steps, rows],
            terminals=states[-1],
            steps=steps,
        )

    def __len__(self):
        return len(self.x)

    def __str__(self):
        return 'TransitionBatch(transitions={}, terminals={})'.format(len(self.x), len(self.terminals))


def bin_ranges(n_steps: int, bins: int) -> List[Tuple[int, int]]:
    """
    Splits the step indices 0 .. n_steps-1 into contiguous groups of equal size. The remainder is spread over
    the earliest groups.

    :raises ConfigError: if there are more bins than steps
    """
    if bins < 1 or bins > n_steps:
        raise ConfigError(f'the number of bins has to be between 1 and the number of steps {n_steps}, got {bins}',
                          key='bins')

    size, remainder = divmod(n_steps, bins)
    ranges, start = [], 0
    for index in range(bins):
        stop = start + size + (1 if index < remainder else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


class SubsamplingStrategy:
    """
    Interface for the selection of the transitions which enter the losses of one training round.

    **The select method**

    ``select(n_steps, n_trajectories, rng)`` returns an integer array of shape (n_trajectories, k) with the
    selected step indices of every trajectory.
    """

    def select(self, n_steps: int, n_trajectories: int, rng: Rng) -> Tensor:
        raise NotImplementedError()

    def __call__(self, trajectory: Trajectory, rng: Rng) -> TransitionBatch:
        n_trajectories = trajectory.states.shape[1] if trajectory.states.ndim == 3 else 1
        indices = self.select(trajectory.n_steps, n_trajectories, rng)
        return TransitionBatch.from_trajectory(trajectory, indices)


class BinnedSubsampling(SubsamplingStrategy):
    """Draws one step uniformly from each of ``bins`` contiguous groups of steps, per trajectory."""

    def __init__(self, bins: int):
        self.bins = bins

    def select(self, n_steps: int, n_trajectories: int, rng: Rng) -> Tensor:
        columns = [rng.integers(start, stop, size=n_trajectories) for start, stop in bin_ranges(n_steps, self.bins)]
        return np.stack(columns, axis=1)


class NoSubsampling(SubsamplingStrategy):

    def select(self, n_steps: int, n_trajectories: int, rng: Rng) -> Tensor:
        return np.tile(np.arange(n_steps), (n_trajectories, 1))


class FractionSubsampling(SubsamplingStrategy):
    """Uses ``max(1, round(rate * n_steps))`` bins, so that the given fraction of all transitions is used."""

    def __init__(self, rate: float):
        if not 0.0 < rate <= 1.0:
            raise ConfigError(f'the subsampling rate has to be in (0, 1], got {rate}', key='subsample_rate')
        self.rate = rate

    def select(self, n_steps: int, n_trajectories: int, rng: Rng) -> Tensor:
        bins = max(1, int(round(self.rate * n_steps)))
        return BinnedSubsampling(bins).select(n_steps, n_trajectories, rng)


def subsample_transitions(trajectory: Trajectory, bins: int, rng: Rng) -> TransitionBatch:
    return BinnedSubsampling(bins)(trajectory, rng)


# LOSSES
# ######


def consistency_residual(g: Callable,
                         v_base: Callable,
                         v_theta: Callable,
                         x: Tensor,
                         t,
                         eps,
                         beta: float,
                         mode: str = 'partial'):
    """
    Finite difference residual of the value gradient consistency equation

        d/dt g + [grad g](v_base - beta g) + [grad v_base]^T g = 0

    as the sum of the three terms

    - T1 = (g(x, t + eps) - g(x, t)) / eps. In "paper_c1" mode (alias "displaced") the point is also
      displaced to x + eps * v_theta(x, t).
    - T2 = (g(x + eps w, t) - g(x - eps w, t)) / (2 eps) with the frozen direction w = v_base - beta g.
    - T3, the central difference vector Jacobian product of v_base with the frozen g. It never depends on
      parameters.

    If g returns tape nodes, so does the residual.

    :param eps: scalar step or one step per row of x
    :raises ValueError: if eps is not positive or if t + eps exceeds 1
    """
    mode = CONSISTENCY_ALIASES.get(mode, mode)
    if mode not in CONSISTENCY_MODES:
        raise ConfigError(f'unknown consistency mode "{mode}", has to be one of {CONSISTENCY_MODES}',
                          key='consistency_mode')

    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), t.shape)
    if np.any(eps <= 0.0):
        raise ValueError('the finite difference step has to be positive')
    if np.any(t + eps > 1.0 + 1e-12):
        raise ValueError('t + eps exceeds the terminal time, the step has to be shrunk near t=1')

    column = _time_column(eps, x)
    g0 = g(x, t)
    g0_value = numcore.value_of(g0)

    if mode == 'partial':
        g1 = g(x, t + eps)
    else:
        g1 = g(x + column * numcore.value_of(v_theta(x, t)), t + eps)
    time_term = numcore.mul(numcore.sub(g1, g0), 1.0 / column)

    direction = numcore.value_of(v_base(x, t)) - beta * g0_value
    transport_term = jvp_fd(g, x, t, direction, eps)
    base_term = vjp_fd(v_base, x, t, g0_value, eps)

    return numcore.add(numcore.add(time_term, transport_term), base_term)


def shrink_steps(eps: float, t: Tensor) -> Tensor:
    """Per row finite difference steps ``min(eps, 1 - t)``."""
    steps = np.minimum(eps, 1.0 - np.asarray(t, dtype=np.float64))
    if np.any(steps <= 0.0):
        raise ValueError('transitions at the terminal time can not enter the consistency loss')
    return steps


def consistency_loss(gfield: ValueGradientField,
                     v_base: Callable,
                     v_theta: Callable,
                     batch: TransitionBatch,
                     config: 'FinetuneConfig',
                     phi=None,
                     threshold: Optional[float] = None):
    """
    The mean squared consistency residual over the transitions of the batch. It only depends on phi; the
    finetuned field enters as a constant.
    """
    def g(x, t):
        return gfield(x, t, params=phi, threshold=threshold)

    residual = consistency_residual(g, v_base, v_theta, batch.x, batch.t,
                                    eps=shrink_steps(config.fd_eps, batch.t),
                                    beta=config.beta,
                                    mode=config.consistency_mode)
    return numcore.mean(numcore.sum(numcore.square(residual), axis=-1))


def boundary_loss(gfield: ValueGradientField, terminals: Tensor, reward: Reward, phi=None):
    """
    ``E || g(x_1, 1) + grad r(x_1) ||^2`` over the terminal states. The leading term is never clipped here.
    """
    g = gfield(terminals, 1.0, params=phi)
    return numcore.mean(numcore.sqdist(g, -reward.grad(terminals)))


def matching_loss(v_theta: ResidualField,
                  gfield: ValueGradientField,
                  batch: TransitionBatch,
                  beta: float,
                  theta=None,
                  phi=None,
                  threshold: Optional[float] = None):
    """
    ``E || residual_theta(x_t, t) + beta * stopgrad(g(x_t, t)) ||^2`` over the transitions of the batch. The
    value gradient is frozen, so only theta receives gradients.
    """
    g = numcore.stop_gradient(gfield(batch.x, batch.t, params=phi, threshold=threshold))
    residual = v_theta.residual_velocity(batch.x, batch.t, theta)
    return numcore.mean(numcore.sqdist(residual, numcore.scale(g, -beta)))


def differentiate(build: Callable, **param_sets: ParamSet) -> Tuple[float, Dict[str, Dict[str, Tensor]]]:
    """
    Evaluates ``build(**nodes)`` on a fresh tape on which all the given parameter sets are registered and
    returns the value together with the gradients, grouped by parameter set. Parameter sets which the output
    does not depend on receive all-zero gradients.

    .. code:: python

        value, grads = differentiate(lambda theta, phi: loss(theta, phi), theta=theta, phi=phi)
        grads['phi']['layer0.weight']

    :raises NumericalError: if the value or a gradient is not finite
    """
    tape = Tape()
    nodes = {name: tape.parameters_from(params, prefix=name + '.') for name, params in param_sets.items()}
    output = build(**nodes)
    if not numcore.is_node(output):
        output = tape.constant(output)
    if not np.all(np.isfinite(output.value)):
        raise NumericalError('the loss is not finite', location=output.index)

    gradients = backward(tape, output)
    grouped = {
        name: {key: gradients[name + '.' + key] for key in params.keys()}
        for name, params in param_sets.items()
    }
    return float(output.value), grouped


# TRAINING
# ########


class FinetuneConfig:
    """
    The settings of a value gradient finetuning run.

    ``beta`` is the reward temperature, the inverse of the control cost weight. ``alpha`` weights the
    boundary loss. ``subsampling`` is one of "binned" (one transition per bin), "fraction" (bins derived
    from ``subsample_rate``) and "none".
    """

    _ARGS = ['beta', 'alpha', 'fd_eps', 'n_rounds', 'trajectories', 'bins', 'subsampling', 'subsample_rate',
             'clip_percentile', 'lr_theta', 'lr_phi', 'weight_decay', 'max_grad_norm', 'sampler',
             'consistency_mode', 'eta', 'residual_hidden', 'value_hidden', 'reward_margin',
             'divergence_patience', 'eval_every', 'log_every']

    _DEFAULT_CONFIG = {
        'beta':                 1.0,
        'alpha':                1e4,
        'fd_eps':               1e-3,
        'n_rounds':             400,
        'trajectories':         32,
        'bins':                 5,
        'subsampling':          'binned',
        'subsample_rate':       None,
        'clip_percentile':      80.0,
        'lr_theta':             5e-4,
        'lr_phi':               5e-4,
        'weight_decay':         1e-2,
        'max_grad_norm':        1.0,
        'sampler':              {'n_steps': 20, 'integrator': 'euler'},
        'consistency_mode':     'partial',
        'eta':                  'quadratic',
        'residual_hidden':      [64, 64],
        'value_hidden':         [64, 64],
        'reward_margin':        0.1,
        'divergence_patience':  50,
        'eval_every':           50,
        'log_every':            10,
    }

    SUBSAMPLING = ['binned', 'fraction', 'none']

    INTEGER_KEYS = ['n_rounds', 'trajectories', 'bins', 'divergence_patience', 'eval_every', 'log_every']

    def __init__(self, **kwargs):
        values = dict(self._DEFAULT_CONFIG)
        values.update(kwargs)
        for key in self._ARGS:
            setattr(self, key, values[key])

        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig.from_dict(self.sampler)

        self._validate()

    # PUBLIC METHODS
    # --------------

    def make_subsampling(self) -> SubsamplingStrategy:
        if self.subsampling == 'none':
            return NoSubsampling()
        if self.subsampling == 'fraction':
            return FractionSubsampling(self.subsample_rate)
        return BinnedSubsampling(self.bins)

    def to_dict(self) -> Dict[str, Any]:
        data = {key: getattr(self, key) for key in self._ARGS}
        data['sampler'] = self.sampler.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'FinetuneConfig':
        unknown = set(data.keys()) - set(cls._ARGS)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f'unknown key "{key}" in finetune config', key=key)
        return cls(**data)

    # PROTECTED METHODS
    # -----------------

    def _validate(self):
        require_integers(self, self.INTEGER_KEYS)
        if self.beta < 0:
            raise ConfigError('beta can not be negative', key='beta')
        if self.alpha < 0:
            raise ConfigError('alpha can not be negative', key='alpha')
        if self.fd_eps <= 0:
            raise ConfigError('the finite difference step has to be positive', key='fd_eps')
        if self.n_rounds < 0 or self.trajectories < 1:
            raise ConfigError('n_rounds can not be negative and trajectories has to be positive', key='n_rounds')
        if self.bins < 1:
            raise ConfigError('bins has to be at least 1', key='bins')
        if self.subsampling not in self.SUBSAMPLING:
            raise ConfigError(f'unknown subsampling "{self.subsampling}"', key='subsampling')
        if self.subsampling == 'binned' and self.bins > self.sampler.n_steps:
            raise ConfigError('bins can not exceed the number of sampler steps', key='bins')
        if self.subsampling == 'fraction' and self.subsample_rate is None:
            raise ConfigError('fraction subsampling needs a subsample_rate', key='subsample_rate')
        if not 0.0 < self.clip_percentile <= 100.0:
            raise ConfigError('the clip percentile has to be in (0, 100]', key='clip_percentile')
        self.consistency_mode = CONSISTENCY_ALIASES.get(self.consistency_mode, self.consistency_mode)
        if self.consistency_mode not in CONSISTENCY_MODES:
            raise ConfigError(f'unknown consistency mode "{self.consistency_mode}"', key='consistency_mode')
        if self.eta not in ETA_SCHEDULES:
            raise ConfigError(f'unknown eta schedule "{self.eta}"', key='eta')

    # MAGIC METHODS
    # -------------

    def __str__(self):
        return 'FinetuneConfig(beta={}, alpha={}, n_rounds={}, bins={}, eta={})'.format(
            self.beta,
            self.alpha,
            self.n_rounds,
            self.bins,
            self.eta
        )


class FinetuneResult:
    """
    :ivar field: the finetuned velocity field
    :ivar records: one metric record per round, with the keys of ``METRIC_COLUMNS``
    :ivar warnings: the records emitted by the divergence guard
    :ivar snapshots: list of (round, theta) tuples taken every ``eval_every`` rounds and after the last round
    """

    def __init__(self,
                 field: ResidualField,
                 records: List[dict],
                 warnings: List[dict],
                 snapshots: List[Tuple[int, ParamSet]],
                 value_field: Optional[ValueGradientField] = None):
        self.field = field
        self.records = records
        self.warnings = warnings
        self.snapshots = snapshots
        self.value_field = value_field

    def __str__(self):
        return 'FinetuneResult(rounds={}, warnings={})'.format(len(self.records), len(self.warnings))


class DivergenceGuard:
    """
    Emits a warning record if the mean reward stays below its initial value minus the margin for
    ``patience`` consecutive rounds.
    """

    def __init__(self, margin: float, patience: int):
        self.margin = margin
        self.patience = patience
        self.initial = None
        self.count = 0
        self.warnings: List[dict] = []

    def update(self, round_index: int, mean_reward: float):
        if self.initial is None:
            self.initial = mean_reward

        self.count = self.count + 1 if mean_reward < self.initial - self.margin else 0
        if self.count == self.patience:
            message = 'mean reward {:.4f} stayed below the initial {:.4f} minus margin {} for {} rounds'.format(
                mean_reward, self.initial, self.margin, self.patience
            )
            logger.warning('round %d: %s', round_index, message)
            self.warnings.append({'round': round_index, 'message': message})


class ValueGradientTrainer:
    """
    Runs the finetuning rounds. The trainer is an iterator which performs one round per ``next`` call and
    returns the metric record of that round.

    Both networks start with a zero final layer, so that initially v_theta = v_base and g is exactly
    the forward-looking leading term. The randomness comes from the substreams "theta" and "phi"
    (initialization), "trajectories" and "subsampling" of the given rng.
    """

    def __init__(self, config: FinetuneConfig, v_base: VelocityField, reward: Reward, rng: Rng):
        dim = v_base.dim if v_base.dim is not None else reward.dim
        if dim is None:
            raise ShapeError('either the base field or the reward has to define the dimension')
        if reward.dim is not None and reward.dim != dim:
            raise ShapeError(f'reward of dimension {reward.dim} does not fit a base field of dimension {dim}')

        self.config = config
        self.v_base = v_base
        self.reward = reward
        self.dim = dim

        residual_spec = MlpSpec(dim, hidden=config.residual_hidden, final_init='tiny')
        value_spec = MlpSpec(dim, hidden=config.value_hidden, final_init='tiny')
        theta = init_mlp(residual_spec, rng.child('theta'))
        phi = init_mlp(value_spec, rng.child('phi'))

        self.v_theta = ResidualField(v_base, MlpField(residual_spec, theta))
        self.gfield = ValueGradientField(reward, self.v_theta, MlpField(value_spec, phi), eta=config.eta)
        self.opt_theta = OptState.create(theta, lr=config.lr_theta, weight_decay=config.weight_decay)
        self.opt_phi = OptState.create(phi, lr=config.lr_phi, weight_decay=config.weight_decay)

        self.trajectory_rng = rng.child('trajectories')
        self.subsampling_rng = rng.child('subsampling')
        self.subsampling = config.make_subsampling()
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
        return FinetuneResult(self.v_theta, self.records, self.guard.warnings, self.snapshots, self.gfield)

    def collect(self) -> Tuple[Trajectory, TransitionBatch]:
        x0 = self.trajectory_rng.normal(size=(self.config.trajectories, self.dim))
        trajectory = integrate(self.v_theta, x0, self.config.sampler)
        batch = self.subsampling(trajectory, self.subsampling_rng)
        return trajectory, batch

    def train_round(self) -> dict:
        config = self.config
        trajectory, batch = self.collect()
        mean_reward = float(np.mean(self.reward.value(trajectory.terminal)))

        leading = self.reward.grad(one_step_prediction(self.v_theta, batch.x, batch.t))
        threshold = percentile_threshold(leading, config.clip_percentile)

        parts = {}

        def value_objective(theta, phi):
            consistency = consistency_loss(self.gfield, self.v_base, self.v_theta, batch, config, phi, threshold)
            boundary = boundary_loss(self.gfield, batch.terminals, self.reward, phi)
            parts['consistency'] = float(numcore.value_of(consistency))
            parts['boundary'] = float(numcore.value_of(boundary))
            return numcore.add(consistency, numcore.scale(boundary, config.alpha))

        theta, phi = self.v_theta.params, self.gfield.params
        try:
            _, grads = differentiate(value_objective, theta=theta, phi=phi)
            phi, self.opt_phi, norm_phi = optimizer_update(phi, grads['phi'], self.opt_phi, config.max_grad_norm)
            self.gfield = self.gfield.with_params(phi)

            def velocity_objective(theta, phi):
                return matching_loss(self.v_theta, self.gfield, batch, config.beta, theta, phi, threshold)

            loss_matching, grads = differentiate(velocity_objective, theta=theta, phi=phi)
            theta, self.opt_theta, norm_theta = optimizer_update(theta, grads['theta'], self.opt_theta,
                                                                 config.max_grad_norm)
        except NumericalError as error:
            raise NumericalError(f'training diverged in round {self.round}: {error}', location=self.round)

        self.v_theta = self.v_theta.with_params(theta)
        self.gfield = self.gfield.with_predictor(self.v_theta)

        return {
            'round':            self.round,
            'mean_reward':      mean_reward,
            'loss_matching':    loss_matching,
            'loss_consistency': parts['consistency'],
            'loss_boundary':    parts['boundary'],
            'grad_norm_theta':  norm_theta,
            'grad_norm_phi':    norm_phi,
        }

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
            logger.info(' '.join('{}={:.6g}'.format(key, record[key]) for key in METRIC_COLUMNS))

        self.round += 1
        return record


def vgg_flow_train(config: FinetuneConfig, v_base: VelocityField, reward: Reward, rng: Rng) -> FinetuneResult:
    """
    Finetunes the base field towards the reward with value gradient matching for ``config.n_rounds`` rounds.

    :raises NumericalError: if a loss or gradient becomes non-finite, reporting the round
    """
    return ValueGradientTrainer(config, v_base, reward, rng).run()
