"""
The invariant suites behind the ``selfcheck`` and ``oracle`` subcommands.

A check is a function which receives an rng (and the oracle settings) and returns a ``CheckResult``. A suite
runs its checks in order, a check which raises one of the package errors counts as failed and the suite
continues with the next one.

.. code:: python

    report = run_suite('selfcheck', SELFCHECK_SUITE, Rng(0))
    for result in report.results:
        print(result.name, result.passed, result.value)
"""
import logging
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import norm

from pyflowalign import numcore
from pyflowalign.numcore import Tape, Rng, ParamSet, backward
from pyflowalign.optim import OptState, adamw_step
from pyflowalign.nets import MlpSpec, init_mlp
from pyflowalign.flow import (ConstantField, LinearField, FunctionField, MlpField, ResidualField, SamplerConfig,
                              integrate, divergence_fd, jvp_fd, vjp_fd, log_density)
from pyflowalign.rewards import Quadratic, GaussMixLogDensity, Ring
from pyflowalign.align import (FinetuneConfig, ValueGradientField, ValueGradientTrainer, percentile_threshold,
                               consistency_residual, consistency_loss, boundary_loss, matching_loss,
                               differentiate, vgg_flow_train)
from pyflowalign.baselines import pmp_adjoint_solve, baseline_train
from pyflowalign.verify import (LQProblem, LqFeedbackField, riccati_solve, lq_rollout, brute_force_control,
                                feedback_discrepancy, w2_bound_check, kl_between_flows, evaluate_against_base)
from pyflowalign.errors import ConfigError, PyflowalignError

logger = logging.getLogger(__name__)


class CheckResult:

    def __init__(self, name: str, passed: bool, value: Any, threshold: Any = None, detail: str = ''):
        self.name = name
        self.passed = bool(passed)
        self.value = value
        self.threshold = threshold
        self.detail = detail

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name':         self.name,
            'passed':       self.passed,
            'value':        self.value,
            'threshold':    self.threshold,
            'detail':       self.detail,
        }

    def __str__(self):
        return '{} {}: {} (threshold {})'.format('PASS' if self.passed else 'FAIL', self.name, self.value,
                                                  self.threshold)


class SuiteReport:

    def __init__(self, name: str, results: List[CheckResult]):
        self.name = name
        self.results = results

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [result for result in self.results if not result.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'suite':        self.name,
            'passed':       self.passed,
            'checks':       [result.to_dict() for result in self.results],
        }

    def __str__(self):
        return 'SuiteReport({}, passed={}/{})'.format(self.name, len(self.results) - len(self.failures),
                                                      len(self.results))


def run_suite(name: str, checks: List[Tuple[str, Callable]], rng: Rng, *args) -> SuiteReport:
    results = []
    for check_name, check in checks:
        try:
            result = check(rng.child(check_name), *args)
        except (PyflowalignError, ValueError, ArithmeticError) as error:
            logger.error('check "%s" raised %s: %s', check_name, type(error).__name__, error)
            result = CheckResult(check_name, False, None, detail=f'{type(error).__name__}: {error}')

        log = logger.info if result.passed else logger.error
        log('%s', result)
        results.append(result)

    return SuiteReport(name, results)


def _relative_error(actual, expected) -> float:
    actual, expected = np.asarray(actual), np.asarray(expected)
    return float(np.linalg.norm(actual - expected) / max(float(np.linalg.norm(expected)), 1e-8))


def gradient_fd(fn: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central finite difference gradient of a scalar function of a parameter set."""
    gradients = {}
    for name, value in params.items():
        gradient = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            shifted = {key: array.copy() for key, array in params.items()}
            shifted[name][index] = value[index] + h
            forward = fn(shifted)
            shifted[name][index] = value[index] - h
            gradient[index] = (forward - fn(shifted)) / (2.0 * h)
        gradients[name] = gradient
    return gradients


def _flatten(gradients: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([gradients[name].ravel() for name in sorted(gradients.keys())])


# SELFCHECK
# #########

AUTODIFF_GRAPHS: List[Callable] = [
    lambda p, x: numcore.sum(numcore.tanh(numcore.matmul(x, p['w']))),
    lambda p, x: numcore.mean(numcore.silu(numcore.add(numcore.matmul(x, p['w']), p['b']))),
    lambda p, x: numcore.sum(numcore.mul(numcore.slice_(numcore.tanh(numcore.matmul(x, p['w'])), 0, 2), p['c'])),
    lambda p, x: numcore.mean(numcore.sqdist(numcore.matmul(x, p['w']), numcore.concat([p['c'], p['c']]))),
    lambda p, x: numcore.sum(numcore.square(numcore.sub(numcore.relu(numcore.matmul(x, p['w'])),
                                                        numcore.scale(p['b'], 0.5)))),
    lambda p, x: numcore.sum(numcore.mean(numcore.mul(numcore.silu(numcore.matmul(x, p['w'])),
                                                      numcore.tanh(numcore.add(numcore.matmul(x, p['w']), p['b']))),
                                          axis=0)),
]


def check_autodiff(rng: Rng, n_graphs: int = 20) -> CheckResult:
    errors = []
    for index in range(n_graphs):
        graph_rng = rng.child(f'graph{index}')
        graph = AUTODIFF_GRAPHS[index % len(AUTODIFF_GRAPHS)]
        x = graph_rng.normal(size=(5, 3))
        params = {
            'w': graph_rng.normal(size=(3, 4)),
            'b': graph_rng.normal(size=4),
            'c': graph_rng.normal(size=2),
        }

        tape = Tape()
        output = graph(tape.parameters_from(params), x)
        gradients = backward(tape, output)
        expected = gradient_fd(lambda p: float(graph(p, x)), params)
        errors.append(_relative_error(_flatten(gradients), _flatten(expected)))

    worst = max(errors)
    return CheckResult('autodiff', worst < 1e-5, worst, 1e-5,
                       f'{n_graphs} random graphs against central differences')


def check_stop_gradient(rng: Rng) -> CheckResult:
    w = rng.normal(size=(3, 3))
    x = rng.normal(size=3)

    tape = Tape()
    node = tape.parameter('w', w)
    y = numcore.matmul(node, x)
    gradients = backward(tape, numcore.sum(numcore.mul(numcore.stop_gradient(y), y)))
    error = float(np.max(np.abs(gradients['w'] - np.outer(w @ x, x))))
    return CheckResult('stop_gradient', error < 1e-12, error, 1e-12)


def check_adamw_step(rng: Rng) -> CheckResult:
    params = {'p': np.array([1.0])}
    state = OptState.create(params, lr=0.1, weight_decay=0.01)
    updated, _ = adamw_step(params, {'p': np.array([0.5])}, state)
    expected = 1.0 - 0.1 * 0.01 - 0.1 * 0.5 / (0.5 + 1e-8)
    error = float(abs(updated['p'][0] - expected))
    return CheckResult('adamw_first_step', error < 1e-12, error, 1e-12)


def check_fd_kernels(rng: Rng) -> CheckResult:
    A = rng.normal(size=(3, 3))
    x = rng.normal(size=(8, 3))
    u = rng.normal(size=(8, 3))
    field = LinearField(A)

    errors = [
        float(np.max(np.abs(divergence_fd(field, x, 0.3) - np.trace(A)))),
        float(np.max(np.abs(vjp_fd(field, x, 0.3, u, 1e-4) - u @ A))),
        float(np.max(np.abs(jvp_fd(field, x, 0.3, u, 1e-4) - u @ A.T))),
    ]
    worst = max(errors)
    return CheckResult('fd_kernels', worst < 1e-6, worst, 1e-6, 'divergence, vjp and jvp of a linear field')


def check_reward_gradients(rng: Rng, n_points: int = 100) -> CheckResult:
    N = rng.normal(size=(2, 2))
    rewards = [
        Quadratic(N @ N.T + np.eye(2), rng.normal(size=2)),
        GaussMixLogDensity(rng.normal(size=(3, 2)), [0.2, 0.3, 0.5], 0.5),
        Ring(2.0, 0.5),
    ]
    x = 2.0 * rng.normal(size=(n_points, 2))
    h = 1e-5

    errors = []
    for reward in rewards:
        expected = np.zeros_like(x)
        for i in range(2):
            offset = np.zeros(2)
            offset[i] = h
            expected[:, i] = (reward.value(x + offset) - reward.value(x - offset)) / (2.0 * h)
        errors.append(_relative_error(reward.grad(x), expected))

    worst = max(errors)
    return CheckResult('reward_gradients', worst < 1e-5, worst, 1e-5)


def check_integrators(rng: Rng) -> CheckResult:
    field = LinearField([[1.0]])
    euler = integrate(field, np.array([1.0]), SamplerConfig(20, 'euler')).terminal[0]
    rk4 = integrate(field, np.array([1.0]), SamplerConfig(20, 'rk4')).terminal[0]
    errors = [abs(euler - 1.05 ** 20), abs(rk4 - np.e)]
    passed = errors[0] < 1e-12 and errors[1] < 1e-6
    return CheckResult('integrators', passed, [float(e) for e in errors], [1e-12, 1e-6])


def check_log_density(rng: Rng) -> CheckResult:
    scale = 2.0
    x1 = scale * rng.normal(size=(64, 1))
    _, logp = log_density(LinearField([[np.log(scale)]]), x1, 64)
    error = float(np.max(np.abs(logp - norm.logpdf(x1[:, 0], scale=scale))))
    return CheckResult('log_density', error < 1e-6, error, 1e-6, 'linear flow pushing N(0, 1) to N(0, 4)')


def check_boundary_exactness(rng: Rng) -> CheckResult:
    spec = MlpSpec(2, hidden=[16])
    base = MlpField(spec, init_mlp(spec, rng.child('base')))
    tiny = spec.with_final_init('tiny')
    v_theta = ResidualField(base, MlpField(tiny, init_mlp(tiny, rng.child('theta'))))
    gfield = ValueGradientField(Ring(2.0, 0.5), v_theta, MlpField(tiny, init_mlp(tiny, rng.child('phi'))))

    loss = float(boundary_loss(gfield, 3.0 * rng.normal(size=(32, 2)), gfield.reward))
    return CheckResult('boundary_exact_at_init', loss == 0.0, loss, 0.0)


def check_gradient_isolation(rng: Rng) -> CheckResult:
    spec = MlpSpec(2, hidden=[16])
    base = MlpField(spec, init_mlp(spec, rng.child('base')))
    config = FinetuneConfig(trajectories=8, residual_hidden=[8], value_hidden=[8], bins=4,
                            sampler={'n_steps': 8, 'integrator': 'euler'})
    trainer = ValueGradientTrainer(config, base, Ring(2.0, 0.5), rng.child('trainer'))
    _, batch = trainer.collect()

    def matching(theta, phi):
        return matching_loss(trainer.v_theta, trainer.gfield, batch, config.beta, theta, phi)

    def consistency(theta, phi):
        return consistency_loss(trainer.gfield, base, trainer.v_theta, batch, config, phi)

    _, matching_grads = differentiate(matching, theta=trainer.v_theta.params, phi=trainer.gfield.params)
    _, consistency_grads = differentiate(consistency, theta=trainer.v_theta.params, phi=trainer.gfield.params)
    leak = max(
        float(np.max(np.abs(_flatten(matching_grads['phi'])))),
        float(np.max(np.abs(_flatten(consistency_grads['theta'])))),
    )
    return CheckResult('gradient_isolation', leak == 0.0, leak, 0.0,
                       'matching loss does not reach phi, consistency loss does not reach theta')


def check_w2_bound(rng: Rng, n_trials: int = 100) -> CheckResult:
    c = np.array([0.3, -0.4])
    constant = w2_bound_check(ConstantField(c), ConstantField([0.0, 0.0]), 64, 20, rng.child('constant'))
    constant_error = max(abs(constant.lhs - 0.25), abs(constant.rhs - np.e * 0.25))

    spec = MlpSpec(2, hidden=[16])
    base = MlpField(spec, init_mlp(spec, rng.child('base')))
    violations = 0
    for trial in range(n_trials):
        trial_rng = rng.child(f'trial{trial}')
        params = init_mlp(spec, trial_rng.child('residual'))
        final = len(spec.layer_shapes()) - 1
        params[f'layer{final}.weight'] = 0.1 * params[f'layer{final}.weight']
        v_theta = ResidualField(base, MlpField(spec, params))
        if not w2_bound_check(v_theta, base, 128, 20, trial_rng).holds:
            violations += 1

    passed = constant_error < 1e-10 and violations == 0
    return CheckResult('w2_bound', passed, {'constant_case_error': constant_error, 'violations': violations},
                       {'constant_case_error': 1e-10, 'violations': 0}, f'{n_trials} random residual fields')


def check_kl_identity(rng: Rng, n_samples: int = 4096) -> CheckResult:
    spread = 30.0
    expected = np.log(spread) + 1.0 / (2.0 * spread ** 2) - 0.5
    report = kl_between_flows(LinearField([[0.0]]), LinearField([[np.log(spread)]]), n_samples, 64, rng)
    errors = [abs(report.kl - expected) / expected, abs(report.rhs - expected) / expected]
    return CheckResult('kl_identity', max(errors) < 0.02, [float(e) for e in errors], 0.02,
                       'N(0, 1) against N(0, {}) with closed form KL {:.5f}'.format(spread ** 2, expected))


def check_percentile_rule(rng: Rng) -> CheckResult:
    threshold = percentile_threshold(np.arange(1.0, 6.0)[:, None], 80.0)
    return CheckResult('percentile_rule', abs(threshold - 4.2) < 1e-12, threshold, 4.2)


def check_rng_determinism(rng: Rng) -> CheckResult:
    first = Rng(7).child('stream').normal(size=16)
    second = Rng(7).child('stream').normal(size=16)
    other = Rng(7).child('other').normal(size=16)
    passed = np.array_equal(first, second) and not np.array_equal(first, other)
    return CheckResult('rng_determinism', passed, passed, True)


SELFCHECK_SUITE: List[Tuple[str, Callable]] = [
    ('autodiff', check_autodiff),
    ('stop_gradient', check_stop_gradient),
    ('adamw_first_step', check_adamw_step),
    ('fd_kernels', check_fd_kernels),
    ('reward_gradients', check_reward_gradients),
    ('integrators', check_integrators),
    ('log_density', check_log_density),
    ('boundary_exact_at_init', check_boundary_exactness),
    ('gradient_isolation', check_gradient_isolation),
    ('w2_bound', check_w2_bound),
    ('kl_identity', check_kl_identity),
    ('percentile_rule', check_percentile_rule),
    ('rng_determinism', check_rng_determinism),
]


# ORACLE
# ######
# The oracle checks additionally receive the oracle section of the experiment config.


def check_scalar_riccati(rng: Rng, config) -> CheckResult:
    H, lam = 1.0, 1.0
    solution = riccati_solve(LQProblem([[0.0]], [[H]], [0.0], lam), n_grid=config.n_grid)
    expected = lam * H / (lam + H * (1.0 - solution.times))
    error = float(np.max(np.abs(solution.P[:, 0, 0] - expected)))
    return CheckResult('scalar_riccati_closed_form', error < 1e-8, error, 1e-8)


def _cross_oracle_discrepancy(problem: LQProblem, x0, config) -> float:
    solution = riccati_solve(problem, n_grid=config.n_grid)
    result = brute_force_control(problem, x0, config.n_steps, config.brute_force_iters)
    return feedback_discrepancy(problem, solution, result)


def check_random_cross_oracle(rng: Rng, config) -> CheckResult:
    discrepancies = []
    for index in range(config.random_instances):
        instance_rng = rng.child(f'instance{index}')
        problem = LQProblem.random(2, instance_rng, lam=config.lam)
        discrepancies.append(_cross_oracle_discrepancy(problem, instance_rng.normal(size=2), config))

    worst = max(discrepancies) if discrepancies else 0.0
    return CheckResult('random_cross_oracle', worst < 1e-3, worst, 1e-3,
                       f'{config.random_instances} random instances, RMS of open-loop against feedback controls')


def check_bundled_cross_oracle(rng: Rng, config) -> CheckResult:
    problem = config.problem()
    discrepancy = _cross_oracle_discrepancy(problem, rng.normal(size=problem.dim), config)
    return CheckResult('bundled_cross_oracle', discrepancy < 1e-3, discrepancy, 1e-3, str(problem))


def check_oracle_consistency(rng: Rng, config) -> CheckResult:
    problem = config.problem()
    solution = riccati_solve(problem, n_grid=config.n_grid)
    base = problem.base_field()
    feedback = LqFeedbackField(solution, problem.beta)
    optimal = FunctionField(lambda x, t: base(x, t) + feedback(x, t), problem.dim)

    x0 = rng.normal(size=(config.consistency_samples, problem.dim))
    trajectory = integrate(base, x0, SamplerConfig(n_steps=config.n_steps))
    usable = trajectory.times[:-1] + config.consistency_eps <= 1.0 + 1e-12
    x = trajectory.states[:-1][usable].reshape(-1, problem.dim)
    t = np.repeat(trajectory.times[:-1][usable], config.consistency_samples)

    residual = consistency_residual(solution, base, optimal, x, t, config.consistency_eps, problem.beta,
                                    mode='partial')
    value = float(np.mean(np.linalg.norm(residual, axis=-1) / (1.0 + np.linalg.norm(x, axis=-1))))
    return CheckResult('oracle_consistency_residual', value < 5e-3, value, 5e-3)


def check_pmp_costates(rng: Rng, config) -> CheckResult:
    problem = config.problem()
    solution = riccati_solve(problem, n_grid=config.n_grid)
    base = problem.base_field()
    feedback = LqFeedbackField(solution, problem.beta)
    optimal = FunctionField(lambda x, t: base(x, t) + feedback(x, t), problem.dim)

    rollout = lq_rollout(problem, solution, rng.normal(size=(16, problem.dim)), config.n_steps)
    adjoints = pmp_adjoint_solve(rollout.trajectory, optimal, base, problem.reward, problem.lam)
    expected = np.stack([
        solution.value_gradient(x, t) for x, t in zip(rollout.trajectory.states, rollout.trajectory.times)
    ])
    error = float(np.max(np.abs(adjoints.costates - expected)))
    return CheckResult('pmp_costates', error < 1e-2, error, 1e-2, 'costates against P(t) x + q(t)')


def beta_sweep(config, rng: Rng, n_points: int = 256) -> Dict[str, List[float]]:
    """
    Finetunes the bundled instance with the temperatures ``beta_sweep * beta`` and reports for every
    temperature the final mean residual norm on random states and the number of rounds needed to reach half of
    the optimal reward gain.
    """
    reference = config.problem()
    finetune = FinetuneConfig(n_rounds=config.beta_sweep_rounds, eval_every=0, log_every=0)
    states = rng.child('eval_states').normal(size=(n_points, reference.dim))
    eval_times = rng.child('eval_times').uniform(size=n_points)

    norms, rounds = [], []
    for factor in config.beta_sweep:
        problem = LQProblem(reference.A, reference.H, reference.h, reference.lam / factor)
        optimum = lq_rollout(problem, riccati_solve(problem, config.n_grid), states,
                             finetune.sampler.n_steps).mean_reward

        options = FinetuneConfig(**{**finetune.to_dict(), 'beta': problem.beta})
        result = vgg_flow_train(options, problem.base_field(), problem.reward, rng.child('sweep'))

        residual = result.field.residual_velocity(states, eval_times)
        norms.append(float(np.mean(np.linalg.norm(residual, axis=-1))))

        start = result.records[0]['mean_reward']
        target = start + 0.5 * (optimum - start)
        reached = [record['round'] for record in result.records if record['mean_reward'] >= target]
        rounds.append(reached[0] if reached else len(result.records))
        logger.info('beta %.4g: residual norm %.5f, rounds to half gain %d', problem.beta, norms[-1], rounds[-1])

    return {'beta': [reference.beta * factor for factor in config.beta_sweep], 'residual_norm': norms,
            'rounds_to_half_gain': rounds}


def check_beta_sweep(rng: Rng, config) -> CheckResult:
    sweep = beta_sweep(config, rng)
    norms, rounds = sweep['residual_norm'], sweep['rounds_to_half_gain']
    passed = all(a <= b for a, b in zip(norms, norms[1:])) and all(a >= b for a, b in zip(rounds, rounds[1:]))
    return CheckResult('beta_sweep', passed, sweep, None,
                       'residual norm non-decreasing and rounds to half gain non-increasing in beta')


def check_vgg_flow_lq(rng: Rng, config, n_points: int = 256) -> CheckResult:
    """
    Finetunes the bundled instance for ``lq_rounds`` rounds. The mean reward of the finetuned flow has to be
    within 5% of the mean reward of the optimal feedback law, both sampled from the same noise.
    """
    problem = config.problem()
    options = FinetuneConfig(n_rounds=config.lq_rounds, beta=problem.beta, eval_every=0, log_every=0)
    result = vgg_flow_train(options, problem.base_field(), problem.reward, rng.child('train'))

    x0 = rng.child('eval_states').normal(size=(n_points, problem.dim))
    terminal = integrate(result.field, x0, options.sampler).terminal
    achieved = float(np.mean(problem.reward.value(terminal)))
    optimum = lq_rollout(problem, riccati_solve(problem, config.n_grid), x0, options.sampler.n_steps).mean_reward

    gap = abs(achieved - optimum) / abs(optimum)
    return CheckResult('vgg_flow_lq_optimum', gap <= 0.05, {'mean_reward': achieved, 'optimum': optimum,
                                                            'relative_gap': gap}, 0.05)


ORACLE_SUITE: List[Tuple[str, Callable]] = [
    ('scalar_riccati_closed_form', check_scalar_riccati),
    ('random_cross_oracle', check_random_cross_oracle),
    ('bundled_cross_oracle', check_bundled_cross_oracle),
    ('oracle_consistency_residual', check_oracle_consistency),
    ('pmp_costates', check_pmp_costates),
]


def oracle_suite(config) -> List[Tuple[str, Callable]]:
    """The oracle checks for the given settings. The finetuning checks only run for a positive round budget."""
    checks = list(ORACLE_SUITE)
    if config.lq_rounds > 0:
        checks.append(('vgg_flow_lq_optimum', check_vgg_flow_lq))
    if config.beta_sweep_rounds > 0:
        checks.append(('beta_sweep', check_beta_sweep))
    return checks


# METHOD COMPARISON
# #################

COMPARISON_METHODS = ['vgg_flow', 'refl', 'draft']

COMPARISON_COLUMNS = ['seed', 'method', 'round', 'mean_reward', 'diversity', 'w2_to_base']


def snapshot_curve(result, base, reward, n_samples: int, n_steps: int, rng: Rng) -> List[dict]:
    """
    Evaluates every snapshot of the finetuning result against the base, all of them from the same noise.
    The rows are ordered by round.
    """
    residual = result.field.residual
    rows = []
    for round_index, theta in result.snapshots:
        field = ResidualField(base, MlpField(residual.spec, theta))
        report, _, _ = evaluate_against_base(field, base, reward, n_samples, n_steps, rng)
        rows.append({
            'round':        round_index,
            'mean_reward':  report.mean_reward,
            'diversity':    report.diversity,
            'w2_to_base':   report.w2_to_base,
        })
    return rows


def value_at_reward(curve: List[dict], level: float, column: str) -> Optional[float]:
    """
    Interpolates ``column`` linearly between the two snapshots around the first point at which the mean reward
    of the curve reaches ``level``. None if the curve never reaches the level.
    """
    previous = None
    for row in curve:
        if row['mean_reward'] >= level:
            if previous is None or row['mean_reward'] == previous['mean_reward']:
                return float(row[column])
            weight = (level - previous['mean_reward']) / (row['mean_reward'] - previous['mean_reward'])
            return float(previous[column] + weight * (row[column] - previous[column]))
        previous = row
    return None


def method_comparison(section, base, reward, rng: Rng, seeds: int = 3, n_samples: int = 256,
                      n_steps: int = 20) -> Dict[str, Any]:
    """
    Finetunes the base with every method of ``COMPARISON_METHODS`` and compares them at a matched reward: the
    final mean reward of ReFL for the same seed. For every method the distance to the base and the diversity
    are interpolated along its snapshots at that reward level.

    :param section: the finetune section of the experiment, the settings of every method are taken from it
    :return: dict with the snapshot "rows" of all runs and one summary per seed in "seeds"
    """
    options = {method: section.options_for(method) for method in COMPARISON_METHODS}
    if not section.eval_every:
        raise ConfigError('the comparison needs periodic snapshots, eval_every has to be positive', key='eval_every')

    rows, summaries = [], []
    for seed in range(seeds):
        seed_rng = rng.child(f'seed{seed}')
        curves = {}
        for method in COMPARISON_METHODS:
            train = vgg_flow_train if method == 'vgg_flow' else baseline_train
            result = train(options[method], base, reward, seed_rng.child(method))
            curves[method] = snapshot_curve(result, base, reward, n_samples, n_steps, seed_rng.child('eval'))
            rows += [{'seed': seed, 'method': method, **row} for row in curves[method]]

        level = curves['refl'][-1]['mean_reward']
        w2 = {method: value_at_reward(curve, level, 'w2_to_base') for method, curve in curves.items()}
        closest = w2['vgg_flow'] is not None and all(
            value is None or w2['vgg_flow'] <= value for method, value in w2.items() if method != 'vgg_flow'
        )
        summaries.append({
            'seed':                 seed,
            'reward_level':         level,
            'increased':            {method: curve[-1]['mean_reward'] > curve[0]['mean_reward']
                                     for method, curve in curves.items()},
            'w2_at_level':          w2,
            'diversity_at_level':   {method: value_at_reward(curve, level, 'diversity')
                                     for method, curve in curves.items()},
            'vgg_flow_closest':     closest,
        })
        logger.info('comparison seed %d at reward %.5f: w2 to base %s', seed, level, w2)

    return {'rows': rows, 'seeds': summaries}


def comparison_check(comparison: Dict[str, Any]) -> CheckResult:
    """
    Passes if every method increased the mean reward for every seed and the value gradient method is closest
    to the base at the matched reward for at least two thirds of the seeds.
    """
    summaries = comparison['seeds']
    increased = all(all(summary['increased'].values()) for summary in summaries)
    wins = sum(summary['vgg_flow_closest'] for summary in summaries)
    required = int(np.ceil(2 * len(summaries) / 3))
    return CheckResult('matched_reward_comparison', increased and wins >= required, summaries, required,
                       f'value gradient method closest to the base for {wins} of {len(summaries)} seeds')
