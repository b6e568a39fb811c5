"""
Ground truth oracles and distribution metrics.

Linear quadratic problems
-------------------------
With the linear base field ``v_base(x) = A x``, the quadratic reward ``r(x) = -1/2 x^T H x + h^T x`` and the
control cost ``lam/2 ||u||^2`` the value function is quadratic, ``V(x, t) = 1/2 x^T P(t) x + q(t)^T x + c(t)``,
and its gradient ``P(t) x + q(t)`` follows from the Riccati equations

    dP/dt = beta P^2 - (P A + A^T P),    P(1) = H
    dq/dt = beta P q - A^T q,            q(1) = -h

with ``beta = 1 / lam``. The optimal residual field is ``-beta (P(t) x + q(t))``.

Metrics
-------
Samples are compared with the squared Wasserstein-2 distance, the KL divergence between two flows with a
shared base density, the coupled distance bound and the diversity (trace of the sample covariance).
"""
import json
import logging
from typing import Callable, Dict, List, Optional, Tuple, Any

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.integrate import trapezoid

from pyflowalign import numcore
from pyflowalign.numcore import Tape, Rng, Tensor, backward
from pyflowalign.flow import (VelocityField, LinearField, SamplerConfig, Trajectory, integrate, solve,
                              log_density, divergence_fd)
from pyflowalign.rewards import Quadratic
from pyflowalign.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


# CONSTANTS
# ---------

EXACT_ASSIGNMENT_LIMIT = 256

SLICED_PROJECTIONS = 64


# LINEAR QUADRATIC ORACLE
# #######################


class LQProblem:

    def __init__(self, A, H, h, lam: float):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.reward = Quadratic(H, h)
        self.lam = float(lam)

        if self.A.shape != (self.dim, self.dim):
            raise ShapeError(f'A has to be a {self.dim}x{self.dim} matrix, got shape {self.A.shape}')
        if not np.all(np.isfinite(self.A)):
            raise ConfigError('A has to be finite', key='A')
        if self.lam <= 0:
            raise ConfigError('lam has to be positive', key='lam')

    @property
    def H(self) -> Tensor:
        return self.reward.H

    @property
    def h(self) -> Tensor:
        return self.reward.h

    @property
    def dim(self) -> int:
        return self.reward.dim

    @property
    def beta(self) -> float:
        return 1.0 / self.lam

    def base_field(self) -> LinearField:
        return LinearField(self.A)

    def to_dict(self) -> Dict[str, Any]:
        return {'A': self.A.tolist(), 'H': self.H.tolist(), 'h': self.h.tolist(), 'lam': self.lam}

    @classmethod
    def from_dict(cls, data: dict) -> 'LQProblem':
        return cls(A=data['A'], H=data['H'], h=data['h'], lam=data['lam'])

    @classmethod
    def random(cls,
               dim: int,
               rng: Rng,
               lam: float = 1.0,
               rotation_scale: float = 0.1,
               symmetric_scale: float = 0.01) -> 'LQProblem':
        """
        A random instance with a positive definite H and a small, mostly rotational drift matrix. The Euler
        discretization error of the optimal controls grows with the symmetric part of A, so these instances
        keep it small.
        """
        M = rng.normal(size=(dim, dim))
        S = rng.normal(size=(dim, dim))
        A = rotation_scale * 0.5 * (M - M.T) + symmetric_scale * 0.5 * (S + S.T)
        N = rng.normal(size=(dim, dim))
        H = 0.5 * N @ N.T / dim + 0.5 * np.eye(dim)
        h = rng.normal(size=dim)
        return cls(A, H, h, lam)

    def __str__(self):
        return 'LQProblem(dim={}, lam={})'.format(self.dim, self.lam)


class RiccatiSolution:
    """
    P(t) and q(t) on a uniform grid from 0 to 1. Values in between are interpolated linearly.
    """

    def __init__(self, times: Tensor, P: Tensor, q: Tensor):
        self.times = times
        self.P = P
        self.q = q

    # PUBLIC METHODS
    # --------------

    def coefficients(self, t) -> Tuple[Tensor, Tensor]:
        """
        :raises ValueError: if t is outside of [0, 1]
        :return: P(t) with shape (..., d, d) and q(t) with shape (..., d) for scalar or array valued t
        """
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < -1e-12) or np.any(t > 1.0 + 1e-12):
            raise ValueError('the value gradient is only defined for times in [0, 1]')

        n = len(self.times) - 1
        position = np.asarray(np.clip(t, 0.0, 1.0) * n)
        lower = np.asarray(np.minimum(np.floor(position).astype(np.int64), n - 1))
        weight = np.asarray(position - lower)
        P = (1.0 - weight)[..., None, None] * self.P[lower] + weight[..., None, None] * self.P[lower + 1]
        q = (1.0 - weight)[..., None] * self.q[lower] + weight[..., None] * self.q[lower + 1]
        return P, q

    def value_gradient(self, x, t) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        P, q = self.coefficients(t)
        return np.einsum('...ij,...j->...i', P, x) + q

    # MAGIC METHODS
    # -------------

    def __call__(self, x, t) -> Tensor:
        return self.value_gradient(x, t)


def _riccati_rhs(P: Tensor, q: Tensor, A: Tensor, beta: float) -> Tuple[Tensor, Tensor]:
    return beta * P @ P - (P @ A + A.T @ P), beta * P @ q - A.T @ q


def riccati_solve(problem: LQProblem, n_grid: int = 200, cap: float = 1e8) -> RiccatiSolution:
    """
    Integrates the Riccati equations backwards from t=1 with rk4 on a uniform grid of ``n_grid`` steps. P is
    symmetrized after every step.

    :raises ConfigError: if n_grid is below 16
    :raises NumericalError: if the norm of P exceeds the cap. The location is the time.
    """
    if n_grid < 16:
        raise ConfigError(f'the Riccati grid needs at least 16 steps, got {n_grid}', key='n_grid')

    A, beta = problem.A, problem.beta
    times = np.linspace(0.0, 1.0, n_grid + 1)
    dt = -1.0 / n_grid

    P, q = problem.H.copy(), -problem.h.copy()
    Ps, qs = [P], [q]
    for index in range(n_grid, 0, -1):
        k1 = _riccati_rhs(P, q, A, beta)
        k2 = _riccati_rhs(P + 0.5 * dt * k1[0], q + 0.5 * dt * k1[1], A, beta)
        k3 = _riccati_rhs(P + 0.5 * dt * k2[0], q + 0.5 * dt * k2[1], A, beta)
        k4 = _riccati_rhs(P + dt * k3[0], q + dt * k3[1], A, beta)
        P = P + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        q = q + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        P = 0.5 * (P + P.T)

        if not np.all(np.isfinite(P)) or np.linalg.norm(P) > cap:
            raise NumericalError(f'the Riccati solution blew up at t={times[index - 1]:.4f}',
                                 location=float(times[index - 1]))
        Ps.append(P)
        qs.append(q)

    return RiccatiSolution(times, np.stack(Ps[::-1]), np.stack(qs[::-1]))


def lq_value_gradient(solution: RiccatiSolution, x, t) -> Tensor:
    """
    ``P(t) x + q(t)``, the gradient of the optimal value function.

    :raises ValueError: if t is outside of [0, 1]
    """
    return solution.value_gradient(x, t)


class LqFeedbackField(VelocityField):
    """The optimal residual field ``-beta (P(t) x + q(t))`` of a linear quadratic problem."""

    def __init__(self, solution: RiccatiSolution, beta: float):
        super(LqFeedbackField, self).__init__(solution.q.shape[1])
        self.solution = solution
        self.beta = beta

    def __call__(self, x, t):
        return -self.beta * self.solution.value_gradient(numcore.value_of(x), t)


class LqRollout:
    """
    :ivar trajectory: the states under the optimal feedback law
    :ivar controls: the residual velocities applied in every step, shape (n_steps, ..., d)
    :ivar mean_reward: mean terminal reward
    :ivar objective: mean of ``sum_i lam/2 ||u_i||^2 dt - r(x_N)``
    """

    def __init__(self, trajectory: Trajectory, controls: Tensor, mean_reward: float, objective: float):
        self.trajectory = trajectory
        self.controls = controls
        self.mean_reward = mean_reward
        self.objective = objective

    def __str__(self):
        return 'LqRollout(mean_reward={:.5f}, objective={:.5f})'.format(self.mean_reward, self.objective)


def lq_rollout(problem: LQProblem, solution: RiccatiSolution, x0, n_steps: int) -> LqRollout:
    """Simulates the optimal feedback law with Euler steps from the given initial points."""
    feedback = LqFeedbackField(solution, problem.beta)
    base = problem.base_field()

    def field(x, t):
        return base(x, t) + feedback(x, t)

    trajectory = integrate(field, x0, SamplerConfig(n_steps=n_steps))
    controls = np.stack([feedback(x, t) for x, t in zip(trajectory.states[:-1], trajectory.times[:-1])])
    rewards = problem.reward.value(trajectory.terminal)
    running = 0.5 * problem.lam * np.sum(np.square(controls), axis=(0, -1)) / n_steps
    return LqRollout(trajectory, controls, float(np.mean(rewards)), float(np.mean(running - rewards)))


class BruteForceResult:

    def __init__(self, controls: Tensor, states: Tensor, objective: float, history: List[float]):
        self.controls = controls
        self.states = states
        self.objective = objective
        self.history = history

    def __str__(self):
        return 'BruteForceResult(objective={:.6f}, iterations={})'.format(self.objective, len(self.history) - 1)


def brute_force_control(problem: LQProblem,
                        x0,
                        n_steps: int,
                        iters: int,
                        max_backtracks: int = 50,
                        tolerance: float = 1e-12) -> BruteForceResult:
    """
    Minimizes the discretized control objective

        J(u) = sum_i lam/2 ||u_i||^2 dt - r(x_N),    x_{i+1} = x_i + dt (A x_i + u_i)

    over free open-loop controls with gradient descent and a backtracking (Armijo) line search. The
    gradients come from the tape. Every accepted iteration decreases the objective.

    :raises ConfigError: if iters is below 1
    :raises NumericalError: if the line search does not find a decrease within ``max_backtracks`` halvings
    """
    if iters < 1:
        raise ConfigError('the brute force optimizer needs at least one iteration', key='iters')

    x0 = np.asarray(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    A, H, h, lam = problem.A, problem.H, problem.h, problem.lam

    def evaluate(controls: Tensor, with_gradient: bool):
        tape = Tape()
        nodes = [tape.parameter(f'u{i}', controls[i]) for i in range(n_steps)]
        x = x0
        states = [x0]
        cost = None
        for i in range(n_steps):
            x = numcore.add(x, numcore.scale(numcore.add(numcore.matmul(x, A.T), nodes[i]), dt))
            states.append(numcore.value_of(x))
            step_cost = numcore.scale(numcore.sum(numcore.square(nodes[i])), 0.5 * lam * dt)
            cost = step_cost if cost is None else numcore.add(cost, step_cost)

        terminal = numcore.sub(numcore.scale(numcore.sum(numcore.mul(x, numcore.matmul(x, H))), 0.5),
                               numcore.sum(numcore.mul(x, h)))
        objective = numcore.add(cost, terminal)
        if not with_gradient:
            return float(objective.value), np.stack(states), None

        gradients = backward(tape, objective)
        return float(objective.value), np.stack(states), np.stack([gradients[f'u{i}'] for i in range(n_steps)])

    controls = np.zeros((n_steps, problem.dim))
    objective, states, gradient = evaluate(controls, True)
    history = [objective]
    step = 1.0 / dt

    for iteration in range(iters):
        sqnorm = float(np.sum(np.square(gradient)))
        if sqnorm < tolerance * dt:
            break

        for _ in range(max_backtracks):
            candidate = controls - step * gradient
            candidate_objective, _, _ = evaluate(candidate, False)
            if candidate_objective <= objective - 1e-4 * step * sqnorm:
                break
            step *= 0.5
        else:
            raise NumericalError(f'line search failed after {max_backtracks} attempts', location=iteration)

        controls = candidate
        objective, states, gradient = evaluate(controls, True)
        history.append(objective)
        step *= 2.0

    logger.debug('brute force control finished after %d iterations, objective %.8f', len(history) - 1, objective)
    return BruteForceResult(controls, states, objective, history)


def feedback_discrepancy(problem: LQProblem, solution: RiccatiSolution, result: BruteForceResult) -> float:
    """
    RMS difference between the open-loop optimal controls and the Riccati feedback law along the optimized
    trajectory.

    The control of Euler step i only acts on the state through x_{i+1}; the first order optimality condition
    of the discretized objective is ``u_i = -beta a_{i+1}``. The feedback law is therefore evaluated at
    ``(x_{i+1}, t_{i+1})``. For a vanishing drift matrix both conventions coincide exactly.
    """
    n_steps = len(result.controls)
    times = np.linspace(0.0, 1.0, n_steps + 1)
    feedback = np.stack([
        -problem.beta * solution.value_gradient(result.states[i + 1], times[i + 1]) for i in range(n_steps)
    ])
    return float(np.sqrt(np.mean(np.sum(np.square(result.controls - feedback), axis=-1))))


# DISTRIBUTION METRICS
# ####################


def w2_distance(samples_a, samples_b, rng: Optional[Rng] = None) -> float:
    """
    The squared Wasserstein-2 distance between two equally sized sample sets. It is exact for one dimensional
    samples (sorting) and for up to 256 samples (minimum cost assignment), beyond that the sliced distance
    with 64 random projections is returned, see ``w2_is_exact``.

    :raises ShapeError: if the sample counts or dimensions differ
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise ShapeError(f'sample sets of shape {a.shape} and {b.shape} can not be compared')

    if a.shape[1] == 1:
        return float(np.mean(np.square(np.sort(a[:, 0]) - np.sort(b[:, 0]))))

    if len(a) <= EXACT_ASSIGNMENT_LIMIT:
        costs = cdist(a, b, metric='sqeuclidean')
        rows, columns = linear_sum_assignment(costs)
        return float(np.mean(costs[rows, columns]))

    rng = rng or Rng(0)
    directions = rng.normal(size=(SLICED_PROJECTIONS, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    projected_a = np.sort(a @ directions.T, axis=0)
    projected_b = np.sort(b @ directions.T, axis=0)
    return float(np.mean(np.square(projected_a - projected_b)))


def w2_is_exact(samples) -> bool:
    samples = np.asarray(samples)
    return samples.ndim == 1 or samples.shape[1] == 1 or len(samples) <= EXACT_ASSIGNMENT_LIMIT


def diversity(samples) -> float:
    """
    The trace of the unbiased sample covariance.

    :raises ShapeError: for less than two samples
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if len(samples) < 2:
        raise ShapeError('the diversity needs at least two samples')
    return float(np.sum(np.var(samples, axis=0, ddof=1)))


class KlReport:
    """
    The Monte Carlo KL estimate between the terminal marginals of two flows and the terms of the path
    integral identity. ``rhs`` is the right hand side of the identity, ``term_a``, ``term_b`` and ``term_c``
    are the three terms of the bound ``KL <= A + B - C``.
    """

    def __init__(self, kl: float, stderr: float, rhs: float, term_a: float, term_b: float, term_c: float):
        self.kl = kl
        self.stderr = stderr
        self.rhs = rhs
        self.term_a = term_a
        self.term_b = term_b
        self.term_c = term_c

    def to_dict(self) -> Dict[str, float]:
        return {
            'kl':       self.kl,
            'stderr':   self.stderr,
            'rhs':      self.rhs,
            'term_a':   self.term_a,
            'term_b':   self.term_b,
            'term_c':   self.term_c,
        }

    def __str__(self):
        return 'KlReport(kl={:.5f}, stderr={:.5f}, rhs={:.5f})'.format(self.kl, self.stderr, self.rhs)


def score_fd(v: Callable, x: Tensor, t: float, n_steps: int, eps: float = 1e-3) -> Tensor:
    """
    The score ``grad log q_t(x)`` of the marginal of a flow, as central differences of the log density which
    is recomputed by a backward integration for every evaluation point.
    """
    x = np.asarray(x, dtype=np.float64)
    if t <= 0.0:
        return -x

    dim = x.shape[-1]
    score = np.zeros_like(x)
    for i in range(dim):
        offset = np.zeros(dim)
        offset[i] = eps
        _, forward = log_density(v, x + offset, n_steps, t_end=t)
        _, backward_ = log_density(v, x - offset, n_steps, t_end=t)
        score[..., i] = (forward - backward_) / (2.0 * eps)
    return score


def kl_between_flows(v_p: Callable,
                     v_q: Callable,
                     n_samples: int,
                     n_steps: int,
                     rng: Rng,
                     n_time: int = 16) -> KlReport:
    """
    Estimates ``KL(p_1 || q_1)`` between the terminal marginals of two flows which start from the same
    standard normal density, together with the path integral identity

        KL = -int E_p[r~ . grad log q_t] dt - int E_p[div r~] dt,    r~ = v_p - v_q

    evaluated along p-trajectories on ``n_time`` time intervals.

    :raises NumericalError: if a density becomes non-finite
    """
    x0 = rng.normal(size=(n_samples, _infer_dim(v_p, v_q)))
    steps_per_interval = max(1, n_steps // n_time)
    times, states, _ = solve(v_p, x0, 0.0, 1.0, steps_per_interval * n_time, 'rk4')
    x1 = states[-1]

    _, log_p = log_density(v_p, x1, n_steps)
    _, log_q = log_density(v_q, x1, n_steps)
    differences = log_p - log_q
    if not np.all(np.isfinite(differences)):
        raise NumericalError('non-finite log density in the KL estimate')

    def residual(x, t):
        return numcore.value_of(v_p(x, t)) - numcore.value_of(v_q(x, t))

    grid_times = times[::steps_per_interval]
    cross, divergence, kinetic, score_energy = [], [], [], []
    for t, x in zip(grid_times, states[::steps_per_interval]):
        r = residual(x, t)
        score = score_fd(v_q, x, t, max(1, int(round(n_steps * t))))
        cross.append(np.mean(np.sum(r * score, axis=-1)))
        divergence.append(np.mean(divergence_fd(residual, x, t)))
        kinetic.append(0.5 * np.mean(np.sum(np.square(r), axis=-1)))
        score_energy.append(0.5 * np.mean(np.sum(np.square(score), axis=-1)))

    term_c = float(trapezoid(divergence, grid_times))
    return KlReport(
        kl=float(np.mean(differences)),
        stderr=float(np.std(differences, ddof=1) / np.sqrt(n_samples)),
        rhs=float(-trapezoid(cross, grid_times) - term_c),
        term_a=float(trapezoid(kinetic, grid_times)),
        term_b=float(trapezoid(score_energy, grid_times)),
        term_c=term_c,
    )


def _infer_dim(*fields) -> int:
    for field in fields:
        if getattr(field, 'dim', None) is not None:
            return field.dim
    raise ShapeError('the dimension can not be inferred from the given fields')


def estimate_lipschitz(v: Callable, dim: int, rng: Rng, n_pairs: int = 1024, safety: float = 2.0) -> float:
    """
    The Lipschitz constant of a field in x. For linear fields this is the spectral norm of the matrix,
    otherwise the largest ratio ``||v(x) - v(y)|| / ||x - y||`` over random pairs of points at random times,
    multiplied by the safety factor.
    """
    if isinstance(v, LinearField):
        return v.lipschitz

    x = 2.0 * rng.normal(size=(n_pairs, dim))
    y = x + 0.5 * rng.normal(size=(n_pairs, dim))
    t = rng.uniform(size=n_pairs)
    difference = numcore.value_of(v(x, t)) - numcore.value_of(v(y, t))
    ratios = np.linalg.norm(difference, axis=-1) / np.linalg.norm(x - y, axis=-1)
    return safety * float(np.max(ratios))


class BoundReport:

    def __init__(self, lhs: float, rhs: float, lipschitz: float):
        self.lhs = lhs
        self.rhs = rhs
        self.lipschitz = lipschitz

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + 1e-6)

    def to_dict(self) -> Dict[str, Any]:
        return {'lhs': self.lhs, 'rhs': self.rhs, 'lipschitz': self.lipschitz, 'holds': self.holds}

    def __str__(self):
        return 'BoundReport(lhs={:.6g}, rhs={:.6g}, holds={})'.format(self.lhs, self.rhs, self.holds)


def w2_bound_check(v_theta: Callable,
                   v_base: Callable,
                   n_samples: int,
                   n_steps: int,
                   rng: Rng,
                   lipschitz: Optional[float] = None) -> BoundReport:
    """
    Compares the coupled distance ``E ||x_1 - y_1||^2`` of the two flows started from the same noise with the
    bound ``exp(2L + 1) int E ||v_theta - v_base||^2 dt``. The integral is the left Riemann sum along the
    v_theta trajectories, matching the Euler steps.
    """
    dim = _infer_dim(v_theta, v_base)
    if lipschitz is None:
        lipschitz = estimate_lipschitz(v_base, dim, rng.child('lipschitz'))

    x0 = rng.child('noise').normal(size=(n_samples, dim))
    config = SamplerConfig(n_steps=n_steps)
    finetuned = integrate(v_theta, x0, config)
    base = integrate(v_base, x0, config)

    lhs = float(np.mean(np.sum(np.square(finetuned.terminal - base.terminal), axis=-1)))
    energies = [
        np.mean(np.sum(np.square(numcore.value_of(v_theta(x, t)) - numcore.value_of(v_base(x, t))), axis=-1))
        for x, t in zip(finetuned.states[:-1], finetuned.times[:-1])
    ]
    rhs = float(np.exp(2.0 * lipschitz + 1.0) * np.sum(energies) / n_steps)
    return BoundReport(lhs, rhs, lipschitz)


# REPORTS
# #######


class MetricReport:
    """
    The evaluation of a finetuned model against its base. Serialized as JSON with the field names of
    ``to_dict``.
    """

    def __init__(self,
                 mean_reward: float,
                 diversity: float,
                 w2_to_base: float,
                 w2_exact: bool,
                 base_mean_reward: Optional[float] = None,
                 base_diversity: Optional[float] = None,
                 kl: Optional[KlReport] = None,
                 w2_bound: Optional[BoundReport] = None):
        self.mean_reward = mean_reward
        self.diversity = diversity
        self.w2_to_base = w2_to_base
        self.w2_exact = w2_exact
        self.base_mean_reward = base_mean_reward
        self.base_diversity = base_diversity
        self.kl = kl
        self.w2_bound = w2_bound

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mean_reward':          self.mean_reward,
            'diversity':            self.diversity,
            'w2_to_base':           self.w2_to_base,
            'w2_approximate':       not self.w2_exact,
            'base_mean_reward':     self.base_mean_reward,
            'base_diversity':       self.base_diversity,
            'kl_to_base':           None if self.kl is None else self.kl.kl,
            'kl_identity':          None if self.kl is None else self.kl.to_dict(),
            'w2_bound':             None if self.w2_bound is None else self.w2_bound.to_dict(),
        }

    def save(self, path: str):
        with open(path, mode='w') as file:
            json.dump(self.to_dict(), file, indent=4)

    def __str__(self):
        return 'MetricReport(mean_reward={:.5f}, diversity={:.5f}, w2_to_base={:.5f})'.format(
            self.mean_reward,
            self.diversity,
            self.w2_to_base
        )


def evaluate_against_base(v_theta: Callable,
                          v_base: Callable,
                          reward,
                          n_samples: int,
                          n_steps: int,
                          rng: Rng,
                          kl_samples: Optional[int] = None,
                          kl_steps: int = 32,
                          bound_samples: Optional[int] = None) -> Tuple[MetricReport, Tensor, Tensor]:
    """
    Samples both models from the same noise and compares the endpoints. The KL estimate and the coupled
    distance bound are only computed if the corresponding sample counts are given.

    :return: the report, the finetuned endpoints and the base endpoints
    """
    dim = _infer_dim(v_theta, v_base)
    x0 = rng.child('noise').normal(size=(n_samples, dim))
    config = SamplerConfig(n_steps=n_steps)
    finetuned = integrate(v_theta, x0, config).terminal
    base = integrate(v_base, x0, config).terminal

    kl = None
    if kl_samples:
        kl = kl_between_flows(v_theta, v_base, kl_samples, kl_steps, rng.child('kl'))

    bound = None
    if bound_samples:
        bound = w2_bound_check(v_theta, v_base, bound_samples, n_steps, rng.child('bound'))

    report = MetricReport(
        mean_reward=float(np.mean(reward.value(finetuned))),
        diversity=diversity(finetuned),
        w2_to_base=w2_distance(finetuned, base, rng.child('w2')),
        w2_exact=w2_is_exact(finetuned),
        base_mean_reward=float(np.mean(reward.value(base))),
        base_diversity=diversity(base),
        kl=kl,
        w2_bound=bound,
    )
    logger.debug('evaluation: %s', report)
    return report, finetuned, base
