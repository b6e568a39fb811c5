"""
AdamW with decoupled weight decay and global-norm gradient clipping for parameter sets.

Parameter sets are plain dicts mapping names to float64 arrays. Updates never modify arrays in place: every
step returns a new parameter set and a new optimizer state.
"""
import math
import logging
from typing import Dict, Tuple, Optional

import numpy as np

from pyflowalign.errors import NumericalError, ShapeError
from pyflowalign.numcore import ParamSet, Tensor

logger = logging.getLogger(__name__)


class OptState:
    """
    The state of an AdamW optimizer for one parameter set: first and second moment per parameter, the step
    counter and the hyperparameters.

    .. code:: python

        state = OptState.create(params, lr=5e-4, weight_decay=1e-2)
        params, state = adamw_step(params, grads, state)
    """

    def __init__(self,
                 lr: float,
                 first_moments: Dict[str, Tensor],
                 second_moments: Dict[str, Tensor],
                 step: int = 0,
                 beta1: float = 0.9,
                 beta2: float = 0.999,
                 weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.lr = lr
        self.first_moments = first_moments
        self.second_moments = second_moments
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps

    @classmethod
    def create(cls,
               params: ParamSet,
               lr: float,
               weight_decay: float = 0.0,
               beta1: float = 0.9,
               beta2: float = 0.999,
               eps: float = 1e-8) -> 'OptState':
        return cls(
            lr=lr,
            first_moments={name: np.zeros_like(value) for name, value in params.items()},
            second_moments={name: np.zeros_like(value) for name, value in params.items()},
            beta1=beta1,
            beta2=beta2,
            weight_decay=weight_decay,
            eps=eps
        )

    def __str__(self):
        return 'OptState(lr={}, step={}, weight_decay={})'.format(self.lr, self.step, self.weight_decay)


def adamw_step(params: ParamSet, grads: Dict[str, Tensor], state: OptState) -> Tuple[ParamSet, OptState]:
    """
    Performs one AdamW update:

        p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)

    with the bias corrected moments m_hat and v_hat.

    :raises ShapeError: if the gradient names or shapes do not match the parameters
    :raises NumericalError: if a gradient contains non-finite values

    :return: the tuple of the updated parameter set and the updated optimizer state
    """
    if set(grads.keys()) != set(params.keys()):
        raise ShapeError('gradient names {} do not match parameter names {}'.format(
            sorted(grads.keys()), sorted(params.keys())
        ))

    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params, first_moments, second_moments = {}, {}, {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise ShapeError(f'gradient of "{name}" has shape {grad.shape}, expected {value.shape}')
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f'non-finite gradient for parameter "{name}"', location=name)

        m = state.beta1 * state.first_moments[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moments[name] + (1.0 - state.beta2) * np.square(grad)
        m_hat = m / correction1
        v_hat = v / correction2

        decayed = value - state.lr * state.weight_decay * value
        new_params[name] = decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        first_moments[name] = m
        second_moments[name] = v

    new_state = OptState(
        lr=state.lr,
        first_moments=first_moments,
        second_moments=second_moments,
        step=step,
        beta1=state.beta1,
        beta2=state.beta2,
        weight_decay=state.weight_decay,
        eps=state.eps,
    )
    return new_params, new_state


def global_norm(grads: Dict[str, Tensor]) -> float:
    return math.sqrt(float(np.sum([np.sum(np.square(g)) for g in grads.values()])))


def clip_global_norm(grads: Dict[str, Tensor], max_norm: float) -> Dict[str, Tensor]:
    """
    Rescales all gradients by ``max_norm / N`` if their global L2 norm N exceeds ``max_norm``. Otherwise,
    and for all-zero gradients, they are returned unchanged.
    """
    assert max_norm > 0, 'max_norm has to be positive'

    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)

    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


def optimizer_update(params: ParamSet,
                     grads: Dict[str, Tensor],
                     state: OptState,
                     max_norm: Optional[float] = None) -> Tuple[ParamSet, OptState, float]:
    """
    Clips the gradients (if a maximum norm is given) and performs one AdamW step.

    :return: tuple of the new parameters, the new state and the gradient norm before clipping
    """
    norm = global_norm(grads)
    if max_norm is not None:
        grads = clip_global_norm(grads, max_norm)
    params, state = adamw_step(params, grads, state)
    return params, state, norm
