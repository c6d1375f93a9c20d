# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Adaptive-moment (Adam) parameter updates.
"""
from dataclasses import dataclass, field

import numpy as np

from riskformer.util import ShapeError, check_arg


@dataclass
class OptimizerState:
    """Per-parameter moment estimates and the step counter.

    Attributes:
        learning_rate (float):
        beta1 (float): decay rate of the first moment
        beta2 (float): decay rate of the second moment
        epsilon (float):
        step (int): number of updates applied so far
        m (dict): parameter name -> first moment array
        v (dict): parameter name -> second moment array
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update.

    Neither `params` nor `state` are modified.

    Args:
        params (dict): name -> ndarray
        grads (dict): name -> ndarray, same keys and shapes as `params`
        state (OptimizerState):
    Returns:
        (new_params, new_state)
    Raises:
        ShapeError: if a gradient does not match its parameter
    """
    check_arg(params, dict)
    check_arg(grads, dict)
    check_arg(state, OptimizerState, state.step >= 0)

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t

    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"adam_step: missing gradient for '{name}'")
        if g.shape != value.shape:
            raise ShapeError(
                f"adam_step: gradient for '{name}' has shape {g.shape}, expected {value.shape}"
            )
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        elif m.shape != value.shape:
            raise ShapeError(
                f"adam_step: moments for '{name}' have shape {m.shape}, expected {value.shape}"
            )
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = value - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.epsilon
        )
        new_m[name] = m
        new_v[name] = v

    new_state = OptimizerState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step=t,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state
