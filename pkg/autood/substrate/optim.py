"""First-order optimizers with explicit, inspectable state."""
from dataclasses import dataclass, field
from typing import Dict, Literal, Mapping

import numpy as np

from autood.errors import ContractError, NumericError, ShapeError
from autood.substrate.tensor import Tensor

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    kind: Literal["sgd-momentum", "adam"]
    learning_rate: float
    momentum: float = 0.9
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ContractError(f"unknown optimizer kind '{self.kind}'")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")


def step(state: OptimizerState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
         learning_rate: float = None) -> OptimizerState:
    """Apply one update in place to ``params``; accumulators are keyed by parameter name."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, parameters left unchanged", where=name)

    lr = state.learning_rate if learning_rate is None else learning_rate
    for name, g in grads.items():
        param = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
        if state.kind == "sgd-momentum":
            m = state.momentum * m + g
            param.data -= lr * m
        else:
            v = state.second_moment.get(name)
            if v is None:
                v = np.zeros_like(param.data)
            t = state.steps.get(name, 0) + 1
            m = state.momentum * m + (1.0 - state.momentum) * g
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - state.momentum ** t)
            v_hat = v / (1.0 - ADAM_BETA2 ** t)
            param.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            state.second_moment[name] = v
            state.steps[name] = t
        state.first_moment[name] = m
    return state


def step_schedule(initial: float, progress: float) -> float:
    """Learning rate dropped by 10× at 50 % and again at 75 % of training."""
    if progress >= 0.75:
        return initial * 0.01
    if progress >= 0.5:
        return initial * 0.1
    return initial
