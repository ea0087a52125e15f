"""Minimal differentiable computation layer (float64, reverse mode)."""
from autood.substrate.graph import Graph, backward, forward
from autood.substrate.gradcheck import grad_check
from autood.substrate.optim import OptimizerState, step, step_schedule
from autood.substrate.tensor import Tensor, grad

__all__ = [
    "Graph",
    "OptimizerState",
    "Tensor",
    "backward",
    "forward",
    "grad",
    "grad_check",
    "step",
    "step_schedule",
]
