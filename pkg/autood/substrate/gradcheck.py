"""Finite-difference validation of analytic gradients."""
from typing import Callable, Sequence, Union

import numpy as np

from autood.errors import ContractError
from autood.substrate.tensor import Tensor, grad, reduce_sum

FLOOR = 1e-8


def grad_check(op_instance: Callable[..., Tensor], point: Union[Tensor, Sequence[Tensor]],
               eps: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes to the checked gradient.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    points = [point] if isinstance(point, Tensor) else list(point)
    leaves = [Tensor(p.data.copy(), requires_grad=True) for p in points]

    sample = op_instance(*leaves)
    projection = np.random.default_rng(seed).standard_normal(sample.shape)

    def scalar(*args) -> Tensor:
        return reduce_sum(op_instance(*args) * projection)

    analytic = grad(scalar(*leaves), leaves)

    worst = 0.0
    for leaf, leaf_grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + eps
            upper = scalar(*[Tensor(l.data) for l in leaves]).item()
            flat[index] = original - eps
            lower = scalar(*[Tensor(l.data) for l in leaves]).item()
            flat[index] = original
            numeric = (upper - lower) / (2.0 * eps)
            exact = leaf_grad.reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), FLOOR)
            worst = max(worst, error)
    return worst
