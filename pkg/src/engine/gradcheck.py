"""
Spatial Forcing Lab - Gradient Check

Central finite-difference oracle for the tensor engine.
"""
from typing import Callable, Sequence

import numpy as np

from src.engine.tensor import Tensor, backward, no_grad
from src.exceptions import NotScalarError


def _scalar(value: Tensor) -> float:
    if not isinstance(value, Tensor) or value.size != 1:
        shape = value.shape if isinstance(value, Tensor) else type(value).__name__
        raise NotScalarError(f"grad_check objective must return a scalar tensor, got {shape}")
    return float(value.data.reshape(()))


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        f: Deterministic closure mapping ``params`` to a scalar tensor
        params: Tensors to differentiate (``requires_grad`` is forced on)
        eps: Finite-difference step

    Returns:
        max |analytic - central| / max(|analytic|, |central|, 1e-8)
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f(params)
    _scalar(loss)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            for flat_index in range(p.size):
                idx = np.unravel_index(flat_index, p.shape)
                original = p.data[idx]
                p.data[idx] = original + eps
                plus = _scalar(f(params))
                p.data[idx] = original - eps
                minus = _scalar(f(params))
                p.data[idx] = original

                central = (plus - minus) / (2.0 * eps)
                a = float(grad[idx])
                error = abs(a - central) / max(abs(a), abs(central), 1e-8)
                worst = max(worst, error)

    for p in params:
        p.grad = None
    return worst
