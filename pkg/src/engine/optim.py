"""
Spatial Forcing Lab - Optimizer

Bias-corrected Adam and learning-rate schedules.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.engine.tensor import Tensor
from src.exceptions import ShapeError


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    """Per-parameter moment buffers and the shared step counter."""
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def create(cls, params: Sequence[Tensor], hyper: Optional[AdamHyper] = None) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            hyper=hyper or AdamHyper(),
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
) -> None:
    """
    Apply one Adam update in place.

    Missing gradients count as zero.
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError(
            "adam_step",
            (len(params),),
            (len(grads),),
            detail="params, grads and state disagree in count",
        )
    for p, g, m in zip(params, grads, state.first_moment):
        if (g is not None and g.shape != p.shape) or m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape if g is not None else m.shape)

    state.step_count += 1
    h = state.hyper
    t = state.step_count
    correction1 = 1.0 - h.beta1**t
    correction2 = 1.0 - h.beta2**t

    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * g * g
        p.data -= h.lr * (m / correction1) / (np.sqrt(v / correction2) + h.epsilon)


class Adam:
    """Adam over a fixed parameter list, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999)):
        self.params = list(params)
        self.state = AdamState.create(self.params, AdamHyper(lr=lr, beta1=betas[0], beta2=betas[1]))

    @property
    def lr(self) -> float:
        return self.state.hyper.lr

    def set_lr(self, lr: float) -> None:
        self.state.hyper.lr = lr

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
