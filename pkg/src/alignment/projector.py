"""
Spatial Forcing Lab - Alignment Projector

Batch norm followed by a two-layer gelu MLP mapping backbone width to
teacher width. Trained alongside the backbone, never used at inference.
"""
from dataclasses import dataclass

import numpy as np

from src.config import ModelConfig
from src.engine import BatchNormMode, BatchNormState, OpKind, Tensor, apply, batch_norm, linear
from src.model.checkpoint import EXTRA_PREFIX


@dataclass
class Projector:
    bn: BatchNormState
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "Projector":
        rng = np.random.default_rng(seed)
        d, hidden, out = config.d_model, config.projector_hidden, config.d_teacher
        return cls(
            bn=BatchNormState.create(d),
            w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out)), requires_grad=True),
            b2=Tensor(np.zeros(out), requires_grad=True),
        )

    @property
    def output_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.bn.gamma, self.bn.beta, self.w1, self.b1, self.w2, self.b2]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Arrays keyed under the checkpoint's alignment prefix."""
        return {
            f"{EXTRA_PREFIX}bn.gamma": self.bn.gamma.data.copy(),
            f"{EXTRA_PREFIX}bn.beta": self.bn.beta.data.copy(),
            f"{EXTRA_PREFIX}bn.running_mean": self.bn.running_mean.copy(),
            f"{EXTRA_PREFIX}bn.running_var": self.bn.running_var.copy(),
            f"{EXTRA_PREFIX}mlp.w1": self.w1.data.copy(),
            f"{EXTRA_PREFIX}mlp.b1": self.b1.data.copy(),
            f"{EXTRA_PREFIX}mlp.w2": self.w2.data.copy(),
            f"{EXTRA_PREFIX}mlp.b2": self.b2.data.copy(),
        }

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "Projector":
        def get(name: str) -> np.ndarray:
            return np.asarray(state[f"{EXTRA_PREFIX}{name}"], dtype=np.float64).copy()

        bn = BatchNormState(
            gamma=Tensor(get("bn.gamma"), requires_grad=True),
            beta=Tensor(get("bn.beta"), requires_grad=True),
            running_mean=get("bn.running_mean"),
            running_var=get("bn.running_var"),
            mode=BatchNormMode.FROZEN,
        )
        return cls(
            bn=bn,
            w1=Tensor(get("mlp.w1"), requires_grad=True),
            b1=Tensor(get("mlp.b1"), requires_grad=True),
            w2=Tensor(get("mlp.w2"), requires_grad=True),
            b2=Tensor(get("mlp.b2"), requires_grad=True),
        )


def project(
    visual_taps: Tensor,
    projector: Projector,
    mode: BatchNormMode = BatchNormMode.TRAINING,
) -> Tensor:
    """
    Map visual-token activations [n, d_model] to teacher space [n, d_teacher].

    Batch statistics pool over every row passed in, i.e. over all tokens of
    all samples in the minibatch.

    Raises:
        DegenerateBatchError: A single row in training mode
    """
    projector.bn.mode = BatchNormMode(mode)
    normed = batch_norm(visual_taps, projector.bn)
    hidden = apply(OpKind.GELU, [linear(normed, projector.w1, projector.b1)])
    return linear(hidden, projector.w2, projector.b2)
