"""
Spatial Forcing Lab - Composite Ops

Batch norm, cosine similarity, attention and small layer helpers, all built
from the registered op kinds.
"""
import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.engine.tensor import EPS, OpKind, Tensor, apply
from src.exceptions import DegenerateBatchError, ShapeError


MASK_VALUE = -1e30


class BatchNormMode(str, enum.Enum):
    """Batch-norm statistics source."""
    TRAINING = "training"
    FROZEN = "frozen"


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of a batch-norm layer."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    mode: BatchNormMode = BatchNormMode.TRAINING

    @classmethod
    def create(cls, features: int, momentum: float = 0.1) -> "BatchNormState":
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        return cls(
            gamma=Tensor(np.ones(features), requires_grad=True),
            beta=Tensor(np.zeros(features), requires_grad=True),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
            momentum=momentum,
        )

    @property
    def features(self) -> int:
        return self.gamma.shape[0]


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias)."""
    out = apply(OpKind.MATMUL, [x, weight])
    if bias is not None:
        out = apply(OpKind.ADD, [out, bias])
    return out


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """
    Normalise each feature column of ``x`` [batch, features].

    Training mode uses the batch statistics (biased variance) and updates the
    running statistics (unbiased variance); frozen mode uses the running ones.
    """
    if x.ndim != 2 or x.shape[1] != state.features:
        raise ShapeError("batch_norm", x.shape, state.gamma.shape)

    batch = x.shape[0]
    if state.mode is BatchNormMode.TRAINING:
        if batch < 2:
            raise DegenerateBatchError("batch_norm in training mode needs batch >= 2")
        # Column normalisation is layer_norm over the transposed batch.
        columns = apply(OpKind.TRANSPOSE, [x])
        normed = apply(
            OpKind.LAYER_NORM,
            [columns, Tensor(np.ones(batch)), Tensor(np.zeros(batch))],
        )
        xhat = apply(OpKind.TRANSPOSE, [normed])

        m = state.momentum
        mean = x.data.mean(axis=0)
        unbiased = x.data.var(axis=0) * batch / (batch - 1)
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * unbiased
    else:
        centred = apply(OpKind.SUB, [x, Tensor(state.running_mean)])
        xhat = apply(OpKind.MUL, [centred, Tensor(1.0 / np.sqrt(state.running_var + EPS))])

    return apply(OpKind.ADD, [apply(OpKind.MUL, [xhat, state.gamma]), state.beta])


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """
    Cosine similarity over the last axis.

    [d] inputs give a scalar; [n, d] inputs give one similarity per row.
    """
    if a.shape != b.shape:
        raise ShapeError("cosine_sim", a.shape, b.shape)
    if a.ndim < 1:
        raise ShapeError("cosine_sim", a.shape, b.shape, detail="needs d >= 1")
    products = apply(
        OpKind.MUL,
        [apply(OpKind.L2_NORMALIZE, [a]), apply(OpKind.L2_NORMALIZE, [b])],
    )
    return apply(OpKind.SUM, [products], {"axis": -1})


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, MASK_VALUE above."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def causal_self_attention(x: Tensor, weights: dict[str, Tensor], n_heads: int) -> Tensor:
    """
    Multi-head scaled dot-product attention with a causal mask.

    Args:
        x: [T, d] or [B, T, d] input
        weights: ``wq``, ``wk``, ``wv``, ``wo`` each [d, d]
        n_heads: Number of heads; must divide d

    Returns:
        Tensor with the shape of ``x``
    """
    d = x.shape[-1]
    if n_heads <= 0 or d % n_heads:
        raise ShapeError("causal_self_attention", x.shape, detail=f"d={d} not divisible by n_heads={n_heads}")
    squeeze = x.ndim == 2
    if squeeze:
        x = apply(OpKind.RESHAPE, [x], {"shape": (1,) + x.shape})
    if x.ndim != 3:
        raise ShapeError("causal_self_attention", x.shape, detail="expects [T, d] or [B, T, d]")

    batch, length, _ = x.shape
    head_dim = d // n_heads

    def split_heads(t: Tensor) -> Tensor:
        t = apply(OpKind.RESHAPE, [t], {"shape": (batch, length, n_heads, head_dim)})
        return apply(OpKind.TRANSPOSE, [t], {"axes": (0, 2, 1, 3)})

    q = split_heads(apply(OpKind.MATMUL, [x, weights["wq"]]))
    k = split_heads(apply(OpKind.MATMUL, [x, weights["wk"]]))
    v = split_heads(apply(OpKind.MATMUL, [x, weights["wv"]]))

    scores = apply(OpKind.MATMUL, [q, apply(OpKind.TRANSPOSE, [k])])
    scores = apply(OpKind.SCALE, [scores], {"factor": 1.0 / math.sqrt(head_dim)})
    scores = apply(OpKind.ADD, [scores, Tensor(causal_mask(length))])
    attention = apply(OpKind.SOFTMAX, [scores])

    context = apply(OpKind.MATMUL, [attention, v])
    context = apply(OpKind.TRANSPOSE, [context], {"axes": (0, 2, 1, 3)})
    context = apply(OpKind.RESHAPE, [context], {"shape": (batch, length, d)})
    out = apply(OpKind.MATMUL, [context, weights["wo"]])

    if squeeze:
        out = apply(OpKind.RESHAPE, [out], {"shape": (length, d)})
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error."""
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = apply(OpKind.SUB, [pred, target])
    return apply(OpKind.MEAN, [apply(OpKind.MUL, [diff, diff])])
