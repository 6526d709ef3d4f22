"""
Spatial Forcing Lab - Tensor Engine Module
"""
from src.engine.functional import (
    BatchNormMode,
    BatchNormState,
    batch_norm,
    causal_self_attention,
    cosine_sim,
    linear,
    mse,
)
from src.engine.gradcheck import grad_check
from src.engine.optim import Adam, AdamHyper, AdamState, adam_step, cosine_lr
from src.engine.tensor import OpKind, Tensor, apply, backward, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamHyper",
    "AdamState",
    "BatchNormMode",
    "BatchNormState",
    "OpKind",
    "Tensor",
    "adam_step",
    "apply",
    "backward",
    "batch_norm",
    "causal_self_attention",
    "cosine_lr",
    "cosine_sim",
    "grad_check",
    "is_grad_enabled",
    "linear",
    "mse",
    "no_grad",
]
