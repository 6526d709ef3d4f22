"""
Spatial Forcing Lab - Alignment Losses
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.alignment.teacher import TeacherFeatures
from src.engine import OpKind, Tensor, apply, cosine_sim
from src.exceptions import NonFiniteError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and non-negative, got {self.alpha}")


def align_loss(projected: Tensor, targets: TeacherFeatures | np.ndarray) -> Tensor:
    """
    Negative mean row-wise cosine similarity.

    Targets enter as constants, so no gradient is ever computed for them.
    """
    target_array = targets.targets if isinstance(targets, TeacherFeatures) else np.asarray(targets)
    if projected.ndim != 2 or projected.shape != target_array.shape:
        raise ShapeError("align_loss", projected.shape, target_array.shape)
    similarity = cosine_sim(projected, Tensor(target_array))
    return apply(OpKind.SCALE, [apply(OpKind.MEAN, [similarity])], {"factor": -1.0})


def total_loss(
    l_action: Tensor,
    l_align: Optional[Tensor],
    weights: LossWeights,
    iteration: Optional[int] = None,
) -> Tensor:
    """
    l_action + alpha * l_align.

    With ``l_align`` absent or alpha zero the action loss is returned as is.

    Raises:
        NonFiniteError: Either loss is NaN or infinite
    """
    for name, value in (("l_action", l_action), ("l_align", l_align)):
        if value is not None and not np.all(np.isfinite(value.data)):
            where = f" at iteration {iteration}" if iteration is not None else ""
            raise NonFiniteError(f"non-finite {name}{where}", iteration=iteration)
    if l_align is None or weights.alpha == 0.0:
        return l_action
    return apply(OpKind.ADD, [l_action, apply(OpKind.SCALE, [l_align], {"factor": weights.alpha})])
