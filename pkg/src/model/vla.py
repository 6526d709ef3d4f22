"""
Spatial Forcing Lab - VLA Forward Pass

Patch embedding, token assembly in (vision, language, action-query) order,
the causal transformer with per-layer taps, and the action head.
"""
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.config import ModelConfig
from src.engine import OpKind, Tensor, apply, causal_self_attention, linear, no_grad
from src.exceptions import NonFiniteError, ShapeError
from src.model.params import VLAParams
from src.scene.models import Episode, RenderOutput


class Segment(str, enum.Enum):
    VISION = "V"
    LANGUAGE = "L"
    ACTION = "A"


@dataclass
class TokenSequence:
    """
    Assembled input sequence.

    ``embeddings`` is [B, T, d] internally; ``batched`` records whether the
    caller passed a batch. ``taps`` is filled by ``forward``: taps[0] is the
    input embedding and taps[l] the residual stream after block l.
    """
    embeddings: Tensor
    segments: list[Segment]
    batched: bool
    taps: list[Tensor] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.segments)

    def span(self, segment: Segment) -> tuple[int, int]:
        positions = [i for i, s in enumerate(self.segments) if s is segment]
        return positions[0], positions[-1] + 1


@dataclass
class ForwardOutput:
    """Action predictions [(B,) K, action_dim] and per-layer taps [(B,) T, d]."""
    actions_pred: Tensor
    taps: list[Tensor]


def _image_of(view: RenderOutput | np.ndarray) -> np.ndarray:
    return np.asarray(view.image if isinstance(view, RenderOutput) else view, dtype=np.float64)


def patchify(views: Sequence[RenderOutput | np.ndarray], config: ModelConfig) -> np.ndarray:
    """
    Cut views into flattened patches.

    Args:
        views: One image (or RenderOutput) per configured view
        config: Model configuration

    Returns:
        [N, patch_pixels] matrix, view-major then raster order, each patch
        flattened row-major over (row, col, channel)
    """
    expected = (config.image_height, config.image_width, config.image_channels)
    if len(views) != config.n_views:
        raise ShapeError("patchify", (len(views),), (config.n_views,), detail="view count")

    ps = config.patch_size
    rows = []
    for view in views:
        image = _image_of(view)
        if image.shape != expected:
            raise ShapeError("patchify", image.shape, expected)
        grid = image.reshape(config.grid_rows, ps, config.grid_cols, ps, config.image_channels)
        rows.append(grid.transpose(0, 2, 1, 3, 4).reshape(config.patches_per_view, config.patch_pixels))
    return np.concatenate(rows, axis=0)


def assemble(
    patches: np.ndarray,
    instruction_ids: Sequence[int] | np.ndarray,
    params: VLAParams,
) -> TokenSequence:
    """
    Build the input sequence [V x N, L x M, A x K] plus learned positions.

    Accepts a single sample (patches [N, P], ids [M]) or a batch
    (patches [B, N, P], ids [B, M]).
    """
    config = params.config
    patches = np.asarray(patches, dtype=np.float64)
    ids = np.asarray(instruction_ids)
    batched = patches.ndim == 3
    if not batched:
        patches = patches[None]
        ids = ids[None]

    batch = patches.shape[0]
    if patches.shape[1:] != (config.n_visual_tokens, config.patch_pixels):
        raise ShapeError("assemble", patches.shape[1:], (config.n_visual_tokens, config.patch_pixels))
    if ids.shape != (batch, config.n_lang_tokens):
        raise ShapeError("assemble", ids.shape, (batch, config.n_lang_tokens), detail="instruction ids")

    vision = linear(Tensor(patches), params["patch_proj.w"], params["patch_proj.b"])
    language = apply(OpKind.EMBEDDING, [params["lang_embed"]], {"ids": ids})
    queries = apply(
        OpKind.ADD,
        [Tensor(np.zeros((batch, config.n_action_queries, config.d_model))), params["action_queries"]],
    )
    tokens = apply(OpKind.CONCAT, [vision, language, queries], {"axis": 1})
    embeddings = apply(OpKind.ADD, [tokens, params["pos_embed"]])

    segments = (
        [Segment.VISION] * config.n_visual_tokens
        + [Segment.LANGUAGE] * config.n_lang_tokens
        + [Segment.ACTION] * config.n_action_queries
    )
    return TokenSequence(embeddings=embeddings, segments=segments, batched=batched)


def _layer_norm(x: Tensor, block: dict[str, Tensor], prefix: str) -> Tensor:
    return apply(OpKind.LAYER_NORM, [x, block[f"{prefix}.gamma"], block[f"{prefix}.beta"]])


def _check_finite(t: Tensor, layer: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite activation after layer {layer}", layer=layer)


def _unbatch(t: Tensor) -> Tensor:
    return apply(OpKind.RESHAPE, [t], {"shape": t.shape[1:]})


def forward(params: VLAParams, tokens: TokenSequence) -> ForwardOutput:
    """
    Run the causal pre-norm transformer and decode the action queries.

    Raises:
        NonFiniteError: If any block produces NaN or infinity (names the layer)
    """
    config = params.config
    x = tokens.embeddings
    _check_finite(x, 0)
    taps = [x]

    for i in range(config.n_layers):
        block = params.block(i)
        attention = causal_self_attention(
            _layer_norm(x, block, "ln1"),
            {w: block[f"attn.{w}"] for w in ("wq", "wk", "wv", "wo")},
            config.n_heads,
        )
        x = apply(OpKind.ADD, [x, attention])
        hidden = apply(OpKind.GELU, [linear(_layer_norm(x, block, "ln2"), block["mlp.w1"], block["mlp.b1"])])
        x = apply(OpKind.ADD, [x, linear(hidden, block["mlp.w2"], block["mlp.b2"])])
        _check_finite(x, i + 1)
        taps.append(x)

    final = apply(OpKind.LAYER_NORM, [x, params["ln_f.gamma"], params["ln_f.beta"]])
    start, stop = tokens.span(Segment.ACTION)
    queries = apply(OpKind.SLICE, [final], {"axis": 1, "start": start, "stop": stop})
    hidden = apply(OpKind.GELU, [linear(queries, params["head.w1"], params["head.b1"])])
    actions = linear(hidden, params["head.w2"], params["head.b2"])

    if not tokens.batched:
        actions = _unbatch(actions)
        taps = [_unbatch(t) for t in taps]
    tokens.taps = taps
    return ForwardOutput(actions_pred=actions, taps=taps)


def action_loss(actions_pred: Tensor, actions_gt: np.ndarray | Tensor) -> Tensor:
    """Mean absolute error over every query and action dimension."""
    target = actions_gt if isinstance(actions_gt, Tensor) else Tensor(actions_gt)
    if actions_pred.shape != target.shape:
        raise ShapeError("action_loss", actions_pred.shape, target.shape)
    return apply(OpKind.L1_LOSS, [actions_pred, target])


def action_chunk(episode: Episode, step: int, horizon: int) -> np.ndarray:
    """Expert actions for steps ``step .. step+horizon-1``, padded with the terminal action."""
    last = len(episode.steps) - 1
    return np.stack([
        np.asarray(episode.steps[min(step + k, last)].expert_action, dtype=np.float64)
        for k in range(horizon)
    ])


def visual_taps(taps: Tensor, config: ModelConfig) -> Tensor:
    """Visual-token rows of a batched tap, flattened to [B * N, d]."""
    visual = apply(OpKind.SLICE, [taps], {"axis": 1, "start": 0, "stop": config.n_visual_tokens})
    return apply(OpKind.RESHAPE, [visual], {"shape": (-1, config.d_model)})


def predict_action(
    params: VLAParams,
    views: Sequence[RenderOutput | np.ndarray],
    instruction_ids: Sequence[int],
) -> np.ndarray:
    """First action-query prediction; touches only backbone and head weights."""
    with no_grad():
        tokens = assemble(patchify(views, params.config), instruction_ids, params)
        return forward(params, tokens).actions_pred.data[0].copy()


def predict_actions(
    params: VLAParams,
    batch_views: Sequence[Sequence[RenderOutput | np.ndarray]],
    batch_ids: Sequence[Sequence[int]],
) -> np.ndarray:
    """Batched ``predict_action``: [B, action_dim]."""
    with no_grad():
        patches = np.stack([patchify(views, params.config) for views in batch_views])
        tokens = assemble(patches, np.asarray(batch_ids), params)
        return forward(params, tokens).actions_pred.data[:, 0].copy()
