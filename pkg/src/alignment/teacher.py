"""
Spatial Forcing Lab - Teacher Features

Per-patch geometric targets built from ground-truth render buffers.

Each patch of each view contributes eight raw statistics; every statistic is
expanded into sin/cos Fourier features, the vector is L2-normalised and a
fixed sinusoidal positional embedding is added. Patches are indexed exactly
like the VLA's visual tokens.
"""
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.config import ModelConfig, TargetKind
from src.exceptions import ShapeError
from src.scene.models import RenderOutput


N_STATS = 8
STAT_NAMES = (
    "point_x", "point_y", "point_z",
    "depth",
    "normal_x", "normal_y", "normal_z",
    "foreground",
)
DEPTH_STAT = STAT_NAMES.index("depth")
FOREGROUND_STAT = STAT_NAMES.index("foreground")

# Neighbouring pixels further apart than this in depth are treated as an object boundary.
NORMAL_DEPTH_JUMP = 0.05


@dataclass(frozen=True)
class TeacherFeatures:
    """Alignment targets [N, d_teacher] plus the statistics they were built from."""
    targets: np.ndarray
    embedding: np.ndarray
    raw_stats: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.targets.shape[0]


class _CallCounter:
    """Thread-safe count of teacher feature constructions."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @property
    def value(self) -> int:
        return self._count


teacher_calls = _CallCounter()


def positional_embedding(n_tokens: int, d_teacher: int, scale: float = 0.1) -> np.ndarray:
    """
    Fixed sinusoidal table.

    E[i, 2j] = scale * sin(i / 10000^(2j/d)), E[i, 2j+1] = scale * cos(same).
    """
    if d_teacher % 2:
        raise ValueError(f"d_teacher must be even, got {d_teacher}")
    positions = np.arange(n_tokens, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_teacher, 2, dtype=np.float64) / d_teacher)
    angles = positions / rates[None, :]
    table = np.zeros((n_tokens, d_teacher))
    table[:, 0::2] = scale * np.sin(angles)
    table[:, 1::2] = scale * np.cos(angles)
    return table


def surface_normals(pointmap: np.ndarray, depth: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Unit normals from point-map finite differences.

    Returns:
        (normals [H, W, 3], valid [H, W]); normals face the camera and are
        zero where a neighbour is background or across a depth jump
    """
    points = pointmap.astype(np.float64)
    depth = depth.astype(np.float64)

    def difference(axis: int) -> tuple[np.ndarray, np.ndarray]:
        forward = np.diff(points, axis=axis)
        jump = np.abs(np.diff(depth, axis=axis))
        both = np.logical_and(np.delete(mask, -1, axis=axis), np.delete(mask, 0, axis=axis))
        # Last row/column reuses the backward difference.
        delta = np.concatenate([forward, np.take(forward, [-1], axis=axis)], axis=axis)
        ok = both & (jump < NORMAL_DEPTH_JUMP)
        ok = np.concatenate([ok, np.take(ok, [-1], axis=axis)], axis=axis)
        return delta, ok

    d_row, ok_row = difference(0)
    d_col, ok_col = difference(1)
    normals = np.cross(d_row, d_col)
    norm = np.linalg.norm(normals, axis=-1)
    valid = mask & ok_row & ok_col & (norm > 0)
    normals = np.where(valid[..., None], normals / np.maximum(norm, 1e-12)[..., None], 0.0)
    return normals, valid


def _patches(array: np.ndarray, config: ModelConfig) -> np.ndarray:
    """[H, W, ...] -> [patches_per_view, patch_size * patch_size, ...] in raster order."""
    ps = config.patch_size
    tail = array.shape[2:]
    grid = array.reshape(config.grid_rows, ps, config.grid_cols, ps, *tail)
    grid = np.moveaxis(grid, 2, 1)
    return grid.reshape(config.patches_per_view, ps * ps, *tail)


def _masked_mean(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    count = weights.sum(axis=1)
    if values.ndim == 3:
        total = (values * weights[..., None]).sum(axis=1)
        return np.where(count[:, None] > 0, total / np.maximum(count, 1)[:, None], 0.0)
    total = (values * weights).sum(axis=1)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def geometry_stats(view: RenderOutput, config: ModelConfig) -> np.ndarray:
    """Per-patch [mean point (3), mean depth, mean normal (3), foreground fraction]."""
    normals, valid = surface_normals(view.pointmap, view.depth, view.mask)
    fg = _patches(view.mask.astype(np.float64), config)
    stats = np.zeros((config.patches_per_view, N_STATS))
    stats[:, 0:3] = _masked_mean(_patches(view.pointmap.astype(np.float64), config), fg)
    stats[:, 3] = _masked_mean(_patches(view.depth.astype(np.float64), config), fg)
    stats[:, 4:7] = _masked_mean(_patches(normals, config), _patches(valid.astype(np.float64), config))
    stats[:, 7] = fg.mean(axis=1)
    return stats


def appearance_stats(view: RenderOutput, config: ModelConfig) -> np.ndarray:
    """Per-patch [mean RGB (3), RGB std (3), mean luminance, luminance range]."""
    rgb = _patches(view.image.astype(np.float64), config)
    luminance = rgb @ np.array([0.299, 0.587, 0.114])
    stats = np.zeros((config.patches_per_view, N_STATS))
    stats[:, 0:3] = rgb.mean(axis=1)
    stats[:, 3:6] = rgb.std(axis=1)
    stats[:, 6] = luminance.mean(axis=1)
    stats[:, 7] = luminance.max(axis=1) - luminance.min(axis=1)
    return stats


def fourier_embed(stats: np.ndarray, n_frequencies: int) -> np.ndarray:
    """[N, S] -> [N, S * n_frequencies * 2] laid out stat-major, then frequency, then (sin, cos)."""
    freqs = (2.0 ** np.arange(n_frequencies)) * np.pi
    angles = stats[:, :, None] * freqs[None, None, :]
    pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return pairs.reshape(stats.shape[0], -1)


def teacher_features(
    views: Sequence[RenderOutput],
    config: ModelConfig,
    kind: TargetKind = TargetKind.GEOMETRY,
) -> TeacherFeatures:
    """
    Build alignment targets for one observation.

    Args:
        views: Rendered views in VLA view order
        config: Model configuration (patch grid, d_teacher, pe_scale)
        kind: Target representation

    Returns:
        Read-only TeacherFeatures
    """
    teacher_calls.increment()
    if len(views) != config.n_views:
        raise ShapeError("teacher_features", (len(views),), (config.n_views,), detail="view count")
    for view in views:
        if view.depth.shape != (config.image_height, config.image_width):
            raise ShapeError("teacher_features", view.depth.shape, (config.image_height, config.image_width))

    stats_of = appearance_stats if kind is TargetKind.APPEARANCE else geometry_stats
    raw = np.concatenate([stats_of(view, config) for view in views], axis=0)

    embedding = fourier_embed(raw, config.n_frequencies)
    embedding /= np.linalg.norm(embedding, axis=1, keepdims=True)
    targets = embedding.copy()
    if kind is not TargetKind.GEOMETRY_NO_PE:
        targets += positional_embedding(config.n_visual_tokens, config.d_teacher, config.pe_scale)

    for array in (targets, embedding, raw):
        array.setflags(write=False)
    return TeacherFeatures(targets=targets, embedding=embedding, raw_stats=raw)
