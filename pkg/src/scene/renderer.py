"""
Spatial Forcing Lab - Raycast Renderer

Analytic ray-sphere rendering with exact depth, point-map and mask buffers.
"""
from typing import Optional, Sequence

import numpy as np

from src.scene.models import (
    AMBIENT,
    BACKGROUND_DEPTH,
    BACKGROUND_POINT,
    EFFECTOR_COLOR,
    EFFECTOR_RADIUS,
    PALETTE,
    Camera,
    RenderOutput,
    SceneSpec,
)


def _hit_distance(
    origin: np.ndarray,
    directions: np.ndarray,
    center: np.ndarray,
    radius: float,
) -> np.ndarray:
    """Nearest positive ray parameter per pixel, +inf on a miss."""
    oc = origin - center
    a = np.einsum("hwc,hwc->hw", directions, directions)
    b = 2.0 * directions @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4.0 * a * c

    t = np.full(a.shape, np.inf)
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - root) / (2.0 * a)
    far = (-b + root) / (2.0 * a)
    t = np.where(hit & (near > 0.0), near, t)
    t = np.where(hit & (near <= 0.0) & (far > 0.0), far, t)
    return t


def _surfaces(
    scene: SceneSpec,
    effector: Optional[np.ndarray],
) -> list[tuple[np.ndarray, float, np.ndarray]]:
    surfaces = [
        (np.asarray(s.center, dtype=np.float64), s.radius, PALETTE[s.color_id])
        for s in scene.objects
    ]
    if effector is not None:
        surfaces.append((np.asarray(effector, dtype=np.float64), EFFECTOR_RADIUS, EFFECTOR_COLOR))
    return surfaces


def render(
    scene: SceneSpec,
    camera: Camera,
    effector: Optional[Sequence[float]] = None,
) -> RenderOutput:
    """
    Render one view of a scene.

    Args:
        scene: Scene to render
        camera: Viewpoint
        effector: Optional end-effector position, drawn as a small neutral sphere

    Returns:
        RenderOutput with float32 buffers
    """
    origin = np.asarray(camera.position, dtype=np.float64)
    directions = camera.ray_directions()
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    H, W = camera.height, camera.width

    depth = np.full((H, W), np.inf)
    centers = np.zeros((H, W, 3))
    radii = np.ones((H, W))
    colors = np.zeros((H, W, 3))

    for center, radius, color in _surfaces(scene, None if effector is None else np.asarray(effector)):
        t = _hit_distance(origin, directions, center, radius)
        closer = t < depth
        depth = np.where(closer, t, depth)
        centers[closer] = center
        radii[closer] = radius
        colors[closer] = color

    mask = np.isfinite(depth)
    points = origin + depth[..., None] * directions
    points = np.where(mask[..., None], points, np.asarray(BACKGROUND_POINT))

    normals = (points - centers) / radii[..., None]
    lambert = np.clip(normals @ light, 0.0, None)
    image = np.clip(colors * lambert[..., None] + AMBIENT, 0.0, 1.0)
    image = np.where(mask[..., None], image, 0.0)

    return RenderOutput(
        image=image.astype(np.float32),
        depth=np.where(mask, depth, BACKGROUND_DEPTH).astype(np.float32),
        pointmap=points.astype(np.float32),
        mask=mask,
    )


def unproject(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """
    Invert the renderer's pinhole projection.

    Pixels at or beyond the background sentinel map to the background point.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match camera resolution "
            f"{(camera.height, camera.width)}"
        )
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite")

    origin = np.asarray(camera.position, dtype=np.float64)
    points = origin + depth[..., None] * camera.ray_directions()
    foreground = depth < BACKGROUND_DEPTH
    return np.where(foreground[..., None], points, np.asarray(BACKGROUND_POINT))


def render_views(
    scene: SceneSpec,
    cameras: Sequence[Camera],
    effector: Optional[Sequence[float]] = None,
) -> list[RenderOutput]:
    """Render every camera, reusing the render when a camera repeats."""
    rendered: dict[Camera, RenderOutput] = {}
    views = []
    for camera in cameras:
        if camera not in rendered:
            rendered[camera] = render(scene, camera, effector)
        base = rendered[camera]
        views.append(
            RenderOutput(
                image=base.image.copy(),
                depth=base.depth.copy(),
                pointmap=base.pointmap.copy(),
                mask=base.mask.copy(),
            )
        )
    return views
