"""
Spatial Forcing Lab - Scene and Episode Generator

Seeded rejection sampling of tabletop scenes and expert rollouts over them.
"""
import dataclasses
import math

import numpy as np
import structlog

from src.exceptions import SceneGenerationError
from src.scene.expert import expert_action
from src.scene.models import (
    MAX_RADIUS,
    MAX_STEPS,
    MIN_RADIUS,
    N_COLORS,
    WORKSPACE_MAX,
    WORKSPACE_MIN,
    Camera,
    Difficulty,
    Episode,
    SceneSpec,
    Sphere,
    Step,
)
from src.scene.renderer import render_views


logger = structlog.get_logger(__name__)


MAX_ATTEMPTS = 1000
SURFACE_GAP = 0.01
TABLE_HEIGHT = 0.45
MONO_DEPTH_RANGE = (0.6, 1.5)
MONO_MIN_DEPTH_SPAN = 0.3
MONO_JITTER = 0.005
MONO_PIXEL_SPREAD = 5

PRIMARY_CAMERA = Camera(position=(0.5, -0.3, 1.1), look_at=(0.5, 0.5, 0.3))
OBLIQUE_CAMERA = Camera(position=(1.6, 0.3, 0.8), look_at=(0.5, 0.5, 0.3))

VOCABULARY = (
    "<pad>", "reach", "the", "sphere",
    "red", "green", "blue", "yellow",
    "move", "to", "grasp", "left",
    "right", "near", "far", "<unk>",
)
TOKEN_IDS = {token: i for i, token in enumerate(VOCABULARY)}
COLOR_TOKEN_OFFSET = TOKEN_IDS["red"]


def scene_cameras(difficulty: Difficulty, height: int = 32, width: int = 32) -> list[Camera]:
    """
    Cameras rendered at every step.

    two_view pairs the primary camera with the oblique one; mono_ambiguous
    shows the primary view twice so both variants carry two views.
    """
    primary = dataclasses.replace(PRIMARY_CAMERA, height=height, width=width)
    if difficulty is Difficulty.MONO_AMBIGUOUS:
        return [primary, primary]
    return [primary, dataclasses.replace(OBLIQUE_CAMERA, height=height, width=width)]


def instruction_ids(color_id: int) -> list[int]:
    """Token ids of "reach the <color> sphere"."""
    return [
        TOKEN_IDS["reach"],
        TOKEN_IDS["the"],
        COLOR_TOKEN_OFFSET + color_id,
        TOKEN_IDS["sphere"],
    ]


def _inside_workspace(center: np.ndarray, radius: float) -> bool:
    return bool(
        np.all(center - radius >= WORKSPACE_MIN) and np.all(center + radius <= WORKSPACE_MAX)
    )


def _clear_of(center: np.ndarray, radius: float, placed: list[tuple[np.ndarray, float]]) -> bool:
    return all(
        np.linalg.norm(center - other) > radius + other_radius + SURFACE_GAP
        for other, other_radius in placed
    )


def _light_dir(rng: np.random.Generator) -> tuple[float, float, float]:
    light = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.6, -0.2), 1.0])
    light /= np.linalg.norm(light)
    return tuple(float(v) for v in light)


def _free_placement(rng: np.random.Generator, n_objects: int) -> list[tuple[np.ndarray, float]]:
    placed: list[tuple[np.ndarray, float]] = []
    attempts = 0
    while len(placed) < n_objects:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise SceneGenerationError(
                f"could not place {n_objects} non-intersecting spheres in {MAX_ATTEMPTS} attempts"
            )
        radius = float(rng.uniform(MIN_RADIUS, MAX_RADIUS))
        center = np.array([
            rng.uniform(0.15, 0.85),
            rng.uniform(0.15, 0.85),
            rng.uniform(radius, TABLE_HEIGHT),
        ])
        if _inside_workspace(center, radius) and _clear_of(center, radius, placed):
            placed.append((center, radius))
    return placed


def _ray_placement(
    rng: np.random.Generator,
    n_objects: int,
    camera: Camera,
) -> list[tuple[np.ndarray, float]]:
    """Centres on pixel-centre rays around one anchor pixel, at spread-out depths."""
    directions = camera.ray_directions()
    origin = np.asarray(camera.position, dtype=np.float64)
    attempts = 0
    while True:
        anchor_row = int(rng.integers(camera.height // 4, 3 * camera.height // 4))
        anchor_col = int(rng.integers(camera.width // 4, 3 * camera.width // 4))
        placed: list[tuple[np.ndarray, float]] = []
        while len(placed) < n_objects:
            attempts += 1
            if attempts > MAX_ATTEMPTS:
                raise SceneGenerationError(
                    f"could not place {n_objects} ray-aligned spheres in {MAX_ATTEMPTS} attempts"
                )
            row = int(np.clip(
                anchor_row + rng.integers(-MONO_PIXEL_SPREAD, MONO_PIXEL_SPREAD + 1),
                0, camera.height - 1,
            ))
            col = int(np.clip(
                anchor_col + rng.integers(-MONO_PIXEL_SPREAD, MONO_PIXEL_SPREAD + 1),
                0, camera.width - 1,
            ))
            depth = rng.uniform(*MONO_DEPTH_RANGE)
            radius = float(rng.uniform(MIN_RADIUS, MAX_RADIUS))
            jitter = rng.uniform(-MONO_JITTER, MONO_JITTER, size=3)
            center = origin + depth * directions[row, col] + jitter
            if _inside_workspace(center, radius) and _clear_of(center, radius, placed):
                placed.append((center, radius))

        depths = [camera.project(center)[2] for center, _ in placed]
        if max(depths) - min(depths) >= MONO_MIN_DEPTH_SPAN:
            return placed
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise SceneGenerationError(
                f"could not reach a depth span of {MONO_MIN_DEPTH_SPAN} m in {MAX_ATTEMPTS} attempts"
            )


def gen_scene(seed: int, difficulty: Difficulty) -> SceneSpec:
    """
    Sample a scene deterministically from ``(seed, difficulty)``.

    Args:
        seed: Non-negative seed
        difficulty: two_view places objects freely; mono_ambiguous lines them
            up along nearby rays of the primary camera at varied depth

    Returns:
        SceneSpec

    Raises:
        SceneGenerationError: If rejection sampling exceeds its attempt budget
    """
    difficulty = Difficulty(difficulty)
    rng = np.random.default_rng([seed, difficulty.code])

    if difficulty is Difficulty.TWO_VIEW:
        n_objects = int(rng.integers(1, 4))
        placed = _free_placement(rng, n_objects)
    else:
        n_objects = int(rng.integers(2, 4))
        placed = _ray_placement(rng, n_objects, PRIMARY_CAMERA)

    color_ids = rng.choice(N_COLORS, size=n_objects, replace=False)
    objects = tuple(
        Sphere(center=tuple(float(v) for v in center), radius=radius, color_id=int(color))
        for (center, radius), color in zip(placed, color_ids)
    )
    target_index = int(rng.integers(0, n_objects))
    effector_start = (
        float(rng.uniform(0.15, 0.85)),
        float(rng.uniform(0.15, 0.85)),
        float(rng.uniform(0.7, 0.9)),
    )
    return SceneSpec(
        objects=objects,
        target_index=target_index,
        effector_start=effector_start,
        light_dir=_light_dir(rng),
    )


def rollout_expert(
    scene: SceneSpec,
    cameras: list[Camera],
    max_steps: int = MAX_STEPS,
) -> tuple[list[Step], bool]:
    """Roll the expert from the effector start until it closes the gripper or runs out of steps."""
    ee_pos = np.asarray(scene.effector_start, dtype=np.float32)
    steps: list[Step] = []
    for _ in range(max_steps):
        action = expert_action(scene, ee_pos)
        steps.append(
            Step(views=render_views(scene, cameras, ee_pos), ee_pos=ee_pos, expert_action=action)
        )
        if action[3] == 1.0:
            return steps, True
        ee_pos = ee_pos + action[:3]
    return steps, False


def gen_episode(seed: int, difficulty: Difficulty, height: int = 32, width: int = 32) -> Episode:
    """
    Generate one expert demonstration.

    Args:
        seed: Scene seed
        difficulty: Scene distribution
        height: Image height in pixels
        width: Image width in pixels

    Returns:
        Episode with float32 views, positions and actions
    """
    difficulty = Difficulty(difficulty)
    scene = gen_scene(seed, difficulty)
    steps, success = rollout_expert(scene, scene_cameras(difficulty, height, width))
    episode = Episode(
        scene=scene,
        instruction_ids=instruction_ids(scene.target.color_id),
        steps=steps,
        success=success,
    )
    logger.debug(
        "Episode generated",
        seed=seed,
        difficulty=difficulty.value,
        steps=len(steps),
        success=success,
    )
    return episode


def expected_max_steps(scene: SceneSpec) -> int:
    """Step bound of the straight-line expert: ceil(dist / max step) + 1."""
    start = np.asarray(scene.effector_start, dtype=np.float64)
    distance = float(np.linalg.norm(scene.target_center - start))
    return math.ceil(distance / 0.10) + 1


# Training and evaluation scenes come from disjoint seed ranges of one base seed.
SEED_STRIDE = 2**33
EVAL_SEED_OFFSET = 2**32


def train_seeds(seed: int, count: int) -> list[int]:
    return [seed * SEED_STRIDE + i for i in range(count)]


def eval_seeds(seed: int, count: int) -> list[int]:
    return [seed * SEED_STRIDE + EVAL_SEED_OFFSET + i for i in range(count)]
