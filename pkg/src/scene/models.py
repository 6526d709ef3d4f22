"""
Spatial Forcing Lab - Scene Models

Data types for procedural tabletop scenes, cameras, renders and episodes.
"""
import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


# Workspace is the axis-aligned unit cube, metres.
WORKSPACE_MIN = 0.0
WORKSPACE_MAX = 1.0

BACKGROUND_DEPTH = 10.0
BACKGROUND_POINT = (0.0, 0.0, -1.0)
AMBIENT = 0.1

MIN_RADIUS = 0.04
MAX_RADIUS = 0.10
N_COLORS = 4
COLOR_NAMES = ("red", "green", "blue", "yellow")
PALETTE = np.array(
    [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.2],
    ]
)

EFFECTOR_RADIUS = 0.03
EFFECTOR_COLOR = np.array([0.75, 0.75, 0.75])

MAX_STEPS = 20
MAX_STEP_NORM = 0.10
SUCCESS_RADIUS = 0.05
GRIPPER_THRESHOLD = 0.5


class Difficulty(str, enum.Enum):
    """Scene distributions."""
    TWO_VIEW = "two_view"
    MONO_AMBIGUOUS = "mono_ambiguous"

    @property
    def code(self) -> int:
        return 0 if self is Difficulty.TWO_VIEW else 1

    @classmethod
    def from_code(cls, code: int) -> "Difficulty":
        for member in cls:
            if member.code == code:
                return member
        raise ValueError(f"unknown difficulty code {code}")


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color_id: int


@dataclass(frozen=True)
class SceneSpec:
    """
    Procedural tabletop scene.

    Objects are 1-3 non-intersecting spheres with distinct colours; the
    effector is not an object.
    """
    objects: tuple[Sphere, ...]
    target_index: int
    effector_start: tuple[float, float, float]
    light_dir: tuple[float, float, float]

    @property
    def target(self) -> Sphere:
        return self.objects[self.target_index]

    @property
    def target_center(self) -> np.ndarray:
        return np.asarray(self.target.center, dtype=np.float64)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; rays carry unit forward component so ray parameter = z-depth."""
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    vertical_fov: float = math.radians(60.0)
    height: int = 32
    width: int = 32

    def __post_init__(self) -> None:
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position must differ from look_at")
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError("vertical_fov must lie in (0, pi)")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("resolution must be positive")
        forward = np.subtract(self.look_at, self.position)
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) orthonormal camera axes."""
        forward = np.subtract(self.look_at, self.position).astype(np.float64)
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return forward, right, true_up

    def ray_directions(self) -> np.ndarray:
        """[H, W, 3] pixel-centre ray directions with forward component 1."""
        forward, right, up = self.basis()
        tan_half = math.tan(self.vertical_fov / 2.0)
        aspect = self.width / self.height
        cols = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * tan_half * aspect
        rows = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * tan_half
        return (
            forward[None, None, :]
            + cols[None, :, None] * right[None, None, :]
            + rows[:, None, None] * up[None, None, :]
        )

    def project(self, point: np.ndarray) -> tuple[float, float, float]:
        """Continuous (row, col, depth) of a world point; pixel centres sit at k + 0.5."""
        forward, right, up = self.basis()
        rel = np.asarray(point, dtype=np.float64) - np.asarray(self.position)
        depth = float(rel @ forward)
        tan_half = math.tan(self.vertical_fov / 2.0)
        x = float(rel @ right) / depth / (tan_half * self.width / self.height)
        y = float(rel @ up) / depth / tan_half
        col = (x + 1.0) / 2.0 * self.width
        row = (1.0 - y) / 2.0 * self.height
        return row, col, depth


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class RenderOutput:
    """One rendered view with exact geometry."""
    image: np.ndarray      # [H, W, 3] float32 in [0, 1]
    depth: np.ndarray      # [H, W] float32 camera-frame z, BACKGROUND_DEPTH off-object
    pointmap: np.ndarray   # [H, W, 3] float32 world coordinates, BACKGROUND_POINT off-object
    mask: np.ndarray       # [H, W] bool foreground

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RenderOutput):
            return NotImplemented
        return all(
            _arrays_equal(getattr(self, name), getattr(other, name))
            for name in ("image", "depth", "pointmap", "mask")
        )


@dataclass(eq=False)
class Step:
    views: list[RenderOutput]
    ee_pos: np.ndarray           # [3] float32
    expert_action: np.ndarray    # [4] float32: dx, dy, dz, gripper

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Step):
            return NotImplemented
        return (
            self.views == other.views
            and _arrays_equal(self.ee_pos, other.ee_pos)
            and _arrays_equal(self.expert_action, other.expert_action)
        )


@dataclass(eq=False)
class Episode:
    """
    Expert demonstration.

    ``scene`` is kept in memory only; it is not part of the dataset file.
    """
    scene: Optional[SceneSpec]
    instruction_ids: list[int]
    steps: list[Step] = field(default_factory=list)
    success: bool = False

    @property
    def final_position(self) -> np.ndarray:
        last = self.steps[-1]
        return (last.ee_pos + last.expert_action[:3]).astype(np.float32)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            list(self.instruction_ids) == list(other.instruction_ids)
            and self.success == other.success
            and self.steps == other.steps
        )
