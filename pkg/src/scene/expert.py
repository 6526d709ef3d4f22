"""
Spatial Forcing Lab - Expert Demonstrator
"""
import numpy as np

from src.scene.models import GRIPPER_THRESHOLD, MAX_STEP_NORM, SUCCESS_RADIUS, SceneSpec


def clip_norm(vector: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm <= max_norm:
        return vector
    return vector * (max_norm / norm)


def expert_action(scene: SceneSpec, ee_pos: np.ndarray) -> np.ndarray:
    """
    Straight-line reach toward the target centre.

    Args:
        scene: Scene whose target is reached for
        ee_pos: Current end-effector position

    Returns:
        float32 [dx, dy, dz, gripper]
    """
    offset = scene.target_center - np.asarray(ee_pos, dtype=np.float64)
    distance = float(np.linalg.norm(offset))
    delta = clip_norm(offset, MAX_STEP_NORM)
    gripper = 1.0 if distance < SUCCESS_RADIUS else 0.0
    return np.array([*delta, gripper], dtype=np.float32)


def is_success(scene: SceneSpec, ee_pos: np.ndarray, gripper: float) -> bool:
    """Gripper closed within reach of the target centre."""
    distance = float(np.linalg.norm(scene.target_center - np.asarray(ee_pos, dtype=np.float64)))
    return gripper > GRIPPER_THRESHOLD and distance < SUCCESS_RADIUS
