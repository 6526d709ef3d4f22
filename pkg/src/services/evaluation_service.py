"""
Spatial Forcing Lab - Evaluation Service

Closed-loop rollouts of a policy on freshly generated scenes.
"""
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import structlog

from src.model.params import VLAParams
from src.model.vla import predict_actions
from src.scene.expert import clip_norm, expert_action, is_success
from src.scene.generator import gen_scene, instruction_ids, scene_cameras
from src.scene.models import (
    GRIPPER_THRESHOLD,
    MAX_STEP_NORM,
    MAX_STEPS,
    WORKSPACE_MAX,
    WORKSPACE_MIN,
    Difficulty,
    RenderOutput,
    SceneSpec,
)
from src.scene.renderer import render_views


logger = structlog.get_logger(__name__)


@dataclass
class Observation:
    """What a policy sees at one control step. ``scene`` is for privileged policies only."""
    views: list[RenderOutput]
    instruction_ids: list[int]
    ee_pos: np.ndarray
    scene: SceneSpec


class Policy(Protocol):
    def act_batch(self, observations: Sequence[Observation]) -> np.ndarray:
        """[n, 4] actions for ``n`` observations."""
        ...


class VLAPolicy:
    """Executes the first action-query prediction of a VLA."""

    def __init__(self, params: VLAParams):
        self.params = params

    def act_batch(self, observations: Sequence[Observation]) -> np.ndarray:
        return predict_actions(
            self.params,
            [obs.views for obs in observations],
            [obs.instruction_ids for obs in observations],
        )


class ExpertPolicy:
    """Privileged straight-line expert; a surrogate for a perfect checkpoint."""

    def act_batch(self, observations: Sequence[Observation]) -> np.ndarray:
        return np.stack([
            expert_action(obs.scene, obs.ee_pos).astype(np.float64) for obs in observations
        ])


@dataclass
class RolloutResult:
    seed: int
    success: bool
    steps: int


@dataclass
class EvaluationResult:
    rollouts: list[RolloutResult]

    @property
    def success_rate(self) -> float:
        if not self.rollouts:
            return 0.0
        return sum(r.success for r in self.rollouts) / len(self.rollouts)


@dataclass
class _Trial:
    seed: int
    scene: SceneSpec
    ids: list[int]
    ee_pos: np.ndarray
    steps: int = 0
    done: bool = False
    success: bool = False


class EvaluationService:
    """
    Runs trials in lockstep so each control step is one batched forward pass.

    A trial ends when the policy closes the gripper (success if within reach
    of the target) or after the step limit. Predicted displacements are
    clipped to the expert's step norm and positions to the workspace.
    """

    def __init__(self, height: int = 32, width: int = 32, max_steps: int = MAX_STEPS):
        self.height = height
        self.width = width
        self.max_steps = max_steps

    def evaluate(
        self,
        policy: Policy,
        difficulty: Difficulty,
        seeds: Sequence[int],
        run_id: Optional[str] = None,
    ) -> EvaluationResult:
        """
        Roll out ``policy`` once per scene seed.

        Args:
            policy: Policy under test
            difficulty: Scene distribution
            seeds: One scene seed per trial
            run_id: Optional label for logging

        Returns:
            EvaluationResult in seed order
        """
        difficulty = Difficulty(difficulty)
        cameras = scene_cameras(difficulty, self.height, self.width)
        trials = []
        for seed in seeds:
            scene = gen_scene(seed, difficulty)
            trials.append(
                _Trial(
                    seed=seed,
                    scene=scene,
                    ids=instruction_ids(scene.target.color_id),
                    ee_pos=np.asarray(scene.effector_start, dtype=np.float32),
                )
            )

        for _ in range(self.max_steps):
            active = [t for t in trials if not t.done]
            if not active:
                break
            observations = [
                Observation(
                    views=render_views(t.scene, cameras, t.ee_pos),
                    instruction_ids=t.ids,
                    ee_pos=t.ee_pos,
                    scene=t.scene,
                )
                for t in active
            ]
            actions = policy.act_batch(observations)
            for trial, action in zip(active, actions):
                trial.steps += 1
                gripper = float(action[3])
                if gripper > GRIPPER_THRESHOLD:
                    trial.done = True
                    trial.success = is_success(trial.scene, trial.ee_pos, gripper)
                    continue
                delta = clip_norm(np.asarray(action[:3], dtype=np.float64), MAX_STEP_NORM)
                moved = np.clip(trial.ee_pos + delta, WORKSPACE_MIN, WORKSPACE_MAX)
                trial.ee_pos = moved.astype(np.float32)

        result = EvaluationResult(
            rollouts=[RolloutResult(seed=t.seed, success=t.success, steps=t.steps) for t in trials]
        )
        logger.info(
            "Evaluation finished",
            run_id=run_id,
            difficulty=difficulty.value,
            trials=len(trials),
            success_rate=result.success_rate,
        )
        return result


_evaluation_service: Optional[EvaluationService] = None


def get_evaluation_service() -> EvaluationService:
    """Get or create the shared evaluation service."""
    global _evaluation_service
    if _evaluation_service is None:
        _evaluation_service = EvaluationService()
    return _evaluation_service
