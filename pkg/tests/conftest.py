"""
Spatial Forcing Lab - Test Configuration
"""
import numpy as np
import pytest
from unittest.mock import MagicMock

from src.config import ExperimentConfig, ModelConfig
from src.scene.generator import gen_episode, train_seeds
from src.scene.models import Difficulty, SceneSpec, Sphere


@pytest.fixture
def tiny_model_config():
    """Small architecture that keeps forward passes fast."""
    return ModelConfig(
        d_model=16,
        n_layers=2,
        n_heads=2,
        patch_size=8,
        image_height=16,
        image_width=16,
        n_action_queries=4,
        horizon=4,
        aligned_layer=1,
        d_teacher=16,
        projector_hidden=16,
        action_hidden=16,
    )


@pytest.fixture
def tiny_config(tiny_model_config):
    """Experiment config sized for unit tests."""
    return ExperimentConfig(
        seed=0,
        difficulty=Difficulty.TWO_VIEW,
        n_train_episodes=4,
        iterations=4,
        batch_size=2,
        eval_trials=2,
        eval_every=2,
        probe_steps=5,
        model=tiny_model_config,
    )


@pytest.fixture
def tiny_episodes(tiny_config):
    """Expert episodes rendered at the tiny resolution."""
    return [
        gen_episode(seed, tiny_config.difficulty, 16, 16)
        for seed in train_seeds(tiny_config.seed, tiny_config.n_train_episodes)
    ]


@pytest.fixture
def axis_scene():
    """One sphere of radius 0.1 at the workspace centre."""
    return SceneSpec(
        objects=(Sphere(center=(0.5, 0.5, 0.5), radius=0.1, color_id=0),),
        target_index=0,
        effector_start=(0.2, 0.2, 0.8),
        light_dir=(0.0, 0.0, 1.0),
    )


@pytest.fixture
def empty_scene():
    """Scene without objects."""
    return SceneSpec(
        objects=(),
        target_index=0,
        effector_start=(0.5, 0.5, 0.8),
        light_dir=(0.0, 0.0, 1.0),
    )


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def mock_settings():
    """Mock process settings."""
    settings = MagicMock()
    settings.log_level = "INFO"
    settings.log_format = "console"
    settings.runs_dir = "./runs"
    settings.workers = 1
    settings.record_wall_time = False
    return settings
