"""
Spatial Forcing Lab - Data Service

Generates and stores expert demonstration datasets.
"""
from dataclasses import dataclass
from pathlib import Path

import structlog

from src.config import ExperimentConfig
from src.scene.dataset import Dataset, write_dataset
from src.scene.generator import eval_seeds, gen_episode, train_seeds


logger = structlog.get_logger(__name__)


@dataclass
class GenerationSummary:
    path: Path
    episodes: int
    expert_success_rate: float
    eval_seed_start: int


class DataService:
    """Builds the training dataset of an experiment config."""

    def generate(self, config: ExperimentConfig) -> Dataset:
        """Roll the expert over ``n_train_episodes`` training seeds."""
        model = config.model
        episodes = [
            gen_episode(seed, config.difficulty, model.image_height, model.image_width)
            for seed in train_seeds(config.seed, config.n_train_episodes)
        ]
        return Dataset(
            difficulty=config.difficulty,
            height=model.image_height,
            width=model.image_width,
            n_views=model.n_views,
            episodes=episodes,
        )

    def generate_to_file(self, config: ExperimentConfig, out_path: str | Path) -> GenerationSummary:
        """
        Generate the dataset and write it to ``out_path``.

        Returns:
            Summary with the episode count and the expert's success rate
        """
        dataset = self.generate(config)
        write_dataset(dataset.episodes, out_path, config.difficulty)
        successes = sum(episode.success for episode in dataset.episodes)
        summary = GenerationSummary(
            path=Path(out_path),
            episodes=len(dataset),
            expert_success_rate=successes / max(len(dataset), 1),
            eval_seed_start=eval_seeds(config.seed, 1)[0],
        )
        logger.info(
            "Dataset generated",
            path=str(out_path),
            episodes=summary.episodes,
            expert_success_rate=summary.expert_success_rate,
        )
        return summary
