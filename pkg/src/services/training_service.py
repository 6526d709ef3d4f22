"""
Spatial Forcing Lab - Training Service

Behaviour-cloning loop with the optional spatial alignment objective.
"""
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from src.alignment.losses import LossWeights, align_loss, total_loss
from src.alignment.projector import Projector, project
from src.alignment.teacher import teacher_features
from src.config import ExperimentConfig, LrSchedule, Settings, get_settings
from src.engine import Adam, BatchNormMode, backward, cosine_lr
from src.exceptions import DatasetMismatchError, NonFiniteError, StorageError
from src.model.checkpoint import save_checkpoint
from src.model.params import VLAParams, init_params
from src.model.vla import action_chunk, action_loss, assemble, forward, patchify, visual_taps
from src.scene.dataset import Dataset
from src.scene.generator import eval_seeds
from src.services.evaluation_service import EvaluationService, VLAPolicy, get_evaluation_service
from src.utils.csv_utils import MetricsRow, write_metrics


logger = structlog.get_logger(__name__)


CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"
RESOLVED_CONFIG_NAME = "config.resolved"
PROJECTOR_SEED_OFFSET = 1
SAMPLER_SEED_OFFSET = 2
# Timesteps whose teacher targets stay cached; older ones are rebuilt on demand.
TEACHER_CACHE_SIZE = 1024


@dataclass
class TrainingResult:
    run_id: str
    run_dir: Path
    rows: list[MetricsRow]
    params: VLAParams
    projector: Optional[Projector] = None

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / CHECKPOINT_NAME

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / METRICS_NAME

    @property
    def final_success_rate(self) -> Optional[float]:
        return self.rows[-1].eval_success_rate if self.rows else None


@dataclass
class _Window:
    """Running loss sums since the previous metrics row."""
    l_action: float = 0.0
    l_align: float = 0.0
    total: float = 0.0
    count: int = 0
    started: float = field(default_factory=time.perf_counter)

    def add(self, l_action: float, l_align: Optional[float], total: float) -> None:
        self.l_action += l_action
        self.l_align += l_align or 0.0
        self.total += total
        self.count += 1


def check_dataset(config: ExperimentConfig, dataset: Dataset) -> None:
    """Raise DatasetMismatchError when the dataset cannot feed this config."""
    model = config.model
    problems = []
    if dataset.difficulty is not config.difficulty:
        problems.append(f"difficulty {dataset.difficulty.value} != {config.difficulty.value}")
    if (dataset.height, dataset.width) != (model.image_height, model.image_width):
        problems.append(
            f"image size {dataset.height}x{dataset.width} != {model.image_height}x{model.image_width}"
        )
    if dataset.n_views != model.n_views:
        problems.append(f"n_views {dataset.n_views} != {model.n_views}")
    if len(dataset) < config.n_train_episodes:
        problems.append(f"{len(dataset)} episodes < n_train_episodes {config.n_train_episodes}")
    if problems:
        raise DatasetMismatchError("dataset does not match config: " + "; ".join(problems))


def training_episode_count(config: ExperimentConfig) -> int:
    """Episodes kept after data_fraction subsampling (a prefix in seed order)."""
    return max(1, math.ceil(config.data_fraction * config.n_train_episodes))


class TrainingService:
    """
    Trains one run and writes its artefacts into a run directory.

    With alpha = 0 no projector is created and no teacher features are built.
    """

    def __init__(
        self,
        evaluation_service: Optional[EvaluationService] = None,
        settings: Optional[Settings] = None,
    ):
        self.evaluation_service = evaluation_service or get_evaluation_service()
        self.settings = settings or get_settings()

    def train(
        self,
        config: ExperimentConfig,
        dataset: Dataset,
        out_dir: str | Path,
        run_id: Optional[str] = None,
    ) -> TrainingResult:
        """
        Run the full training loop.

        Args:
            config: Experiment configuration
            dataset: Training episodes (the first n_train_episodes are used)
            out_dir: Run directory for config.resolved, metrics.csv and model.ckpt
            run_id: Label written into metrics rows (defaults to the directory name)

        Returns:
            TrainingResult with the metrics rows and trained weights
        """
        check_dataset(config, dataset)
        run_dir = Path(out_dir)
        run_id = run_id or run_dir.name
        model = config.model
        self._write_resolved_config(config, run_dir)

        episodes = dataset.episodes[:training_episode_count(config)]
        timesteps = [(e, s) for e, episode in enumerate(episodes) for s in range(len(episode.steps))]
        weights = LossWeights(alpha=config.alpha)
        aligned = config.alpha > 0.0

        params = init_params(model, config.seed)
        projector = Projector.create(model, config.seed + PROJECTOR_SEED_OFFSET) if aligned else None
        trainable = params.parameters() + (projector.parameters() if projector else [])
        optimizer = Adam(trainable, lr=config.lr)
        sampler = np.random.default_rng(config.seed + SAMPLER_SEED_OFFSET)
        @lru_cache(maxsize=TEACHER_CACHE_SIZE)
        def teacher_targets(e: int, s: int) -> np.ndarray:
            return teacher_features(episodes[e].steps[s].views, model, config.target_kind).targets

        seeds = eval_seeds(config.seed, config.eval_trials)

        logger.info(
            "Training started",
            run_id=run_id,
            episodes=len(episodes),
            timesteps=len(timesteps),
            alpha=config.alpha,
            aligned_layer=model.aligned_layer,
            target_kind=config.target_kind.value,
            iterations=config.iterations,
        )

        rows: list[MetricsRow] = []
        window = _Window()
        for iteration in range(1, config.iterations + 1):
            if config.lr_schedule is LrSchedule.COSINE:
                optimizer.set_lr(cosine_lr(config.lr, iteration - 1, config.iterations))

            batch = [timesteps[i] for i in sampler.integers(0, len(timesteps), size=config.batch_size)]
            patches = np.stack([patchify(episodes[e].steps[s].views, model) for e, s in batch])
            ids = np.asarray([episodes[e].instruction_ids for e, _ in batch])
            chunks = np.stack([action_chunk(episodes[e], s, model.horizon) for e, s in batch])

            try:
                out = forward(params, assemble(patches, ids, params))
            except NonFiniteError as e:
                raise NonFiniteError(f"{e} at iteration {iteration}", layer=e.layer, iteration=iteration) from e
            l_action = action_loss(out.actions_pred, chunks)

            l_align = None
            if aligned:
                targets = np.concatenate([teacher_targets(e, s) for e, s in batch])
                projected = project(visual_taps(out.taps[model.aligned_layer], model), projector)
                l_align = align_loss(projected, targets)

            loss = total_loss(l_action, l_align, weights, iteration=iteration)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            window.add(l_action.item(), l_align.item() if l_align is not None else None, loss.item())

            if iteration % config.eval_every == 0 or (
                iteration == config.iterations and config.iterations < config.eval_every
            ):
                rows.append(self._evaluate(config, params, seeds, run_id, iteration, window, aligned))
                window = _Window()
            logger.debug("Training step", run_id=run_id, iteration=iteration, loss=loss.item())

        write_metrics(run_dir / METRICS_NAME, rows)
        save_checkpoint(run_dir / CHECKPOINT_NAME, params, projector.state_dict() if projector else None)
        result = TrainingResult(run_id=run_id, run_dir=run_dir, rows=rows, params=params, projector=projector)
        logger.info(
            "Training finished",
            run_id=run_id,
            final_success_rate=result.final_success_rate,
            teacher_features_built=teacher_targets.cache_info().misses,
            run_dir=str(run_dir),
        )
        return result

    def _evaluate(
        self,
        config: ExperimentConfig,
        params: VLAParams,
        seeds: list[int],
        run_id: str,
        iteration: int,
        window: _Window,
        aligned: bool,
    ) -> MetricsRow:
        n = max(window.count, 1)
        evaluator = self.evaluation_service
        if (evaluator.height, evaluator.width) != (config.model.image_height, config.model.image_width):
            evaluator = EvaluationService(config.model.image_height, config.model.image_width, evaluator.max_steps)
        evaluation = evaluator.evaluate(VLAPolicy(params), config.difficulty, seeds, run_id=run_id)
        wall_ms = (time.perf_counter() - window.started) * 1000.0
        row = MetricsRow(
            run_id=run_id,
            iteration=iteration,
            l_action=window.l_action / n,
            l_align=window.l_align / n if aligned else None,
            total_loss=window.total / n,
            eval_success_rate=evaluation.success_rate,
            wall_ms=wall_ms if self.settings.record_wall_time else None,
        )
        logger.info(
            "Evaluation row",
            run_id=run_id,
            iteration=iteration,
            l_action=row.l_action,
            l_align=row.l_align,
            success_rate=row.eval_success_rate,
            wall_ms=round(wall_ms, 1),
        )
        return row

    @staticmethod
    def _write_resolved_config(config: ExperimentConfig, run_dir: Path) -> None:
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            text = "\n".join(config.resolved_lines()) + "\n"
            (run_dir / RESOLVED_CONFIG_NAME).write_bytes(text.encode("utf-8"))
        except OSError as e:
            raise StorageError(f"cannot write resolved config ({e.strerror})", path=str(run_dir)) from e


_training_service: Optional[TrainingService] = None


def get_training_service() -> TrainingService:
    """Get or create the shared training service."""
    global _training_service
    if _training_service is None:
        _training_service = TrainingService()
    return _training_service
