"""
Spatial Forcing Lab - Ablation Service

Sweeps one configuration axis, one isolated train + eval run per value,
and summarises each cell against an alpha = 0 reference run.
"""
import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import structlog

from src.config import ExperimentConfig, Settings, get_settings
from src.exceptions import ConfigError
from src.probing.probe import probe_rmse, split_episodes, train_probe
from src.scene.dataset import read_dataset
from src.services.data_service import DataService
from src.services.evaluation_service import EvaluationService
from src.services.training_service import TrainingService
from src.utils.csv_utils import AblationRow, write_ablation_summary


logger = structlog.get_logger(__name__)


DATASET_NAME = "data.sfds"
SUMMARY_NAME = "summary.csv"
BASELINE_RUN_ID = "baseline"


class AblationAxis(str, enum.Enum):
    ALPHA = "alpha"
    LAYER = "layer"
    ITERATIONS = "iterations"
    DATA_FRACTION = "data_fraction"
    TARGET = "target"

    @property
    def config_key(self) -> str:
        return {
            AblationAxis.ALPHA: "alpha",
            AblationAxis.LAYER: "aligned_layer",
            AblationAxis.ITERATIONS: "iterations",
            AblationAxis.DATA_FRACTION: "data_fraction",
            AblationAxis.TARGET: "target_kind",
        }[self]


@dataclass
class CellOutcome:
    run_id: str
    curve: list[tuple[int, float]]
    probe_rmse: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def final_success_rate(self) -> Optional[float]:
        return self.curve[-1][1] if self.curve else None


@dataclass
class _CellJob:
    config: ExperimentConfig
    dataset_path: str
    run_dir: str
    run_id: str
    with_probe: bool


def iterations_to_threshold(curve: Sequence[tuple[int, float]], threshold: Optional[float]) -> Optional[int]:
    """First evaluation iteration whose success rate reaches ``threshold``."""
    if threshold is None:
        return None
    for iteration, success in curve:
        if success >= threshold:
            return iteration
    return None


def run_cell(job: _CellJob) -> CellOutcome:
    """
    Train, evaluate and optionally probe one cell.

    Any failure is captured in the outcome so sibling cells keep running.
    """
    try:
        dataset = read_dataset(job.dataset_path)
        service = TrainingService(evaluation_service=EvaluationService(), settings=get_settings())
        result = service.train(job.config, dataset, job.run_dir, run_id=job.run_id)
        curve = [(row.iteration, row.eval_success_rate) for row in result.rows]

        rmse = None
        if job.with_probe:
            train_split, eval_split = split_episodes(dataset.episodes[:job.config.n_train_episodes])
            layer = job.config.model.aligned_layer
            probe = train_probe(
                result.params,
                train_split,
                layer,
                steps=job.config.probe_steps,
                lr=job.config.probe_lr,
                seed=job.config.seed,
            )
            rmse = probe_rmse(probe, result.params, eval_split, layer)
        return CellOutcome(run_id=job.run_id, curve=curve, probe_rmse=rmse)
    except Exception as e:
        logger.error("Ablation cell failed", run_id=job.run_id, error=str(e), kind=type(e).__name__)
        return CellOutcome(run_id=job.run_id, curve=[], error=f"{type(e).__name__}: {e}")


class AblationService:
    """Runs ablation sweeps over a shared dataset and shared evaluation seeds."""

    def __init__(self, settings: Optional[Settings] = None, data_service: Optional[DataService] = None):
        self.settings = settings or get_settings()
        self.data_service = data_service or DataService()

    def cell_configs(
        self,
        config: ExperimentConfig,
        axis: AblationAxis,
        values: Sequence[str],
    ) -> list[ExperimentConfig]:
        """Validate every value up front; an invalid one raises ConfigError before any run."""
        if not values:
            raise ConfigError("ablation needs at least one value")
        configs = []
        for value in values:
            try:
                configs.append(config.with_overrides(**{axis.config_key: value}))
            except ConfigError as e:
                raise ConfigError(f"axis {axis.value} value {value!r}: {e}") from e
        return configs

    def run(
        self,
        config: ExperimentConfig,
        axis: AblationAxis | str,
        values: Sequence[str],
        out_dir: str | Path,
        with_probe: bool = True,
    ) -> list[AblationRow]:
        """
        Run the sweep and write ``summary.csv`` into ``out_dir``.

        Args:
            config: Base configuration shared by every cell
            axis: Varied axis
            values: Raw values, parsed like config-file values
            out_dir: Directory receiving the dataset, one run directory per cell and the summary
            with_probe: Also train a depth probe per cell

        Returns:
            Summary rows in value order
        """
        axis = AblationAxis(axis)
        configs = self.cell_configs(config, axis, values)
        out = Path(out_dir)
        dataset_path = out / DATASET_NAME
        self.data_service.generate_to_file(config, dataset_path)

        baseline_config = config.with_overrides(alpha=0.0)
        jobs = [
            _CellJob(
                config=cell,
                dataset_path=str(dataset_path),
                run_dir=str(out / f"{axis.value}={value}"),
                run_id=f"{axis.value}={value}",
                with_probe=with_probe,
            )
            for cell, value in zip(configs, values)
        ]
        baseline_job = next((job for job in jobs if job.config == baseline_config), None)
        extra = []
        if baseline_job is None:
            baseline_job = _CellJob(
                config=baseline_config,
                dataset_path=str(dataset_path),
                run_dir=str(out / BASELINE_RUN_ID),
                run_id=BASELINE_RUN_ID,
                with_probe=False,
            )
            extra = [baseline_job]

        logger.info(
            "Ablation started",
            axis=axis.value,
            values=list(values),
            workers=self.settings.workers,
            out_dir=str(out),
        )
        outcomes = self._execute(extra + jobs)
        by_run = {outcome.run_id: outcome for outcome in outcomes}
        baseline = by_run[baseline_job.run_id]
        threshold = baseline.final_success_rate

        rows = []
        for job, value in zip(jobs, values):
            outcome = by_run[job.run_id]
            rows.append(
                AblationRow(
                    axis=axis.value,
                    axis_value=str(value),
                    run_id=job.run_id,
                    status="ok" if outcome.ok else "failed",
                    final_success_rate=outcome.final_success_rate,
                    iterations_to_threshold=iterations_to_threshold(outcome.curve, threshold),
                    probe_rmse=outcome.probe_rmse,
                    baseline_final_success_rate=threshold,
                    baseline_iterations_to_threshold=iterations_to_threshold(baseline.curve, threshold),
                    error=outcome.error,
                )
            )
        write_ablation_summary(out / SUMMARY_NAME, rows)
        logger.info(
            "Ablation finished",
            axis=axis.value,
            cells=len(rows),
            failed=sum(row.status != "ok" for row in rows),
            summary=str(out / SUMMARY_NAME),
        )
        return rows

    def _execute(self, jobs: list[_CellJob]) -> list[CellOutcome]:
        if self.settings.workers <= 1 or len(jobs) <= 1:
            return [run_cell(job) for job in jobs]
        with ProcessPoolExecutor(max_workers=self.settings.workers) as pool:
            return list(pool.map(run_cell, jobs))


_ablation_service: Optional[AblationService] = None


def get_ablation_service() -> AblationService:
    """Get or create the shared ablation service."""
    global _ablation_service
    if _ablation_service is None:
        _ablation_service = AblationService()
    return _ablation_service
