"""
Spatial Forcing Lab - CLI Commands

Command handlers:
- sf gen-data --config C --out F
- sf train --config C --data F --out D
- sf eval --ckpt P --trials N --seed S
- sf ablate --config C --axis A --values v1,v2,...
- sf probe --ckpt P --data F --layer L
- sf plot --csv F --out G
"""
import argparse
from pathlib import Path
from typing import Optional

import structlog

from src.alignment.projector import Projector
from src.config import ExperimentConfig, load_experiment_config, settings
from src.exceptions import ConfigError
from src.model.checkpoint import load_checkpoint
from src.probing.probe import alignment_diagnostics
from src.scene.dataset import read_dataset
from src.scene.generator import eval_seeds
from src.scene.models import Difficulty
from src.services.ablation_service import AblationAxis, get_ablation_service
from src.services.data_service import DataService
from src.services.evaluation_service import EvaluationService, ExpertPolicy, VLAPolicy
from src.services.plot_service import get_plot_service
from src.services.training_service import RESOLVED_CONFIG_NAME, get_training_service
from src.utils.csv_utils import MetricsRow, write_metrics


logger = structlog.get_logger(__name__)


def _sibling_config(ckpt: Path) -> Optional[ExperimentConfig]:
    resolved = ckpt.parent / RESOLVED_CONFIG_NAME
    if resolved.exists():
        return load_experiment_config(resolved)
    return None


def handle_gen_data(args: argparse.Namespace) -> int:
    """Generate the training dataset of a config."""
    config = load_experiment_config(args.config)
    summary = DataService().generate_to_file(config, args.out)
    print(
        f"episodes={summary.episodes} expert_success_rate={summary.expert_success_rate:.2f} "
        f"difficulty={config.difficulty.value} eval_seed_start={summary.eval_seed_start} "
        f"path={summary.path}"
    )
    return 0


def handle_train(args: argparse.Namespace) -> int:
    """Train one run into an output directory."""
    config = load_experiment_config(args.config)
    dataset = read_dataset(args.data)
    result = get_training_service().train(config, dataset, args.out)
    final = result.final_success_rate
    print(
        f"run_id={result.run_id} eval_rows={len(result.rows)} "
        f"final_success_rate={'' if final is None else f'{final:.2f}'} "
        f"checkpoint={result.checkpoint_path} metrics={result.metrics_path}"
    )
    return 0


def handle_eval(args: argparse.Namespace) -> int:
    """
    Closed-loop evaluation of a checkpoint.

    Difficulty comes from --difficulty, else from the run's config.resolved,
    else the default config.
    """
    if args.policy == "expert":
        policy = ExpertPolicy()
        height = width = 32
        config = _sibling_config(Path(args.ckpt)) if args.ckpt else None
    else:
        if not args.ckpt:
            raise ConfigError("--ckpt is required for the vla policy")
        checkpoint = load_checkpoint(args.ckpt)
        policy = VLAPolicy(checkpoint.params)
        height, width = checkpoint.config.image_height, checkpoint.config.image_width
        config = _sibling_config(Path(args.ckpt))

    if args.difficulty:
        difficulty = Difficulty(args.difficulty)
    elif config is not None:
        difficulty = config.difficulty
    else:
        difficulty = ExperimentConfig().difficulty

    service = EvaluationService(height=height, width=width)
    result = service.evaluate(policy, difficulty, eval_seeds(args.seed, args.trials))
    print(f"success_rate={result.success_rate:.2f} trials={args.trials} difficulty={difficulty.value}")
    return 0


def handle_ablate(args: argparse.Namespace) -> int:
    """Sweep one axis and write the summary CSV."""
    config = load_experiment_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    out_dir = Path(args.out) if args.out else Path(settings.runs_dir) / f"ablate-{args.axis}"
    rows = get_ablation_service().run(config, AblationAxis(args.axis), values, out_dir, with_probe=not args.no_probe)
    for row in rows:
        final = "" if row.final_success_rate is None else f"{row.final_success_rate:.2f}"
        print(f"{row.axis}={row.axis_value} status={row.status} final_success_rate={final}")
    print(f"summary={out_dir / 'summary.csv'}")
    return 0


def handle_probe(args: argparse.Namespace) -> int:
    """Depth probe plus alignment diagnostics for a checkpoint."""
    ckpt = Path(args.ckpt)
    checkpoint = load_checkpoint(ckpt)
    run_config = _sibling_config(ckpt) or ExperimentConfig()
    dataset = read_dataset(args.data)
    projector = Projector.from_state_dict(checkpoint.extras) if checkpoint.has_projector else None

    report = alignment_diagnostics(
        checkpoint.params,
        dataset.episodes,
        args.layer,
        projector=projector,
        kind=run_config.target_kind,
        probe_steps=args.steps or run_config.probe_steps,
        probe_lr=run_config.probe_lr,
        seed=args.seed,
    )

    def fmt(value: Optional[float]) -> str:
        return "" if value is None else f"{value:.6g}"

    print(
        f"probe_rmse={fmt(report.probe_rmse)} mean_cosine={fmt(report.mean_cosine)} "
        f"linear_cka={fmt(report.linear_cka)} centroid_distance={fmt(report.centroid_distance)} "
        f"samples={report.n_samples} layer={args.layer}"
    )
    if args.out:
        row = MetricsRow(
            run_id=f"{ckpt.parent.name}/probe-layer{args.layer}",
            iteration=run_config.iterations,
            probe_rmse=report.probe_rmse,
        )
        write_metrics(args.out, [row], append=True)
    return 0


def handle_plot(args: argparse.Namespace) -> int:
    """Render a metrics or ablation CSV to SVG."""
    summary = get_plot_service().plot(args.csv, args.out)
    print(f"chart={summary.path} kind={summary.kind} series={len(summary.series)}")
    return 0


def register_commands(subparsers: argparse._SubParsersAction) -> None:
    """
    Register every command with its arguments.

    Args:
        subparsers: Sub-parser collection of the root parser
    """
    gen = subparsers.add_parser("gen-data", help="generate an expert dataset")
    gen.add_argument("--config", default=None, help="experiment config file (defaults if omitted)")
    gen.add_argument("--out", required=True, help="dataset file to write")
    gen.set_defaults(handler=handle_gen_data)

    train = subparsers.add_parser("train", help="train a model")
    train.add_argument("--config", default=None)
    train.add_argument("--data", required=True, help="dataset file")
    train.add_argument("--out", required=True, help="run directory")
    train.set_defaults(handler=handle_train)

    evaluate = subparsers.add_parser("eval", help="closed-loop evaluation")
    evaluate.add_argument("--ckpt", default=None, help="checkpoint file")
    evaluate.add_argument("--trials", type=int, default=100)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--difficulty", choices=[d.value for d in Difficulty], default=None)
    evaluate.add_argument("--policy", choices=["vla", "expert"], default="vla")
    evaluate.set_defaults(handler=handle_eval)

    ablate = subparsers.add_parser("ablate", help="sweep one config axis")
    ablate.add_argument("--config", default=None)
    ablate.add_argument("--axis", required=True, choices=[a.value for a in AblationAxis])
    ablate.add_argument("--values", required=True, help="comma-separated values")
    ablate.add_argument("--out", default=None, help="sweep directory")
    ablate.add_argument("--no-probe", action="store_true", help="skip per-cell depth probes")
    ablate.set_defaults(handler=handle_ablate)

    probe = subparsers.add_parser("probe", help="depth probe and alignment diagnostics")
    probe.add_argument("--ckpt", required=True)
    probe.add_argument("--data", required=True)
    probe.add_argument("--layer", type=int, required=True)
    probe.add_argument("--steps", type=int, default=None, help="probe training steps")
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--out", default=None, help="append a diagnostics row to this CSV")
    probe.set_defaults(handler=handle_probe)

    plot = subparsers.add_parser("plot", help="render a CSV as an SVG chart")
    plot.add_argument("--csv", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(handler=handle_plot)

    logger.debug("CLI commands registered")
