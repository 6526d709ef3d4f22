"""
Spatial Forcing Lab - Plot Service

Renders metrics and ablation CSVs as self-contained SVG charts.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import structlog  # noqa: E402

from src.exceptions import StorageError  # noqa: E402
from src.utils.csv_utils import (  # noqa: E402
    AblationRow,
    MetricsRow,
    detect_schema,
    read_ablation_summary,
    read_metrics,
)


logger = structlog.get_logger(__name__)


@dataclass
class PlotSummary:
    path: Path
    kind: str
    series: list[str]


class PlotService:
    """Line charts for success-vs-iteration curves, bar charts for ablation summaries."""

    def __init__(self):
        plt.rcParams["svg.fonttype"] = "none"
        plt.rcParams["svg.hashsalt"] = "spatial-forcing-lab"

    def plot(self, csv_path: str | Path, out_path: str | Path) -> PlotSummary:
        """
        Render ``csv_path`` to an SVG at ``out_path``.

        Raises:
            CsvFormatError: Malformed CSV (names the line) or no rows
        """
        schema = detect_schema(csv_path)
        if schema is MetricsRow:
            fig, summary = self._line_chart(read_metrics(csv_path), Path(out_path))
        else:
            fig, summary = self._bar_chart(read_ablation_summary(csv_path), Path(out_path))

        try:
            Path(out_path).parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out_path, format="svg", metadata={"Date": None})
        except OSError as e:
            raise StorageError(f"cannot write chart ({e.strerror})", path=str(out_path)) from e
        finally:
            plt.close(fig)

        logger.info("Chart written", path=str(out_path), kind=summary.kind, series=len(summary.series))
        return summary

    def _line_chart(self, rows: list[MetricsRow], out_path: Path) -> tuple[plt.Figure, PlotSummary]:
        curves: dict[str, list[tuple[int, float]]] = {}
        for row in rows:
            if row.eval_success_rate is not None:
                curves.setdefault(row.run_id, []).append((row.iteration, row.eval_success_rate))

        fig, ax = plt.subplots(figsize=(6, 4))
        for run_id, points in curves.items():
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=run_id)
        ax.set_xlabel("training iteration")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(True, alpha=0.3)
        if curves:
            ax.legend()
        fig.tight_layout()
        return fig, PlotSummary(path=out_path, kind="line", series=list(curves))

    def _bar_chart(self, rows: list[AblationRow], out_path: Path) -> tuple[plt.Figure, PlotSummary]:
        labels = [row.axis_value for row in rows]
        heights = [row.final_success_rate or 0.0 for row in rows]
        baseline: Optional[float] = next(
            (row.baseline_final_success_rate for row in rows if row.baseline_final_success_rate is not None),
            None,
        )

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(labels, heights, color="tab:blue", label="final success rate")
        if baseline is not None:
            ax.axhline(baseline, color="tab:gray", linestyle="--", label="alpha = 0 reference")
        ax.set_xlabel(rows[0].axis)
        ax.set_ylabel("success rate")
        ax.set_ylim(0.0, 1.02)
        ax.legend()
        fig.tight_layout()
        return fig, PlotSummary(path=out_path, kind="bar", series=labels)


_plot_service: Optional[PlotService] = None


def get_plot_service() -> PlotService:
    """Get or create the shared plot service."""
    global _plot_service
    if _plot_service is None:
        _plot_service = PlotService()
    return _plot_service
