"""
Spatial Forcing Lab - CSV Utilities

Metrics and ablation-summary rows, written as UTF-8 CSV with LF line endings
and floats printed to 6 significant digits.
"""
import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Optional, Sequence, Type, TypeVar

from src.exceptions import CsvFormatError, StorageError


@dataclass
class MetricsRow:
    """One evaluation point of a training run (or a diagnostics row)."""
    run_id: str
    iteration: int
    l_action: Optional[float] = None
    l_align: Optional[float] = None
    total_loss: Optional[float] = None
    eval_success_rate: Optional[float] = None
    probe_rmse: Optional[float] = None
    wall_ms: Optional[float] = None


@dataclass
class AblationRow:
    """One ablation cell next to its alpha = 0 reference run."""
    axis: str
    axis_value: str
    run_id: str
    status: str
    final_success_rate: Optional[float] = None
    iterations_to_threshold: Optional[int] = None
    probe_rmse: Optional[float] = None
    baseline_final_success_rate: Optional[float] = None
    baseline_iterations_to_threshold: Optional[int] = None
    error: Optional[str] = None


Row = TypeVar("Row", MetricsRow, AblationRow)

METRICS_HEADER = [f.name for f in fields(MetricsRow)]
ABLATION_HEADER = [f.name for f in fields(AblationRow)]


def format_value(value: Any) -> str:
    """Render a cell: empty for None, 6 significant digits for floats."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.6g}"
    return str(value)


def render_csv(rows: Sequence[Row], header: list[str]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        values = asdict(row)
        writer.writerow([format_value(values[name]) for name in header])
    return buffer.getvalue()


def write_csv(path: str | Path, rows: Sequence[Row], header: list[str], append: bool = False) -> None:
    """Write (or append) rows; the header is emitted only for a new file."""
    target = Path(path)
    text = render_csv(rows, header)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        if append and target.exists() and target.stat().st_size > 0:
            text = text.split("\n", 1)[1]
            with target.open("a", encoding="utf-8", newline="") as f:
                f.write(text)
        else:
            target.write_bytes(text.encode("utf-8"))
    except OSError as e:
        raise StorageError(f"cannot write CSV ({e.strerror})", path=str(path)) from e


def write_metrics(path: str | Path, rows: Sequence[MetricsRow], append: bool = False) -> None:
    write_csv(path, rows, METRICS_HEADER, append=append)


def write_ablation_summary(path: str | Path, rows: Sequence[AblationRow]) -> None:
    write_csv(path, rows, ABLATION_HEADER)


def _parse_cell(raw: str, kind: Any, lineno: int, name: str) -> Any:
    if raw == "":
        return None
    target = kind
    if getattr(kind, "__origin__", None) is not None:
        target = next(a for a in kind.__args__ if a is not type(None))
    try:
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
    except ValueError:
        raise CsvFormatError(f"line {lineno}: column '{name}' is not a number: {raw!r}") from None
    return raw


def _read_rows(path: str | Path, row_type: Type[Row]) -> list[Row]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read CSV ({e.strerror})", path=str(path)) from e
    except UnicodeDecodeError as e:
        raise CsvFormatError(f"{path}: not UTF-8 text") from e
    return parse_rows(text, row_type)


def parse_rows(text: str, row_type: Type[Row]) -> list[Row]:
    """
    Parse CSV text into rows of ``row_type``.

    Raises:
        CsvFormatError: Header or field mismatch (naming the line), or no rows
    """
    expected = [f.name for f in fields(row_type)]
    hints = {f.name: f.type for f in fields(row_type)}
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError("no rows") from None
    if header != expected:
        raise CsvFormatError(f"line 1: unexpected header {header}")

    rows: list[Row] = []
    for cells in reader:
        lineno = reader.line_num
        if not cells:
            continue
        if len(cells) != len(expected):
            raise CsvFormatError(f"line {lineno}: expected {len(expected)} fields, got {len(cells)}")
        values = {
            name: _parse_cell(raw, hints[name], lineno, name)
            for name, raw in zip(expected, cells)
        }
        for name in expected:
            if values[name] is None and name in ("run_id", "iteration", "axis", "axis_value", "status"):
                raise CsvFormatError(f"line {lineno}: column '{name}' is required")
        rows.append(row_type(**values))
    if not rows:
        raise CsvFormatError("no rows")
    return rows


def read_metrics(path: str | Path) -> list[MetricsRow]:
    return _read_rows(path, MetricsRow)


def read_ablation_summary(path: str | Path) -> list[AblationRow]:
    return _read_rows(path, AblationRow)


def detect_schema(path: str | Path) -> Type[MetricsRow] | Type[AblationRow]:
    """Pick the row type from the header line."""
    try:
        with Path(path).open(encoding="utf-8", newline="") as f:
            header = next(csv.reader(f), None)
    except OSError as e:
        raise StorageError(f"cannot read CSV ({e.strerror})", path=str(path)) from e
    if header is None:
        raise CsvFormatError("no rows")
    if header == METRICS_HEADER:
        return MetricsRow
    if header == ABLATION_HEADER:
        return AblationRow
    raise CsvFormatError("line 1: header matches neither the metrics nor the ablation schema")
