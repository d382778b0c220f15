"""Experiment reports and their JSON / CSV / markdown renderings."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class ExperimentReport:
    config_hash: str = ""
    seed: int = 0
    metrics: dict = field(default_factory=dict)
    detection: dict = field(default_factory=dict)
    fps: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)
    sparsity: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        return cls(**json.loads(Path(path).read_text()))


def _clean(value):
    """JSON-safe copy: NaN becomes None, numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def fmt(value, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def flat_metrics(report: ExperimentReport) -> list[tuple[str, str]]:
    """(key, value) rows for metrics.csv, sorted for stable output."""
    rows = []

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k in sorted(obj):
                walk(f"{prefix}.{k}" if prefix else str(k), obj[k])
        elif isinstance(obj, (list, tuple)):
            rows.append((prefix, ";".join(fmt(v) for v in obj)))
        else:
            rows.append((prefix, fmt(obj)))

    data = report.to_dict()
    for section in ("metrics", "detection", "fps", "parameters", "sparsity"):
        walk(section, data[section])
    rows.append(("config_hash", report.config_hash))
    rows.append(("seed", str(report.seed)))
    return rows


def write_csv(path, header: list[str], rows: list) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def write_metrics_csv(path, report: ExperimentReport) -> Path:
    return write_csv(path, ["metric", "value"], flat_metrics(report))


def write_loss_csv(path, losses: list[float]) -> Path:
    return write_csv(path, ["epoch", "loss"], [(i, f"{v:.8f}") for i, v in enumerate(losses)])


def markdown_table(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(" --- " for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(fmt(v) if not isinstance(v, str) else v for v in row) + " |")
    return "\n".join(lines) + "\n"
