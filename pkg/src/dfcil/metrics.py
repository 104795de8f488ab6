"""Incremental-learning metrics, per-run reports and cross-seed aggregation.

A_i is cumulative test accuracy after phase i over every class learned so
far; the average incremental accuracy is the arithmetic mean of A_1..A_N.
Accuracies are stored as fractions in [0, 1]; tables format them in percent.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path


class AccuracyAccumulator:
    """Streaming correct/total counter; equals one-shot accuracy exactly."""

    def __init__(self):
        self.correct = 0
        self.total = 0

    def update(self, predictions, labels) -> None:
        if len(predictions) != len(labels):
            raise ValueError("predictions and labels differ in length")
        self.correct += int((predictions == labels).sum())
        self.total += int(len(labels))

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise RuntimeError("no samples accumulated")
        return self.correct / self.total


def average_incremental(accuracies: list[float]) -> float:
    """Arithmetic mean of the per-phase accuracies A_1..A_N."""
    if not accuracies:
        raise ValueError("cannot average an empty accuracy list")
    if any(not 0.0 <= a <= 1.0 for a in accuracies):
        raise ValueError("accuracies must lie in [0, 1]")
    return sum(accuracies) / len(accuracies)


@dataclass
class RunReport:
    """Everything reported for one seeded run of one configuration."""

    dataset: str
    protocol: str
    n_tasks: int
    seed: int
    ablation: dict[str, bool]
    accuracies: list[float] = field(default_factory=list)
    phase_seconds: list[float] = field(default_factory=list)
    config_hash: str = ""

    @property
    def last_accuracy(self) -> float:
        if not self.accuracies:
            raise RuntimeError("run has no completed phases")
        return self.accuracies[-1]

    @property
    def average_accuracy(self) -> float:
        return average_incremental(self.accuracies)

    def group_key(self) -> tuple:
        """Configuration identity; runs differing only by seed share a key."""
        return (self.dataset, self.protocol, self.n_tasks,
                tuple(sorted(self.ablation.items())), self.config_hash)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        return RunReport(**json.loads(text))


def save_report(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n")


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_json(Path(path).read_text())


def format_percent(mean: float, std: float | None) -> str:
    """Render a fraction as percent: "52.00 ± 2.00", std omitted if None."""
    if std is None:
        return f"{mean * 100:.2f}"
    return f"{mean * 100:.2f} ± {std * 100:.2f}"


def aggregate_runs(reports: list[RunReport]) -> dict[str, object]:
    """Mean and sample standard deviation (n-1) across seeds of one config.

    All reports must share a configuration (only seeds may differ); for a
    single run the std is omitted from the formatted strings.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = {r.group_key() for r in reports}
    if len(keys) > 1:
        raise ValueError(f"mixed configurations in one group: {len(keys)} distinct")
    phases = {len(r.accuracies) for r in reports}
    if len(phases) > 1:
        raise ValueError("runs completed different phase counts")

    def stats(values: list[float]) -> tuple[float, float | None]:
        mean = sum(values) / len(values)
        std = statistics.stdev(values) if len(values) > 1 else None
        return mean, std

    last = stats([r.last_accuracy for r in reports])
    avg = stats([r.average_accuracy for r in reports])
    per_phase = [stats([r.accuracies[i] for r in reports]) for i in range(phases.pop())]
    return {
        "n_runs": len(reports),
        "seeds": sorted(r.seed for r in reports),
        "last": last,
        "average": avg,
        "per_phase": per_phase,
        "last_text": format_percent(*last),
        "average_text": format_percent(*avg),
        "per_phase_text": [format_percent(m, s) for m, s in per_phase],
    }


METRICS_COLUMNS = ("phase", "n_learned_classes", "A_i", "cumulative_avg", "timestamp")


def append_metrics_row(path: str | Path, phase: int, n_learned_classes: int,
                       accuracy: float, cumulative_avg: float,
                       timestamp: float | None = None) -> None:
    """Append one phase record to metrics.csv, writing the header if new."""
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow([phase, n_learned_classes, f"{accuracy:.6f}",
                         f"{cumulative_avg:.6f}",
                         f"{time.time() if timestamp is None else timestamp:.3f}"])


def read_metrics_rows(path: str | Path) -> list[dict[str, float]]:
    """Parse metrics.csv, skipping a trailing partial line if one exists."""
    rows = []
    with Path(path).open(newline="") as fh:
        for record in csv.DictReader(fh):
            if any(record.get(c) in (None, "") for c in METRICS_COLUMNS):
                continue
            rows.append({
                "phase": int(record["phase"]),
                "n_learned_classes": int(record["n_learned_classes"]),
                "A_i": float(record["A_i"]),
                "cumulative_avg": float(record["cumulative_avg"]),
                "timestamp": float(record["timestamp"]),
            })
    return rows
