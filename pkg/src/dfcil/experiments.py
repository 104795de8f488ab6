"""Run orchestration: one seeded experiment per directory, with resume.

Directory layout per run:
    config.lock      resolved configuration (reloadable YAML)
    phase_{i}/       checkpoint + generator written after each phase
    metrics.csv      one row per completed phase
    events.log       timestamped progress lines
    report.json      final RunReport

A run interrupted between phases resumes from the last completed phase and,
because every random stream is derived from (seed, phase, stream), finishes
with results identical to an uninterrupted run.
"""

from __future__ import annotations

import time
from pathlib import Path

import torch

from .config import ExperimentConfig, write_lock
from .data import ImageDataset, load_dataset
from .metrics import (RunReport, append_metrics_row, average_incremental,
                      read_metrics_rows, save_report)
from .models import IncrementalClassifier, build_backbone
from .tasks import TaskSchedule, split_equal, split_half_then_equal
from .training import (PhaseState, derive_seed, load_checkpoint, run_phase,
                       save_checkpoint, save_generator, stream_generator)


def build_schedule(config: ExperimentConfig, dataset: ImageDataset,
                   seed: int) -> TaskSchedule:
    if config.protocol.name == "equal":
        return split_equal(dataset.n_classes, config.protocol.n_tasks, seed)
    return split_half_then_equal(dataset.n_classes, config.protocol.n_tasks, seed)


def load_experiment_dataset(config: ExperimentConfig) -> ImageDataset:
    spec = config.dataset
    return load_dataset(spec.name, path=spec.resolved_path(), **spec.options)


def build_model(config: ExperimentConfig, dataset: ImageDataset,
                schedule: TaskSchedule, seed: int) -> IncrementalClassifier:
    # module default init (convs, BN) draws from the global RNG; seed it
    # before any module is constructed so runs are process-independent
    torch.manual_seed(derive_seed(seed, 0, "model-init"))
    extractor = build_backbone(config.model.backbone, dataset.input_shape)
    init_gen = stream_generator(seed, 0, "head-init")
    return IncrementalClassifier(extractor, schedule.task_sizes[0], init_gen,
                                 normalize_mean=dataset.normalize_mean,
                                 normalize_std=dataset.normalize_std)


class EventLog:
    """Append-only timestamped progress log; best-effort, never raises."""

    def __init__(self, path: Path):
        self.path = path

    def write(self, message: str) -> None:
        stamp = time.strftime("%Y-%m-%d %H:%M:%S")
        try:
            with self.path.open("a") as fh:
                fh.write(f"{stamp} {message}\n")
        except OSError:
            pass


def _completed_phases(run_dir: Path) -> int:
    done = 0
    while (run_dir / f"phase_{done + 1}" / "checkpoint").is_file():
        done += 1
    return done


def run_experiment(config: ExperimentConfig, seed: int,
                   run_dir: str | Path) -> RunReport:
    """Execute (or resume) all phases of one seeded run and persist results."""
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log = EventLog(run_dir / "events.log")
    config_hash = config.hash()
    write_lock(config, run_dir / "config.lock")

    dataset = load_experiment_dataset(config)
    schedule = build_schedule(config, dataset, seed)
    n_tasks = schedule.n_tasks

    completed = _completed_phases(run_dir)
    metrics_path = run_dir / "metrics.csv"
    if completed:
        model = build_model(config, dataset, schedule, seed)
        state = load_checkpoint(run_dir / f"phase_{completed}" / "checkpoint",
                                model, config_hash)
        # keep exactly one metrics row per completed phase (a crash can leave
        # a row whose checkpoint never landed)
        rows = {}
        if metrics_path.exists():
            for row in read_metrics_rows(metrics_path):
                if row["phase"] <= completed:
                    rows.setdefault(row["phase"], row)
        if sorted(rows) != list(range(1, completed + 1)):
            raise RuntimeError(f"metrics.csv does not cover phases 1..{completed}")
        metrics_path.unlink(missing_ok=True)
        for phase in range(1, completed + 1):
            row = rows[phase]
            append_metrics_row(metrics_path, phase, row["n_learned_classes"],
                               row["A_i"], row["cumulative_avg"], row["timestamp"])
        accuracies = [rows[p]["A_i"] for p in range(1, completed + 1)]
        phase_seconds = [0.0] * completed
        log.write(f"resuming seed {seed} after phase {completed}")
    else:
        if metrics_path.exists():
            metrics_path.unlink()
        state = PhaseState(model=build_model(config, dataset, schedule, seed))
        accuracies = []
        phase_seconds = []
        log.write(f"starting seed {seed}: {dataset.name}, "
                  f"{n_tasks} tasks, ablation {config.trainer.ablation.as_dict()}")

    for phase in range(completed + 1, n_tasks + 1):
        result = run_phase(state, schedule, dataset, config.trainer,
                           config.synthesis, phase, seed)
        accuracies.append(result.accuracy)
        phase_seconds.append(result.seconds)

        phase_dir = run_dir / f"phase_{phase}"
        phase_dir.mkdir(exist_ok=True)
        # metrics row lands before the checkpoint: resume treats the
        # checkpoint as the commit point and drops any orphaned row
        append_metrics_row(metrics_path, phase, result.n_learned_classes,
                           result.accuracy, average_incremental(accuracies))
        if state.generator is not None:
            save_generator(phase_dir / "generator", state.generator)
        save_checkpoint(phase_dir / "checkpoint", state, config_hash)
        log.write(f"phase {phase}/{n_tasks}: classes {result.n_learned_classes}, "
                  f"accuracy {result.accuracy:.4f}, {result.seconds:.1f}s")

    report = RunReport(
        dataset=dataset.name,
        protocol=config.protocol.name,
        n_tasks=n_tasks,
        seed=seed,
        ablation=config.trainer.ablation.as_dict(),
        accuracies=accuracies,
        phase_seconds=phase_seconds,
        config_hash=config_hash,
    )
    save_report(report, run_dir / "report.json")
    log.write(f"finished seed {seed}: last {report.last_accuracy:.4f}, "
              f"average {report.average_accuracy:.4f}")
    return report


def run_seeds(config: ExperimentConfig, out_dir: str | Path,
              seeds: list[int] | None = None,
              label: str = "run") -> list[RunReport]:
    """Run every seed of the protocol under out_dir/<label>-seed{n}."""
    out_dir = Path(out_dir)
    chosen = list(seeds) if seeds is not None else list(config.protocol.seeds)
    reports = []
    for seed in chosen:
        reports.append(run_experiment(config, seed, out_dir / f"{label}-seed{seed}"))
    return reports
