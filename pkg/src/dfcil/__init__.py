"""Data-free class-incremental learning with relation-guided distillation."""

from .config import ConfigError, ExperimentConfig, load_config, resolve_config
from .data import ImageDataset, load_dataset
from .experiments import build_model, build_schedule, run_experiment, run_seeds
from .losses import (
    ScaleFactors,
    adaptive_factors,
    gce_loss,
    hkd_loss,
    lce_loss,
    relational_angle_loss,
    rkd_loss,
    rrl_loss,
)
from .metrics import RunReport, aggregate_runs, average_incremental
from .models import IncrementalClassifier, ModelSnapshot, build_backbone
from .synthesis import GeneratorNet, SynthesisConfig, sample, train_synthesizer
from .tasks import TaskSchedule, split_equal, split_half_then_equal
from .training import AblationFlags, PhaseState, TrainConfig, run_phase

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "ConfigError",
    "ExperimentConfig",
    "GeneratorNet",
    "ImageDataset",
    "IncrementalClassifier",
    "ModelSnapshot",
    "PhaseState",
    "RunReport",
    "ScaleFactors",
    "SynthesisConfig",
    "TaskSchedule",
    "TrainConfig",
    "adaptive_factors",
    "aggregate_runs",
    "average_incremental",
    "build_backbone",
    "build_model",
    "build_schedule",
    "gce_loss",
    "hkd_loss",
    "lce_loss",
    "load_config",
    "load_dataset",
    "relational_angle_loss",
    "resolve_config",
    "rkd_loss",
    "rrl_loss",
    "run_experiment",
    "run_phase",
    "run_seeds",
    "sample",
    "split_equal",
    "split_half_then_equal",
    "train_synthesizer",
    "__version__",
]
