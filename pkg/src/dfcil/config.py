"""Experiment configuration: dataclasses, YAML loading, presets, overrides.

A config file is YAML whose keys mirror the dataclass fields below; an
optional top-level ``preset`` key applies a named bundle before the file's
own values, and command-line ``--set a.b.c=value`` overrides beat both.
Unknown keys are rejected with the offending path named. The resolved config
is hashable and is written verbatim to ``config.lock`` in each run directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .synthesis import SynthesisConfig
from .training import AblationFlags, TrainConfig

DATA_ROOT_ENV = "DFCIL_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid configuration input; maps to CLI exit code 1."""


@dataclass
class DatasetSpec:
    """Which dataset to load; ``options`` feed the builder (e.g. blob sizes)."""

    name: str = "digits"
    path: str | None = None
    options: dict = field(default_factory=dict)

    def resolved_path(self) -> str | None:
        """Dataset directory, joined with the data-root env var if relative."""
        if self.path is None:
            return None
        root = os.environ.get(DATA_ROOT_ENV)
        p = Path(self.path)
        if root and not p.is_absolute():
            return str(Path(root) / p)
        return str(p)


@dataclass
class ProtocolSpec:
    name: str = "equal"
    n_tasks: int = 5
    seeds: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> None:
        if self.name not in ("equal", "half-then-equal"):
            raise ConfigError(f"unknown protocol {self.name!r} under protocol.name")
        if self.n_tasks < 1:
            raise ConfigError("protocol.n_tasks must be >= 1")
        if not self.seeds:
            raise ConfigError("protocol.seeds must list at least one seed")


@dataclass
class ModelSpec:
    backbone: str = "resnet-mini"


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    out_dir: str = "runs"

    def validate(self) -> None:
        self.protocol.validate()
        try:
            self.trainer.validate()
            self.synthesis.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        # round-trip through JSON so tuples become plain lists
        return json.loads(json.dumps(asdict(self), default=list))

    def hash(self) -> str:
        """Identity of the run's behavior; seeds and output paths excluded."""
        record = self.to_dict()
        record.pop("out_dir")
        record["protocol"].pop("seeds")
        text = json.dumps(record, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_TUPLE_FIELDS = {"seeds", "milestones"}
_NESTED = {
    "dataset": DatasetSpec,
    "protocol": ProtocolSpec,
    "model": ModelSpec,
    "trainer": TrainConfig,
    "synthesis": SynthesisConfig,
    "ablation": AblationFlags,
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping under {path or 'top level'}, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        child = f"{path}.{f.name}" if path else f.name
        if f.name in _NESTED:
            kwargs[f.name] = _build(_NESTED[f.name], value, child)
        elif f.name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{child} must be a list")
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value under {path or 'top level'}: {exc}") from exc


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


PRESETS: dict[str, dict] = {
    # Fast presets for the bundled datasets.
    "digits-desk": {
        "dataset": {"name": "digits"},
        "protocol": {"name": "equal", "n_tasks": 5, "seeds": [0, 1, 2]},
        "model": {"backbone": "resnet-mini"},
        "trainer": {"rrl_epochs": 20, "rrl_lr": 0.02, "milestones": [12, 17],
                    "batch_size": 64, "chr_epochs": 25, "chr_lr": 0.005},
        "synthesis": {"steps": 400, "batch_size": 64},
    },
    "blobs-smoke": {
        "dataset": {"name": "blobs",
                    "options": {"n_classes": 6, "per_class_train": 32,
                                "per_class_test": 12, "seed": 0}},
        "protocol": {"name": "equal", "n_tasks": 3, "seeds": [0]},
        "model": {"backbone": "resnet-mini"},
        "trainer": {"rrl_epochs": 8, "milestones": [6], "batch_size": 32,
                    "chr_epochs": 2},
        "synthesis": {"steps": 60, "batch_size": 32},
    },
    # Published-recipe presets; expect directory datasets and long runtimes.
    "cifar100-paper": {
        "dataset": {"name": "directory", "path": "cifar100"},
        "protocol": {"name": "equal", "n_tasks": 5, "seeds": [0, 1, 2]},
        "model": {"backbone": "resnet32"},
        "trainer": {"rrl_epochs": 160, "rrl_lr": 0.1, "milestones": [80, 120],
                    "weight_decay": 5e-4, "batch_size": 128,
                    "chr_epochs": 40, "chr_lr": 0.005},
        "synthesis": {"steps": 5000, "batch_size": 128},
    },
    "tiny200-paper": {
        "dataset": {"name": "directory", "path": "tiny-imagenet200"},
        "protocol": {"name": "equal", "n_tasks": 5, "seeds": [0, 1, 2]},
        "model": {"backbone": "resnet32"},
        "trainer": {"rrl_epochs": 160, "rrl_lr": 0.1, "milestones": [80, 120],
                    "weight_decay": 2e-4, "batch_size": 128,
                    "chr_epochs": 40, "chr_lr": 0.005},
        "synthesis": {"steps": 5000, "batch_size": 128},
    },
    "imagenet100-paper": {
        "dataset": {"name": "directory", "path": "imagenet100"},
        "protocol": {"name": "equal", "n_tasks": 5, "seeds": [0, 1, 2]},
        "model": {"backbone": "resnet18"},
        "trainer": {"rrl_epochs": 90, "rrl_lr": 0.1, "milestones": [30, 60],
                    "weight_decay": 1e-4, "batch_size": 64,
                    "chr_epochs": 30, "chr_lr": 0.005},
        "synthesis": {"steps": 10000, "batch_size": 64},
    },
}


def parse_override(text: str) -> tuple[list[str], object]:
    """Split one ``a.b.c=value`` override; the value is YAML-parsed."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key.split("."), value


def _set_path(tree: dict, parts: list[str], value) -> None:
    node = tree
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def resolve_config(file_data: dict | None = None,
                   overrides: list[str] | None = None) -> ExperimentConfig:
    """Combine defaults, optional preset, file values and overrides, strictly.

    Precedence: overrides > file values > preset values > dataclass defaults.
    """
    data = dict(file_data or {})
    preset_name = data.pop("preset", None)
    if preset_name is not None:
        preset = PRESETS.get(preset_name)
        if preset is None:
            raise ConfigError(f"unknown preset {preset_name!r} "
                              f"(available: {', '.join(sorted(PRESETS))})")
        data = _merge(preset, data)
    for text in overrides or []:
        parts, value = parse_override(text)
        _set_path(data, parts, value)
    config = _build(ExperimentConfig, data, "")
    config.validate()
    return config


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    file_data = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_data = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if file_data is None:
            file_data = {}
        if not isinstance(file_data, dict):
            raise ConfigError(f"{p} must contain a mapping at the top level")
    return resolve_config(file_data, overrides)


def write_lock(config: ExperimentConfig, path: str | Path) -> None:
    """Write the fully resolved config; reloading it reproduces the run."""
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def read_lock(path: str | Path) -> ExperimentConfig:
    return load_config(path)
