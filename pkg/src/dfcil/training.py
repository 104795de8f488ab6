"""Three-stage incremental trainer.

Each phase after the first runs: (a) fit an image synthesizer against the
frozen previous model; (b) grow the head and train extractor + head +
relation transforms with the combined representation loss (local CE on new
data, response distillation on synthetic data, relational angle distillation
on new data, adaptively weighted); (c) refine the classification head alone
on mixed real/synthetic batches with class-balanced CE. Phase 1 is plain
supervised training. All randomness is derived from (run seed, phase,
stream) so a resumed run reproduces an uninterrupted one bit-exactly.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
from torch import nn

from . import losses
from .data import ImageDataset, augment_batch, batch_positions, normalize
from .losses import RelationTransforms, ScaleFactors, adaptive_factors
from .metrics import AccuracyAccumulator
from .models import (IncrementalClassifier, ModelSnapshot, argmax_lowest,
                     expand_head, snapshot)
from .synthesis import GeneratorNet, SynthesisConfig, sample, train_synthesizer
from .tasks import TaskSchedule, cumulative_test_view, task_train_view


def derive_seed(base_seed: int, *parts) -> int:
    """Stable 63-bit seed for a named random stream of a run."""
    text = ":".join([str(base_seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def stream_generator(base_seed: int, *parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(base_seed, *parts))


@dataclass
class AblationFlags:
    """Switches that remove or replace individual training components.

    ``naive`` disables the entire old-task machinery (no synthesizer, no
    distillation, no head refinement): plain fine-tuning on each new task.
    """

    no_rkd: bool = False
    no_hkd: bool = False
    no_chr: bool = False
    global_ce: bool = False
    baseline_kd: bool = False
    naive: bool = False

    def as_dict(self) -> dict[str, bool]:
        return asdict(self)


@dataclass
class TrainConfig:
    """Optimization settings for both training stages of every phase."""

    rrl_epochs: int = 20
    rrl_lr: float = 0.02
    milestones: tuple[int, ...] = (12, 17)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    chr_epochs: int = 10
    chr_lr: float = 0.005
    lambda_lce: float = 0.5
    lambda_hkd: float = 0.15
    lambda_rkd: float = 0.5
    kd_tau: float = 2.0
    rkd_max_triplets: int | None = 300_000
    grad_clip: float | None = 5.0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if self.rrl_epochs < 1 or self.chr_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        for name in ("rrl_lr", "chr_lr", "lr_decay", "kd_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be nonnegative")
        for name in ("lambda_lce", "lambda_hkd", "lambda_rkd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.rkd_max_triplets is not None and self.rkd_max_triplets < 1:
            raise ValueError("rkd_max_triplets must be >= 1 or None")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")


@dataclass
class PhaseState:
    """Mutable per-run training state; one instance lives across phases."""

    model: IncrementalClassifier
    completed: int = 0
    snapshot: ModelSnapshot | None = None
    generator: GeneratorNet | None = None
    transforms: RelationTransforms | None = None
    factors: ScaleFactors | None = None
    counters: torch.Tensor | None = None

    def check_invariants(self) -> None:
        if self.completed <= 1:
            return
        if self.snapshot is None:
            raise RuntimeError("phases past the first require an old-model snapshot")


@dataclass(frozen=True)
class PhaseResult:
    phase: int
    n_learned_classes: int
    accuracy: float
    seconds: float


def set_extractor_bn_eval(model: IncrementalClassifier) -> None:
    """Put extractor batch-norm layers in eval mode.

    Used during incremental phases: normalization then comes from the frozen
    running statistics, so a model that equals its snapshot produces outputs
    identical to the snapshot's, and running stats stay untouched. Affine
    batch-norm parameters remain trainable.
    """
    for module in model.extractor.modules():
        if isinstance(module, nn.BatchNorm2d):
            module.eval()


def _prep_real_batch(view, positions, dataset: ImageDataset,
                     aug_gen: torch.Generator | None):
    images, labels = view.batch(positions)
    if aug_gen is not None:
        images = augment_batch(images, dataset.augment, aug_gen)
    return normalize(images, dataset.normalize_mean, dataset.normalize_std), labels


def _sgd(params, lr: float, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def _clip_and_step(optimizer: torch.optim.Optimizer, config: TrainConfig) -> None:
    if config.grad_clip is not None:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        nn.utils.clip_grad_norm_(params, config.grad_clip)
    optimizer.step()


def rrl_step(state: PhaseState, new_images: torch.Tensor, new_local_labels: torch.Tensor,
             new_global_labels: torch.Tensor, optimizer: torch.optim.Optimizer,
             config: TrainConfig, sample_gen: torch.Generator,
             rkd_gen: torch.Generator | None = None) -> dict[str, float]:
    """One optimizer step of representation learning on a new-task batch.

    Returns the logged loss breakdown: raw component values plus their
    effectively weighted contributions; ``total`` is exactly the optimized
    scalar and equals the sum of the weighted components.
    """
    model = state.model
    flags = config.ablation
    breakdown = {"lce_raw": 0.0, "hkd_raw": 0.0, "rkd_raw": 0.0,
                 "lce": 0.0, "hkd": 0.0, "rkd": 0.0}

    if flags.naive:
        logits = model(new_images)
        total = losses.lce_loss(logits, new_global_labels)
        breakdown["lce_raw"] = float(total.detach())
        breakdown["lce"] = breakdown["lce_raw"]
        optimizer.zero_grad()
        total.backward()
        _clip_and_step(optimizer, config)
        breakdown["total"] = breakdown["lce"]
        return breakdown

    if state.snapshot is None or state.generator is None:
        raise RuntimeError("representation learning needs a snapshot and a generator")
    factors = state.factors
    if factors is None:
        raise RuntimeError("scale factors not prepared for this phase")

    synthetic = sample(state.generator, state.snapshot, new_images.shape[0], sample_gen)

    feats_new = model.features(new_images)
    if flags.global_ce:
        ce = losses.lce_loss(model.head(feats_new), new_global_labels)
    else:
        ce = losses.lce_loss(model.head.new_logits(feats_new), new_local_labels)
    breakdown["lce_raw"] = float(ce.detach())
    breakdown["lce"] = factors.effective_lce * breakdown["lce_raw"]
    total = factors.effective_lce * ce

    if not flags.no_hkd:
        n_old = state.snapshot.class_count
        student_old = model.head.old_logits(model.features(synthetic.images))
        teacher_old = state.snapshot.logits(synthetic.images)
        if flags.baseline_kd:
            hkd = losses.kd_baseline(teacher_old, student_old, config.kd_tau)
        else:
            hkd = losses.hkd_loss(teacher_old, student_old, n_old)
        breakdown["hkd_raw"] = float(hkd.detach())
        breakdown["hkd"] = factors.effective_hkd * breakdown["hkd_raw"]
        total = total + factors.effective_hkd * hkd

    if not flags.no_rkd:
        if state.transforms is None:
            raise RuntimeError("relation transforms not prepared for this phase")
        rkd = losses.rkd_loss(new_images, state.snapshot, model, state.transforms,
                              max_triplets=config.rkd_max_triplets, generator=rkd_gen)
        breakdown["rkd_raw"] = float(rkd.detach())
        breakdown["rkd"] = factors.effective_rkd * breakdown["rkd_raw"]
        total = total + factors.effective_rkd * rkd

    optimizer.zero_grad()
    total.backward()
    _clip_and_step(optimizer, config)
    breakdown["total"] = breakdown["lce"] + breakdown["hkd"] + breakdown["rkd"]
    return breakdown


def chr_loop(state: PhaseState, schedule: TaskSchedule, dataset: ImageDataset,
             config: TrainConfig, phase: int, run_seed: int) -> torch.Tensor:
    """Head-only refinement on mixed real/synthetic batches.

    Per-class counters tally every label presented (updated before each loss
    evaluation); the extractor and transforms receive no updates. Returns the
    final counters.
    """
    model = state.model
    if state.snapshot is None or state.generator is None:
        raise RuntimeError("head refinement needs a snapshot and a generator")
    view = task_train_view(schedule, dataset, phase, "global")

    counters = torch.zeros(model.head.class_count, dtype=torch.long)
    state.counters = counters
    optimizer = _sgd([model.head.weight], config.chr_lr, config)
    batch_gen = stream_generator(run_seed, phase, "chr-batches")
    aug_gen = stream_generator(run_seed, phase, "chr-augment")
    sample_gen = stream_generator(run_seed, phase, "chr-sample")

    model.train()
    set_extractor_bn_eval(model)
    for p in model.extractor.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(config.chr_epochs):
            for positions in batch_positions(len(view), config.batch_size, batch_gen):
                x_new, y_new = _prep_real_batch(view, positions, dataset, aug_gen)
                synth = sample(state.generator, state.snapshot, x_new.shape[0], sample_gen)
                x = torch.cat([x_new, synth.images])
                y = torch.cat([y_new, synth.labels])
                counters.scatter_add_(0, y, torch.ones_like(y))
                loss = losses.gce_loss(model.head(model.features(x)), y, counters)
                optimizer.zero_grad()
                loss.backward()
                _clip_and_step(optimizer, config)
    finally:
        for p in model.extractor.parameters():
            p.requires_grad_(True)
    return counters


def _rrl_loop(state: PhaseState, schedule: TaskSchedule, dataset: ImageDataset,
              config: TrainConfig, phase: int, run_seed: int) -> list[dict[str, float]]:
    model = state.model
    view_local = task_train_view(schedule, dataset, phase, "local")
    offset = schedule.task_offset(phase)

    params = list(model.parameters())
    if state.transforms is not None and not config.ablation.naive:
        params += list(state.transforms.parameters())
    optimizer = _sgd(params, config.rrl_lr, config)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(config.milestones), gamma=config.lr_decay)

    batch_gen = stream_generator(run_seed, phase, "rrl-batches")
    aug_gen = stream_generator(run_seed, phase, "rrl-augment")
    sample_gen = stream_generator(run_seed, phase, "rrl-sample")
    rkd_gen = stream_generator(run_seed, phase, "rrl-triplets")

    log = []
    model.train()
    set_extractor_bn_eval(model)
    for _ in range(config.rrl_epochs):
        for positions in batch_positions(len(view_local), config.batch_size, batch_gen):
            x, y_local = _prep_real_batch(view_local, positions, dataset, aug_gen)
            log.append(rrl_step(state, x, y_local, y_local + offset, optimizer,
                                config, sample_gen, rkd_gen))
        scheduler.step()
    return log


def refresh_bn_stats(state: PhaseState, schedule: TaskSchedule, dataset: ImageDataset,
                     config: TrainConfig, phase: int, run_seed: int) -> None:
    """Re-estimate extractor batch-norm statistics after representation learning.

    Normalization layers stay in eval mode throughout incremental training so
    their running statistics would otherwise describe first-task data forever,
    which misleads both evaluation-time normalization and the next phase's
    statistic-matching synthesis. One no-grad pass over mixed real-new and
    synthetic-old batches replaces them with a plain average for the current
    data mixture. No trainable parameter changes.
    """
    model = state.model
    if state.snapshot is None or state.generator is None:
        raise RuntimeError("statistic refresh needs a snapshot and a generator")
    view = task_train_view(schedule, dataset, phase, "local")
    batch_gen = stream_generator(run_seed, phase, "bn-refresh")
    aug_gen = stream_generator(run_seed, phase, "bn-refresh-augment")
    sample_gen = stream_generator(run_seed, phase, "bn-refresh-sample")

    bn_layers = [m for m in model.extractor.modules() if isinstance(m, nn.BatchNorm2d)]
    saved_momentum = [m.momentum for m in bn_layers]
    for m in bn_layers:
        m.momentum = None  # cumulative averaging over the refresh batches
        m.num_batches_tracked.zero_()
        m.train()
    try:
        with torch.no_grad():
            for positions in batch_positions(len(view), config.batch_size, batch_gen):
                x_new, _ = _prep_real_batch(view, positions, dataset, aug_gen)
                synth = sample(state.generator, state.snapshot, x_new.shape[0], sample_gen)
                model.extractor(torch.cat([x_new, synth.images]))
    finally:
        for m, momentum in zip(bn_layers, saved_momentum):
            m.momentum = momentum
            m.eval()


def _first_phase(state: PhaseState, schedule: TaskSchedule, dataset: ImageDataset,
                 config: TrainConfig, run_seed: int) -> None:
    model = state.model
    view = task_train_view(schedule, dataset, 1, "global")
    optimizer = _sgd(model.parameters(), config.rrl_lr, config)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(config.milestones), gamma=config.lr_decay)
    batch_gen = stream_generator(run_seed, 1, "rrl-batches")
    aug_gen = stream_generator(run_seed, 1, "rrl-augment")

    model.train()
    for _ in range(config.rrl_epochs):
        for positions in batch_positions(len(view), config.batch_size, batch_gen):
            x, y = _prep_real_batch(view, positions, dataset, aug_gen)
            loss = losses.lce_loss(model(x), y)
            optimizer.zero_grad()
            loss.backward()
            _clip_and_step(optimizer, config)
        scheduler.step()


def run_phase(state: PhaseState, schedule: TaskSchedule, dataset: ImageDataset,
              config: TrainConfig, synth_config: SynthesisConfig, phase: int,
              run_seed: int) -> PhaseResult:
    """Execute one full phase in order; phases must be run 1, 2, ..., N."""
    if phase != state.completed + 1:
        raise RuntimeError(f"phase {phase} requested but {state.completed} completed; "
                           "phases must run in order")
    config.validate()
    started = time.time()
    flags = config.ablation

    if phase == 1:
        _first_phase(state, schedule, dataset, config, run_seed)
    else:
        if state.snapshot is None:
            raise RuntimeError("no snapshot of the previous model")
        if flags.naive:
            state.generator = None
            state.transforms = None
            state.factors = None
        else:
            state.generator = train_synthesizer(
                state.snapshot, synth_config, seed=derive_seed(run_seed, phase, "synth"))
            n_prev = state.snapshot.class_count
            n_new = schedule.task_sizes[phase - 1]
            state.factors = adaptive_factors(
                n_prev, n_new,
                (config.lambda_lce, config.lambda_hkd, config.lambda_rkd))
            state.transforms = RelationTransforms(
                state.model.extractor.embed_dim,
                stream_generator(run_seed, phase, "transforms"))
        expand_head(state.model.head, schedule.task_sizes[phase - 1],
                    stream_generator(run_seed, phase, "head-init"))
        _rrl_loop(state, schedule, dataset, config, phase, run_seed)
        if not flags.naive:
            refresh_bn_stats(state, schedule, dataset, config, phase, run_seed)
        if not flags.no_chr and not flags.naive:
            chr_loop(state, schedule, dataset, config, phase, run_seed)

    state.snapshot = snapshot(state.model, phase)
    state.completed = phase
    accuracy = evaluate_phase(state.model, schedule, dataset, phase)
    return PhaseResult(phase=phase,
                       n_learned_classes=state.model.head.class_count,
                       accuracy=accuracy,
                       seconds=time.time() - started)


def evaluate_phase(model, schedule: TaskSchedule, dataset: ImageDataset,
                   phase: int, batch_size: int = 256) -> float:
    """Accuracy over the cumulative test set, argmax over all learned classes."""
    view = cumulative_test_view(schedule, dataset, phase)
    acc = AccuracyAccumulator()
    for positions in batch_positions(len(view), batch_size, shuffle=False):
        images, labels = view.batch(positions)
        images = normalize(images, dataset.normalize_mean, dataset.normalize_std)
        if isinstance(model, ModelSnapshot):
            predictions = model.predict(images)
        else:
            was_training = model.training
            model.eval()
            with torch.no_grad():
                predictions = argmax_lowest(model(images))
            if was_training:
                model.train()
        acc.update(predictions, labels)
    return acc.accuracy


def save_checkpoint(path: str | Path, state: PhaseState, config_hash: str) -> None:
    """Serialize everything needed to resume after the last completed phase."""
    payload = {
        "phase": state.completed,
        "model": state.model.state_dict(),
        "partitions": list(state.model.head.partitions),
        "transforms": None if state.transforms is None else state.transforms.state_dict(),
        "counters": state.counters,
        "config_hash": config_hash,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, model: IncrementalClassifier,
                    config_hash: str | None = None) -> PhaseState:
    """Rebuild PhaseState (model weights, partitions, snapshot) from disk.

    ``model`` must be a freshly built classifier with the phase-1 head; its
    head is regrown to the stored partition layout before loading weights.
    """
    payload = torch.load(path, weights_only=True)
    if config_hash is not None and payload["config_hash"] != config_hash:
        raise RuntimeError("checkpoint was produced by a different configuration")
    partitions = [tuple(p) for p in payload["partitions"]]
    if model.head.partitions[0] != partitions[0]:
        raise RuntimeError("model head does not match the checkpoint's first task")
    for start, end in partitions[1:]:
        expand_head(model.head, end - start)
    model.load_state_dict(payload["model"])
    model.head.partitions = partitions

    state = PhaseState(model=model, completed=int(payload["phase"]))
    state.snapshot = snapshot(model, state.completed)
    if payload["counters"] is not None:
        state.counters = payload["counters"]
    if payload["transforms"] is not None:
        transforms = RelationTransforms(model.extractor.embed_dim)
        transforms.load_state_dict(payload["transforms"])
        state.transforms = transforms
    return state


def save_generator(path: str | Path, generator: GeneratorNet) -> None:
    torch.save({
        "state": generator.state_dict(),
        "noise_dim": generator.noise_dim,
        "output_shape": generator.output_shape,
    }, path)


def load_generator(path: str | Path) -> GeneratorNet:
    payload = torch.load(path, weights_only=True)
    h, w, c = payload["output_shape"]
    generator = GeneratorNet(payload["noise_dim"], (h, w, c),
                             torch.zeros(c), torch.ones(c))
    generator.load_state_dict(payload["state"])
    generator.eval()
    return generator
