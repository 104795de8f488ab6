"""Data-free image synthesis by inverting a frozen classifier.

A small upsampling generator is trained against four objectives: label
diversity (balanced class coverage), content (confident class membership at a
high temperature), alignment of feature statistics with the batch-norm
records of the frozen model, and a smoothness/boundedness image prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .models import ModelSnapshot


@dataclass
class SynthesisConfig:
    """Knobs for generator training; defaults follow the reference recipe."""

    steps: int = 5000
    temp: float = 1000.0
    weight_diversity: float = 1.0
    weight_content: float = 1.0
    weight_stat: float = 5.0
    weight_prior: float = 0.001
    batch_size: int = 128
    lr: float = 1e-3
    noise_dim: int = 256

    def validate(self) -> None:
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.temp <= 0:
            raise ValueError("temp must be positive")
        for name in ("weight_diversity", "weight_content", "weight_stat", "weight_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1 or self.noise_dim < 1 or self.lr <= 0:
            raise ValueError("batch_size, noise_dim and lr must be positive")


@dataclass(frozen=True)
class BNStatRecord:
    """Running mean/variance of one batch-norm layer, ordered by depth."""

    mean: torch.Tensor
    var: torch.Tensor


@dataclass(frozen=True)
class SyntheticBatch:
    """Generated images with labels assigned by the frozen old model."""

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]


class GeneratorNet(nn.Module):
    """Noise-to-image generator for small RGB targets.

    A linear projection seeds a low-resolution map which three
    upsample+conv+BN+activation blocks grow by 8x; a tanh output is mapped
    per channel onto [pixel_lo, pixel_hi], the normalized image domain of the
    data pipeline feeding the solver.
    """

    def __init__(self, noise_dim: int, output_shape: tuple[int, int, int],
                 pixel_lo: torch.Tensor, pixel_hi: torch.Tensor):
        super().__init__()
        h, w, c = output_shape
        if h % 8 or w % 8:
            raise ValueError(f"output sides must be divisible by 8, got {(h, w)}")
        self.noise_dim = noise_dim
        self.output_shape = output_shape
        self.base_h, self.base_w = h // 8, w // 8
        self.project = nn.Linear(noise_dim, 128 * self.base_h * self.base_w)
        self.blocks = nn.Sequential(
            _up_block(128, 128),
            _up_block(128, 64),
            _up_block(64, 32),
        )
        self.to_rgb = nn.Conv2d(32, c, 3, padding=1)
        self.register_buffer("pixel_lo", pixel_lo.view(1, c, 1, 1).clone())
        self.register_buffer("pixel_hi", pixel_hi.view(1, c, 1, 1).clone())

    def forward(self, z):
        x = self.project(z).view(-1, 128, self.base_h, self.base_w)
        x = self.blocks(x)
        span = self.pixel_hi - self.pixel_lo
        return self.pixel_lo + (torch.tanh(self.to_rgb(x)) + 1.0) * 0.5 * span


def _up_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


def label_diversity_loss(old_model_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the batch-mean prediction against the uniform target.

    Minimized (value ln C) exactly when the batch-average softmax over
    previous classes is uniform.
    """
    mean_prob = F.softmax(old_model_logits, dim=1).mean(dim=0)
    return -torch.log(mean_prob.clamp(min=1e-38)).mean()


def content_loss(old_model_logits: torch.Tensor, assigned_labels: torch.Tensor,
                 temp: float) -> torch.Tensor:
    """Temperature-scaled cross-entropy pushing confident class membership."""
    if temp <= 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    return F.cross_entropy(old_model_logits / temp, assigned_labels)


def stat_alignment_loss(synthetic_feature_stats: list[tuple[torch.Tensor, torch.Tensor]],
                        bn_records: list[BNStatRecord]) -> torch.Tensor:
    """Sum of diagonal-Gaussian KL divergences, synthetic batch vs BN records.

    One (mean, var) pair per batch-norm layer; zero exactly when all
    statistics match.
    """
    if len(synthetic_feature_stats) != len(bn_records):
        raise ValueError(f"{len(synthetic_feature_stats)} stat pairs vs "
                         f"{len(bn_records)} batch-norm records")
    total = None
    for (mu_s, var_s), record in zip(synthetic_feature_stats, bn_records):
        if (var_s <= 0).any():
            raise RuntimeError("nonpositive synthetic feature variance")
        mu_r = record.mean.to(mu_s.dtype)
        var_r = record.var.to(var_s.dtype)
        kl = 0.5 * (torch.log(var_r / var_s) + (var_s + (mu_s - mu_r) ** 2) / var_r - 1.0)
        total = kl.sum() if total is None else total + kl.sum()
    if total is None:
        raise ValueError("no batch-norm layers to align")
    return total


def image_prior_loss(images: torch.Tensor) -> torch.Tensor:
    """Total-variation smoothness plus a small L2 boundedness penalty."""
    dh = (images[:, :, :, 1:] - images[:, :, :, :-1]).abs().mean()
    dv = (images[:, :, 1:, :] - images[:, :, :-1, :]).abs().mean()
    l2 = images.pow(2).flatten(1).sum(dim=1).mean()
    return dh + dv + 1e-2 * l2


def bn_stat_records(extractor: nn.Module) -> list[BNStatRecord]:
    """Running statistics of every batch-norm layer, in module order."""
    records = []
    for module in extractor.modules():
        if isinstance(module, nn.BatchNorm2d):
            records.append(BNStatRecord(mean=module.running_mean.detach().clone(),
                                        var=module.running_var.detach().clone()))
    if not records:
        raise RuntimeError("extractor has no batch-norm layers to record")
    return records


class _BNInputStats:
    """Forward hooks capturing differentiable per-channel input statistics."""

    def __init__(self, extractor: nn.Module):
        self.stats: list[tuple[torch.Tensor, torch.Tensor]] = []
        self._handles = [
            module.register_forward_hook(self._capture)
            for module in extractor.modules()
            if isinstance(module, nn.BatchNorm2d)
        ]

    def _capture(self, module, inputs, output):
        x = inputs[0]
        self.stats.append((x.mean(dim=(0, 2, 3)), x.var(dim=(0, 2, 3), unbiased=False)))

    def reset(self):
        self.stats = []

    def remove(self):
        for h in self._handles:
            h.remove()


def train_synthesizer(old_snapshot: ModelSnapshot, config: SynthesisConfig,
                      seed: int = 0) -> GeneratorNet:
    """Fit a generator against the frozen old model.

    The snapshot is read-only throughout; its parameters and batch-norm
    statistics are bit-identical before and after. The returned generator is
    in eval mode and carries its per-step loss history in ``loss_history``.
    """
    config.validate()
    records = bn_stat_records(old_snapshot.extractor)
    n_old = old_snapshot.class_count
    if n_old < 1:
        raise RuntimeError("snapshot has no classes to invert")

    torch.manual_seed(seed)
    rng = torch.Generator().manual_seed(seed)
    h, w, c = old_snapshot.input_shape
    lo, hi = _pixel_bounds(old_snapshot)
    generator = GeneratorNet(config.noise_dim, (h, w, c), lo, hi)
    optimizer = torch.optim.Adam(generator.parameters(), lr=config.lr)

    hooks = _BNInputStats(old_snapshot.extractor)
    history = []
    try:
        generator.train()
        for _ in range(config.steps):
            z = torch.randn(config.batch_size, config.noise_dim, generator=rng)
            images = generator(z)
            hooks.reset()
            logits = old_snapshot.logits_with_graph(images)
            # target classes are drawn uniformly so the generator is pushed
            # toward every previous class, not just the ones it already makes
            labels = torch.randint(0, n_old, (config.batch_size,), generator=rng)
            loss = (config.weight_diversity * label_diversity_loss(logits)
                    + config.weight_content * content_loss(logits, labels, config.temp)
                    + config.weight_stat * stat_alignment_loss(hooks.stats, records)
                    + config.weight_prior * image_prior_loss(images))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(float(loss.detach()))
    finally:
        hooks.remove()
    generator.eval()
    generator.loss_history = history
    return generator


def _pixel_bounds(snap: ModelSnapshot) -> tuple[torch.Tensor, torch.Tensor]:
    # raw pixels live in [0, 1]; map that interval through the normalization
    mean, std = snap.normalize_mean, snap.normalize_std
    return (0.0 - mean) / std, (1.0 - mean) / std


def sample(generator: GeneratorNet, old_snapshot: ModelSnapshot, n: int,
           rng: torch.Generator | None = None) -> SyntheticBatch:
    """Draw n synthetic images labeled by the old model's prediction.

    Pure apart from consuming randomness from ``rng``; labels always lie in
    [0, old class count).
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    with torch.no_grad():
        z = torch.randn(n, generator.noise_dim, generator=rng)
        images = generator(z)
        labels = old_snapshot.predict(images)
    return SyntheticBatch(images=images, labels=labels)
