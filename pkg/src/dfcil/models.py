"""Incremental classifier: convolutional backbones, a bias-free growing head,
frozen snapshots and prediction."""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

HEAD_INIT_STD = 0.01


class BasicBlock(nn.Module):
    """Standard pre-activationless residual block (conv-bn-relu-conv-bn + skip)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetFeatures(nn.Module):
    """Staged residual feature extractor for RGB images.

    Maps (B, 3, h, w) to (B, embed_dim) via global average pooling. One stage
    per entry of ``widths`` (stride 2 from the second stage on); the defaults
    stay well under half a million parameters.
    """

    def __init__(
        self,
        input_shape: tuple[int, int, int] = (16, 16, 3),
        widths: tuple[int, ...] = (16, 32, 64),
        blocks_per_stage: int = 1,
    ):
        super().__init__()
        h, w, c = input_shape
        if c != 3:
            raise ValueError(f"expected 3-channel input, got {c}")
        self.input_shape = (h, w, c)
        self.embed_dim = widths[-1]

        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = widths[0]
        for stage_idx, out_ch in enumerate(widths):
            stride = 1 if stage_idx == 0 else 2
            blocks = [BasicBlock(in_ch, out_ch, stride=stride)]
            blocks += [BasicBlock(out_ch, out_ch) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        out = self.stages(self.stem(x))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


def build_backbone(name: str, input_shape: tuple[int, int, int]) -> ResNetFeatures:
    """Instantiate a registered feature extractor.

    ``resnet-mini`` is the small desk-scale default; ``resnet32`` matches the
    classic 3-stage/5-block CIFAR layout so larger runs can plug it in.
    """
    if name == "resnet-mini":
        return ResNetFeatures(input_shape, widths=(16, 32, 64), blocks_per_stage=1)
    if name == "resnet32":
        return ResNetFeatures(input_shape, widths=(16, 32, 64), blocks_per_stage=5)
    if name == "resnet18":
        return ResNetFeatures(input_shape, widths=(64, 128, 256, 512), blocks_per_stage=2)
    raise ValueError(f"unknown backbone {name!r}")


class IncrementalHead(nn.Module):
    """Bias-free linear head whose rows grow task by task.

    Rows are partitioned into contiguous per-task ranges; slicing a partition
    gives logits identical to the corresponding slice of the full output.
    """

    def __init__(self, embed_dim: int, n_classes: int, generator: torch.Generator | None = None):
        super().__init__()
        self.embed_dim = embed_dim
        weight = torch.empty(n_classes, embed_dim)
        _init_rows(weight, generator)
        self.weight = nn.Parameter(weight)
        self.partitions: list[tuple[int, int]] = [(0, n_classes)]

    @property
    def class_count(self) -> int:
        return self.weight.shape[0]

    def forward(self, feats):
        return F.linear(feats, self.weight)

    def old_logits(self, feats):
        """Logits of every class learned before the latest task."""
        n_old = self.partitions[-1][0]
        return F.linear(feats, self.weight[:n_old])

    def new_logits(self, feats):
        """Logits restricted to the latest task's classes."""
        start, end = self.partitions[-1]
        return F.linear(feats, self.weight[start:end])


def _init_rows(rows: torch.Tensor, generator: torch.Generator | None) -> None:
    with torch.no_grad():
        rows.normal_(0.0, HEAD_INIT_STD, generator=generator)


def expand_head(head: IncrementalHead, k: int, generator: torch.Generator | None = None) -> IncrementalHead:
    """Append k new classifier rows, leaving existing rows untouched.

    The head is grown in place (the weight parameter is replaced, so phase
    optimizers must be rebuilt afterwards) and returned for convenience.
    """
    if k < 1:
        raise ValueError(f"new-class count must be >= 1, got {k}")
    old = head.weight.data
    new_rows = torch.empty(k, head.embed_dim, dtype=old.dtype, device=old.device)
    _init_rows(new_rows, generator)
    head.weight = nn.Parameter(torch.cat([old, new_rows], dim=0))
    start = head.partitions[-1][1]
    head.partitions.append((start, start + k))
    return head


class IncrementalClassifier(nn.Module):
    """Feature extractor plus incremental head; the live model of a run.

    ``normalize_mean``/``normalize_std`` record the per-channel normalization
    of the pipeline feeding this model, so downstream consumers (notably the
    image synthesizer) know the valid input domain. Defaults describe raw
    [0, 1] pixels.
    """

    def __init__(self, extractor: ResNetFeatures, n_initial_classes: int,
                 generator: torch.Generator | None = None,
                 normalize_mean: tuple[float, float, float] = (0.0, 0.0, 0.0),
                 normalize_std: tuple[float, float, float] = (1.0, 1.0, 1.0)):
        super().__init__()
        self.extractor = extractor
        self.head = IncrementalHead(extractor.embed_dim, n_initial_classes, generator)
        self.register_buffer("normalize_mean", torch.tensor(normalize_mean, dtype=torch.float32))
        self.register_buffer("normalize_std", torch.tensor(normalize_std, dtype=torch.float32))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.extractor.input_shape

    def features(self, x):
        return self.extractor(x)

    def forward(self, x):
        return self.head(self.extractor(x))


def _check_input(x: torch.Tensor, input_shape: tuple[int, int, int]) -> None:
    h, w, c = input_shape
    if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
        raise ValueError(f"expected batch of shape (*, {c}, {h}, {w}), got {tuple(x.shape)}")


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Per-row argmax with ties broken by the lowest class index."""
    # np.argmax guarantees the first maximal index; torch does not document it.
    return torch.from_numpy(np.argmax(logits.detach().cpu().numpy(), axis=1)).long()


def predict(model: IncrementalClassifier | "ModelSnapshot", x: torch.Tensor) -> torch.Tensor:
    """Predicted class indices over all classes learned so far."""
    _check_input(x, model.input_shape)
    if isinstance(model, ModelSnapshot):
        logits = model.logits(x)
    else:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            logits = model(x)
        if was_training:
            model.train()
    return argmax_lowest(logits)


class ModelSnapshot:
    """Frozen copy of the model at the end of a phase.

    Parameters and batch-norm statistics are detached from the live model;
    nothing done to the live model afterwards can change snapshot outputs, and
    no gradient ever reaches snapshot parameters.
    """

    def __init__(self, model: IncrementalClassifier, phase: int):
        frozen = copy.deepcopy(model)
        frozen.eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        self._model = frozen
        self.phase = phase

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self._model.input_shape

    @property
    def class_count(self) -> int:
        return self._model.head.class_count

    @property
    def embed_dim(self) -> int:
        return self._model.extractor.embed_dim

    @property
    def normalize_mean(self) -> torch.Tensor:
        return self._model.normalize_mean

    @property
    def normalize_std(self) -> torch.Tensor:
        return self._model.normalize_std

    @property
    def extractor(self) -> ResNetFeatures:
        return self._model.extractor

    @property
    def head(self) -> IncrementalHead:
        return self._model.head

    def features(self, x):
        with torch.no_grad():
            return self._model.features(x)

    def logits(self, x):
        with torch.no_grad():
            return self._model(x)

    def logits_with_graph(self, x):
        """Forward keeping the autograd graph through activations.

        Needed when optimizing inputs or a generator against this snapshot;
        snapshot parameters stay frozen so they receive no gradient.
        """
        return self._model(x)

    def predict(self, x):
        _check_input(x, self.input_shape)
        return argmax_lowest(self.logits(x))


def snapshot(model: IncrementalClassifier, phase: int) -> ModelSnapshot:
    """Capture the frozen teacher used by the next learning phase."""
    model.eval()
    return ModelSnapshot(model, phase)
