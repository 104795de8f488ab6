"""Image datasets for incremental experiments.

All datasets are held as raw [0, 1] float tensors plus per-channel
normalization constants; augmentation (seeded crop with padding, optional
horizontal flip) and normalization are applied by the training loop, never
baked into storage. Bundled desk-scale sources: the scikit-learn handwritten
digits (upsampled to 16x16 RGB) and a synthetic Gaussian-blob set. Larger
datasets load from a directory with an index manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation: pad-and-crop jitter plus optional flip."""

    crop_pad: int = 4
    hflip: bool = True


class TensorImageData:
    """One split: images (N, 3, h, w) in [0, 1] and integer labels (N,)."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, h, w) images, got {tuple(images.shape)}")
        if labels.dim() != 1 or labels.shape[0] != images.shape[0]:
            raise ValueError("labels must be one integer per image")
        if images.numel() and (images.min() < 0 or images.max() > 1):
            raise ValueError("images must lie in [0, 1]")
        self.images = images.float()
        self.labels = labels.long()

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class ImageDataset:
    """Train/test splits plus the constants the model pipeline needs."""

    name: str
    train: TensorImageData
    test: TensorImageData
    n_classes: int
    input_shape: tuple[int, int, int]
    normalize_mean: tuple[float, float, float]
    normalize_std: tuple[float, float, float]
    augment: AugmentConfig


def normalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    """Per-channel (x - mean) / std; accepts tuples or 3-vectors."""
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - m) / s


def augment_batch(images: torch.Tensor, config: AugmentConfig,
                  generator: torch.Generator | None) -> torch.Tensor:
    """Seeded pad+random-crop and per-sample horizontal flip on raw images."""
    n, _, h, w = images.shape
    out = images
    if config.crop_pad > 0:
        p = config.crop_pad
        padded = F.pad(out, (p, p, p, p))
        tops = torch.randint(0, 2 * p + 1, (n,), generator=generator)
        lefts = torch.randint(0, 2 * p + 1, (n,), generator=generator)
        rows = tops.view(n, 1, 1, 1) + torch.arange(h).view(1, 1, h, 1)
        cols = lefts.view(n, 1, 1, 1) + torch.arange(w).view(1, 1, 1, w)
        out = padded.gather(2, rows.expand(n, 3, h, w + 2 * p))
        out = out.gather(3, cols.expand(n, 3, h, w))
    if config.hflip:
        flip = torch.rand(n, generator=generator) < 0.5
        out = torch.where(flip.view(n, 1, 1, 1), out.flip(-1), out)
    return out


def batch_positions(n: int, batch_size: int, generator: torch.Generator | None = None,
                    shuffle: bool = True, drop_last: bool = False):
    """Yield position tensors covering 0..n-1 in seeded shuffled batches."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        chunk = order[start: start + batch_size]
        if drop_last and chunk.numel() < batch_size:
            return
        yield chunk


DIGITS_SPLIT_SEED = 1234


def load_digits_dataset() -> ImageDataset:
    """Bundled 10-class dataset: scikit-learn handwritten digits.

    The 8x8 grayscale images are nearest-upsampled to 16x16, replicated to 3
    channels, and split 80/20 per class with a fixed seed, so every caller
    sees the identical dataset. Flips are disabled (mirrored digits change
    identity); crop jitter is kept small for the tiny canvas.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = torch.from_numpy(bunch.images).float() / 16.0
    images = images.unsqueeze(1).repeat(1, 3, 1, 1)
    images = F.interpolate(images, scale_factor=2, mode="nearest")
    labels = torch.from_numpy(bunch.target).long()

    rng = np.random.default_rng(DIGITS_SPLIT_SEED)
    train_idx, test_idx = [], []
    for cls in range(10):
        members = np.nonzero(labels.numpy() == cls)[0]
        members = members[rng.permutation(len(members))]
        cut = int(round(len(members) * 0.8))
        train_idx.extend(members[:cut].tolist())
        test_idx.extend(members[cut:].tolist())
    train_idx = torch.tensor(sorted(train_idx))
    test_idx = torch.tensor(sorted(test_idx))

    train = TensorImageData(images[train_idx], labels[train_idx])
    test = TensorImageData(images[test_idx], labels[test_idx])
    mean = tuple(float(v) for v in train.images.mean(dim=(0, 2, 3)))
    std = tuple(float(v) for v in train.images.std(dim=(0, 2, 3)))
    return ImageDataset(
        name="digits",
        train=train,
        test=test,
        n_classes=10,
        input_shape=(16, 16, 3),
        normalize_mean=mean,
        normalize_std=std,
        augment=AugmentConfig(crop_pad=2, hflip=False),
    )


def make_blob_dataset(n_classes: int = 10, per_class_train: int = 64,
                      per_class_test: int = 16, side: int = 16,
                      noise: float = 0.12, seed: int = 0) -> ImageDataset:
    """Synthetic dataset: per-class smooth prototype images plus pixel noise.

    Entirely seeded, so identical arguments give an identical dataset; meant
    for fast CI and protocol tests rather than realism.
    """
    if side % 8:
        raise ValueError(f"side must be divisible by 8, got {side}")
    rng = torch.Generator().manual_seed(seed)
    protos = torch.rand(n_classes, 3, side // 4, side // 4, generator=rng)
    protos = F.interpolate(protos, scale_factor=4, mode="bilinear", align_corners=False)

    def draw(per_class):
        xs, ys = [], []
        for cls in range(n_classes):
            batch = protos[cls].unsqueeze(0) + noise * torch.randn(
                per_class, 3, side, side, generator=rng)
            xs.append(batch.clamp(0.0, 1.0))
            ys.append(torch.full((per_class,), cls, dtype=torch.long))
        return TensorImageData(torch.cat(xs), torch.cat(ys))

    train = draw(per_class_train)
    test = draw(per_class_test)
    mean = tuple(float(v) for v in train.images.mean(dim=(0, 2, 3)))
    std = tuple(float(v) for v in train.images.std(dim=(0, 2, 3)))
    return ImageDataset(
        name=f"blobs{n_classes}",
        train=train,
        test=test,
        n_classes=n_classes,
        input_shape=(side, side, 3),
        normalize_mean=mean,
        normalize_std=std,
        augment=AugmentConfig(crop_pad=2, hflip=True),
    )


def load_directory_dataset(root: str | Path) -> ImageDataset:
    """Load a dataset from a directory with a ``manifest.json`` index.

    Manifest keys: name, n_classes, input_shape [h, w, 3], normalize_mean,
    normalize_std, optional augment {crop_pad, hflip}, and splits mapping
    "train"/"test" to {"images": <npy>, "labels": <npy>} paths relative to the
    directory. Image arrays are (N, 3, h, w) float in [0, 1] or uint8 0..255.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValueError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    required = {"name", "n_classes", "input_shape", "normalize_mean", "normalize_std", "splits"}
    missing = required - manifest.keys()
    if missing:
        raise ValueError(f"manifest missing keys: {sorted(missing)}")

    def load_split(spec):
        images = np.load(root / spec["images"])
        labels = np.load(root / spec["labels"])
        x = torch.from_numpy(images)
        if x.dtype == torch.uint8:
            x = x.float() / 255.0
        return TensorImageData(x.float(), torch.from_numpy(labels).long())

    splits = manifest["splits"]
    for name in ("train", "test"):
        if name not in splits:
            raise ValueError(f"manifest splits missing {name!r}")
    train = load_split(splits["train"])
    test = load_split(splits["test"])
    h, w, c = (int(v) for v in manifest["input_shape"])
    aug = manifest.get("augment", {})
    return ImageDataset(
        name=str(manifest["name"]),
        train=train,
        test=test,
        n_classes=int(manifest["n_classes"]),
        input_shape=(h, w, c),
        normalize_mean=tuple(float(v) for v in manifest["normalize_mean"]),
        normalize_std=tuple(float(v) for v in manifest["normalize_std"]),
        augment=AugmentConfig(crop_pad=int(aug.get("crop_pad", 4)),
                              hflip=bool(aug.get("hflip", True))),
    )


DATASET_BUILDERS = {
    "digits": load_digits_dataset,
    "blobs": make_blob_dataset,
}


def load_dataset(name: str, path: str | Path | None = None, **kwargs) -> ImageDataset:
    """Resolve a dataset by registry name or by directory path."""
    if name == "directory":
        if path is None:
            raise ValueError("directory datasets need a path")
        return load_directory_dataset(path)
    builder = DATASET_BUILDERS.get(name)
    if builder is None:
        raise ValueError(f"unknown dataset {name!r}")
    return builder(**kwargs)
