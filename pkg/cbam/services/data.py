# cbam/services/data.py
"""
Datasets: the CBDS binary format and the synthetic locate-the-patch task.

Locate-the-patch: each image is Gaussian noise with one bright square patch placed inside
one cell of a rows×cols grid; the label is the cell index in row-major order, so the
class is decided by *where* the patch is, not by what it looks like.
"""
import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from django.conf import settings

from cbam.exceptions import ConfigError, LabelOutOfRange
from cbam.services.serialization import read_cbds, read_json, write_cbds
from cbam.services.tensor import Tensor


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"


class DatasetFormat(str, Enum):
    CBDS = "cbds"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Dataset:
    images: Tensor
    labels: tuple
    num_classes: int
    split: Split = Split.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        object.__setattr__(self, "split", Split(self.split))
        if self.images.ndim != 4:
            raise ConfigError(f"images must be M×C0×H×W, got {self.images.shape}")
        if len(self.labels) != self.images.shape[0]:
            raise ConfigError(f"{len(self.labels)} labels for {self.images.shape[0]} images")
        bad = [y for y in self.labels if not 0 <= y < self.num_classes]
        if bad:
            raise LabelOutOfRange(f"label {bad[0]} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices, split: Optional[Split] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=Tensor._wrap(self.images.data[idx]),
            labels=tuple(self.labels[i] for i in idx),
            num_classes=self.num_classes,
            split=split or self.split,
        )

    def batch(self, indices) -> tuple:
        """(images Tensor, labels list) for the given sample indices."""
        idx = np.asarray(indices, dtype=np.int64)
        return Tensor._wrap(self.images.data[idx]), [self.labels[i] for i in idx]


def split_train_val(data: Dataset, val_fraction: Optional[float] = None) -> tuple:
    """Deterministic split: the last val_fraction of samples become the validation set."""
    if val_fraction is None:
        val_fraction = settings.CBAM_VAL_FRACTION
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    m = len(data)
    n_val = max(1, int(round(m * val_fraction)))
    if n_val >= m:
        raise ConfigError(f"dataset of {m} samples is too small to split")
    cut = m - n_val
    return data.subset(range(cut), Split.TRAIN), data.subset(range(cut, m), Split.VAL)


# --- Synthetic locate-the-patch ---------------------------------------------
def grid_shape(num_classes: int) -> tuple:
    """rows×cols with rows the largest divisor of num_classes not above its square root."""
    rows = max(d for d in range(1, int(math.isqrt(num_classes)) + 1) if num_classes % d == 0)
    return rows, num_classes // rows


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int = 256
    num_classes: int = 4
    channels: int = 3
    height: int = 12
    width: int = 12
    patch_size: int = 3
    patch_value: float = 2.0
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_samples", "num_classes", "channels", "height", "width", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        rows, cols = grid_shape(self.num_classes)
        if self.patch_size > self.height // rows or self.patch_size > self.width // cols:
            raise ConfigError(
                f"a {self.patch_size}px patch does not fit a {rows}×{cols} grid on "
                f"{self.height}×{self.width} images")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        merged = dict(settings.CBAM_SYNTHETIC_DEFAULTS)
        unknown = set(data) - set(merged)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        merged.update(data)
        return cls(**merged)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def patch_cell(spec: SyntheticSpec, row: int, col: int) -> int:
    """Grid cell containing pixel (row, col)."""
    rows, cols = grid_shape(spec.num_classes)
    cell_h, cell_w = spec.height // rows, spec.width // cols
    return min(row // cell_h, rows - 1) * cols + min(col // cell_w, cols - 1)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    rows, cols = grid_shape(spec.num_classes)
    cell_h, cell_w = spec.height // rows, spec.width // cols
    k = spec.patch_size
    images = rng.normal(0.0, spec.noise_std, size=(spec.num_samples, spec.channels, spec.height, spec.width))
    labels = rng.integers(0, spec.num_classes, size=spec.num_samples)
    for m, label in enumerate(labels):
        r, c = divmod(int(label), cols)
        top = r * cell_h + int(rng.integers(0, cell_h - k + 1))
        left = c * cell_w + int(rng.integers(0, cell_w - k + 1))
        images[m, :, top:top + k, left:left + k] += spec.patch_value
    return Dataset(images=Tensor._wrap(images), labels=tuple(int(y) for y in labels),
                   num_classes=spec.num_classes)


# --- Load / save ------------------------------------------------------------
def save_dataset(data: Dataset, path):
    write_cbds(path, data.images.data, data.labels)


def load_dataset(path, format=DatasetFormat.CBDS, num_classes: Optional[int] = None) -> Dataset:
    """
    Load a CBDS file, or generate from a synthetic JSON spec. For CBDS, num_classes
    defaults to max(label) + 1; when given, labels at or above it raise LabelOutOfRange.
    """
    try:
        format = DatasetFormat(format)
    except ValueError:
        raise ConfigError(f"unknown dataset format {format!r}") from None
    if format is DatasetFormat.SYNTHETIC:
        data = generate_synthetic(SyntheticSpec.from_dict(read_json(path)))
        if num_classes is not None and num_classes != data.num_classes:
            raise ConfigError(f"spec generates {data.num_classes} classes, {num_classes} requested")
        return data
    images, labels = read_cbds(path)
    if not labels:
        raise ConfigError(f"{path}: dataset is empty")
    if num_classes is None:
        num_classes = max(labels) + 1
    bad = [y for y in labels if y >= num_classes]
    if bad:
        raise LabelOutOfRange(f"{path}: label {bad[0]} >= num_classes {num_classes}")
    return Dataset(images=Tensor._wrap(images), labels=tuple(labels), num_classes=num_classes)
