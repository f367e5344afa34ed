"""
Datasets
--------

`LabeledImageSet` holds N x ch x H x W float32 images in [-1, 1] and integer
labels. Two sources:
  - `gen_synthetic_dataset` renders class-distinct shapes procedurally
  - `load_cifar10_bin` reads the CIFAR-10 binary batch files
"""

import os
from dataclasses import dataclass

import numpy as np
import structlog
import torch

from utils.errors import ConfigError, DataFormatError
from utils.tensor_core import Tensor, avg_pool2

log = structlog.get_logger(__name__)

SYNTHETIC_RESOLUTIONS = (8, 16, 32, 48)
SHAPE_CLASSES = (
    "disk",
    "square",
    "cross",
    "ring",
    "triangle",
    "horizontal_bars",
    "vertical_bars",
    "diagonal",
    "checker",
    "frame",
)

CIFAR_SIDE = 32
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class LabeledImageSet:
    images: Tensor
    labels: Tensor
    num_classes: int

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ValueError(f"images must be N x ch x H x W, got shape {tuple(self.images.shape)}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    @property
    def image_channels(self) -> int:
        return self.images.shape[1]

    def class_counts(self) -> list[int]:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()

    def sample_batch(self, batch_size: int, rng: torch.Generator, resolution: int | None = None) -> Tensor:
        """Random real images, average-pooled down to `resolution` when given."""
        idx = torch.randint(0, len(self), (batch_size,), generator=rng)
        batch = self.images[idx]
        if resolution is not None:
            if self.resolution % resolution or resolution > self.resolution:
                raise ConfigError(f"cannot pool {self.resolution}x{self.resolution} images down to {resolution}")
            while batch.shape[2] > resolution:
                batch = avg_pool2(batch)
        return batch


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

def _shape_mask(kind: str, xx: np.ndarray, yy: np.ndarray, scale: float, angle: float) -> np.ndarray:
    """Boolean mask on a centred grid with coordinates in shape units."""
    u = (xx * np.cos(angle) + yy * np.sin(angle)) / scale
    v = (-xx * np.sin(angle) + yy * np.cos(angle)) / scale
    r = np.sqrt(u ** 2 + v ** 2)
    box = np.maximum(np.abs(u), np.abs(v))
    if kind == "disk":
        return r < 0.8
    if kind == "square":
        return box < 0.7
    if kind == "cross":
        return ((np.abs(u) < 0.22) | (np.abs(v) < 0.22)) & (box < 0.9)
    if kind == "ring":
        return (r < 0.85) & (r > 0.5)
    if kind == "triangle":
        return (v < 0.6) & (v > 1.4 * np.abs(u) - 0.8)
    if kind == "horizontal_bars":
        return (box < 0.9) & (np.cos(v * 3.0 * np.pi) > 0.2)
    if kind == "vertical_bars":
        return (box < 0.9) & (np.cos(u * 3.0 * np.pi) > 0.2)
    if kind == "diagonal":
        return (np.abs(u - v) < 0.35) & (box < 0.9)
    if kind == "checker":
        return (box < 0.9) & (np.sign(np.sin(u * 2.5 * np.pi)) * np.sign(np.sin(v * 2.5 * np.pi)) > 0)
    if kind == "frame":
        return (box < 0.85) & (box > 0.55)
    raise ValueError(f"unknown shape class {kind}")


def _render(kind: str, resolution: int, rng: np.random.Generator) -> np.ndarray:
    axis = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    scale = rng.uniform(0.55, 0.8)
    angle = rng.uniform(-0.25, 0.25)
    mask = _shape_mask(kind, xx - cx, yy - cy, scale, angle)

    foreground = rng.uniform(0.3, 1.0, size=3)
    background = rng.uniform(-1.0, -0.5, size=3)
    image = np.where(mask[None], foreground[:, None, None], background[:, None, None])
    image = image + rng.normal(0.0, 0.05, size=image.shape)
    return np.clip(image, -1.0, 1.0)


def gen_synthetic_dataset(n: int, resolution: int, num_classes: int, seed: int) -> LabeledImageSet:
    """
    1) Assign labels round-robin so every class count is within one of n / C.
    2) Shuffle the order with the seeded generator.
    3) Render each image: shape of its class with jittered position, scale,
       rotation and colour, plus mild pixel noise.
    """
    if resolution not in SYNTHETIC_RESOLUTIONS:
        raise ConfigError(f"synthetic resolution must be one of {SYNTHETIC_RESOLUTIONS}, got {resolution}")
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ConfigError(f"synthetic num_classes must be in [1, {len(SHAPE_CLASSES)}], got {num_classes}")
    if n < 1:
        raise ConfigError(f"synthetic dataset size must be positive, got {n}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.stack([_render(SHAPE_CLASSES[label], resolution, rng) for label in labels])
    log.info("[datasets] synthetic set rendered", n=n, resolution=resolution, num_classes=num_classes, seed=seed)
    return LabeledImageSet(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(labels.astype(np.int64)),
        num_classes,
    )


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

def parse_cifar10_records(raw: bytes, source: str = "<bytes>", offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 pixel bytes (R, G, B planes, row-major)."""
    if len(raw) % CIFAR_RECORD_BYTES:
        complete = len(raw) // CIFAR_RECORD_BYTES
        raise DataFormatError(
            f"{source}: truncated record {complete} ({len(raw) - complete * CIFAR_RECORD_BYTES} of "
            f"{CIFAR_RECORD_BYTES} bytes)",
            byte_position=offset + complete * CIFAR_RECORD_BYTES,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(
            f"{source}: label byte {labels[bad[0]]} outside [0, 9]",
            byte_position=offset + int(bad[0]) * CIFAR_RECORD_BYTES,
        )
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 127.5 - 1.0
    return pixels, labels


def load_cifar10_bin(directory: str, split: str = "train") -> LabeledImageSet:
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    images, labels = [], []
    for name in names:
        path = os.path.join(directory, name)
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise DataFormatError(f"cannot read CIFAR-10 batch {path}: {e}") from e
        pixels, y = parse_cifar10_records(raw, source=path)
        images.append(pixels)
        labels.append(y)
    data = LabeledImageSet(
        torch.from_numpy(np.concatenate(images)),
        torch.from_numpy(np.concatenate(labels)),
        10,
    )
    log.info("[datasets] CIFAR-10 loaded", split=split, n=len(data))
    return data
