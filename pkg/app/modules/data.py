"""
Data Module: Synthetic Image Classification + 8-bit Quantization
===============================================================

Every template carries a few shared strokes plus the strokes that
identify its class. A sample places its class template at a random
translation, overlays dimmed strokes borrowed from other classes,
applies a low random contrast and background level, adds Gaussian
noise and clips to [0, 1].

The label is the set of strokes drawn at full contrast, so the class
margin is a small intensity gap: an l-infinity budget of a few
gray levels can close it, while a small CNN still separates the
classes. Translations keep a linear model below the CNN.

Train and test splits built from the same seed share the class
strokes and draw independent samples.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import DatasetConfig

from app.modules.errors import RejectedInputError, WeightFormatError
from app.modules.tensor_io import TensorReader, encode_u32, encode_u64

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass
class Dataset:
    images: np.ndarray   # (n, c, h, w), float64 in [0, 1]
    labels: np.ndarray   # (n,), int64
    classes: int
    split: str
    seed: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _validate(seed: int, n: int, classes: int, shape: Sequence[int], split: str) -> Tuple[int, int, int]:
    if split not in SPLITS:
        raise RejectedInputError(f"unknown split {split!r}; options: {SPLITS}")
    if not 0 <= int(seed) < 2 ** 64:
        raise RejectedInputError(f"seed {seed} does not fit in u64")
    if classes < 1 or classes > 65535:
        raise RejectedInputError(f"class count {classes} outside [1, 65535]")
    if n < 1 or n % classes:
        raise RejectedInputError(f"sample count {n} must be positive and divisible by {classes} classes")
    if len(shape) != 3 or any(int(d) < 1 for d in shape):
        raise RejectedInputError(f"image shape must be three positive ints (c, h, w), got {tuple(shape)}")
    c, h, w = (int(d) for d in shape)
    if h < 4 or w < 4:
        raise RejectedInputError(f"images must be at least 4x4, got {h}x{w}")
    return c, h, w


def _stroke(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((c, h, w))
    kind = rng.integers(3)
    if kind == 0:  # horizontal bar
        rh, rw = rng.integers(1, 3), rng.integers(w // 3, w - 1)
    elif kind == 1:  # vertical bar
        rh, rw = rng.integers(h // 3, h - 1), rng.integers(1, 3)
    else:  # box
        rh, rw = rng.integers(2, max(3, h // 2)), rng.integers(2, max(3, w // 2))
    y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
    channels = rng.random(c) < 0.7
    channels[rng.integers(c)] = True
    mask[channels, y0:y0 + rh, x0:x0 + rw] = 1.0
    return mask


def class_strokes(seed: int, classes: int, shape: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Stroke masks: (shared (c, h, w), per-class (classes, strokes, c, h, w)).

    Shared strokes appear in every class; per-class strokes carry the label.
    """
    c, h, w = (int(d) for d in shape)
    rng = np.random.default_rng([int(seed), 0])
    shared = np.zeros((c, h, w))
    for _ in range(DatasetConfig.SHARED_STROKES):
        shared = np.maximum(shared, _stroke(rng, c, h, w))
    own = np.stack([
        np.stack([_stroke(rng, c, h, w) for _ in range(DatasetConfig.STROKES_PER_CLASS)])
        for _ in range(classes)
    ])
    return shared, own


def class_templates(seed: int, classes: int, shape: Sequence[int]) -> np.ndarray:
    """Per-class patterns in [0, 1], shape (classes, c, h, w)."""
    shared, own = class_strokes(seed, classes, shape)
    return np.maximum(DatasetConfig.SHARED_LEVEL * shared[None], own.max(axis=1))


def gen_dataset(
    seed: int,
    n: int,
    classes: int = DatasetConfig.CLASSES,
    shape: Sequence[int] = DatasetConfig.SHAPE,
    split: str = "train",
) -> Dataset:
    """Deterministic, class-balanced synthetic dataset."""
    c, h, w = _validate(seed, n, classes, shape, split)
    _, own = class_strokes(seed, classes, (c, h, w))
    templates = class_templates(seed, classes, (c, h, w))
    s = DatasetConfig.MAX_SHIFT
    pad = ((0, 0), (0, 0), (s, s), (s, s))
    padded = np.pad(templates, pad)
    padded_own = np.pad(own.reshape(-1, c, h, w), pad)

    rng = np.random.default_rng([int(seed), SPLITS.index(split) + 1])
    labels = rng.permutation(np.repeat(np.arange(classes), n // classes))
    shifts = rng.integers(-s, s + 1, size=(n, 2))
    contrast = rng.uniform(*DatasetConfig.CONTRAST_RANGE, size=n)
    background = rng.uniform(*DatasetConfig.BACKGROUND_RANGE, size=n)
    noise = rng.normal(0.0, DatasetConfig.NOISE_STD, size=(n, c, h, w))

    # Distractors: dimmed strokes borrowed from other classes
    k = DatasetConfig.DISTRACTORS if classes > 1 else 0
    offsets = rng.integers(1, max(classes, 2), size=(n, k))
    picks = rng.integers(DatasetConfig.STROKES_PER_CLASS, size=(n, k))
    levels = rng.uniform(*DatasetConfig.DISTRACTOR_RANGE, size=(n, k))

    images = np.empty((n, c, h, w))
    for i in range(n):
        dy, dx = shifts[i]
        rows, cols = slice(s - dy, s - dy + h), slice(s - dx, s - dx + w)
        pattern = padded[labels[i], :, rows, cols]
        for j in range(k):
            other = (labels[i] + offsets[i, j]) % classes
            stroke = padded_own[other * DatasetConfig.STROKES_PER_CLASS + picks[i, j], :, rows, cols]
            pattern = np.maximum(pattern, levels[i, j] * stroke)
        images[i] = background[i] + contrast[i] * pattern
    images = np.clip(images + noise, 0.0, 1.0)
    logger.debug("generated %s split: %d samples, %d classes, shape %s", split, n, classes, (c, h, w))
    return Dataset(images=images, labels=labels.astype(np.int64), classes=classes, split=split, seed=int(seed))


def subset(dataset: Dataset, indices: Sequence[int]) -> Dataset:
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(dataset.images[idx], dataset.labels[idx], dataset.classes, dataset.split, dataset.seed)


# ==========================================
# 8-bit quantization
# ==========================================
def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """Snap every pixel to the 256-level grid, rounding half away from zero."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise RejectedInputError("quantize_8bit expects values in [0, 1]")
    levels = DatasetConfig.LEVELS
    # x >= 0, so floor(v + 0.5) is round-half-away-from-zero
    return np.floor(x * levels + 0.5) / levels


def to_bytes_image(x: np.ndarray) -> np.ndarray:
    """(c, h, w) in [0, 1] -> (h, w) or (h, w, c) uint8."""
    q = np.floor(quantize_8bit(x) * DatasetConfig.LEVELS + 0.5).astype(np.uint8)
    return q[0] if q.shape[0] == 1 else np.transpose(q, (1, 2, 0))


def export_bitmaps(images: np.ndarray, directory, prefix: str = "adv") -> List[Path]:
    """Write each image as an 8-bit PNG; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        if img.shape[0] not in (1, 3):
            raise RejectedInputError(f"bitmaps need 1 or 3 channels, got {img.shape[0]}")
        path = directory / f"{prefix}_{i:05d}.png"
        Image.fromarray(to_bytes_image(img)).save(path)
        paths.append(path)
    return paths


def load_bitmap(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / DatasetConfig.LEVELS
    return arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))


# ==========================================
# Dataset file (XFD1)
# ==========================================
def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(DatasetConfig.DATASET_MAGIC)
        for value in (n, dataset.classes, c, h, w):
            fh.write(encode_u32(value))
        fh.write(encode_u64(dataset.seed))
        fh.write(np.asarray(dataset.labels, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    reader = TensorReader(Path(path).read_bytes(), source=str(path))
    reader.expect_magic(DatasetConfig.DATASET_MAGIC)
    n, classes, c, h, w = (reader.read_u32("header") for _ in range(5))
    seed = reader.read_u64("seed")
    labels = np.frombuffer(reader.read_bytes(2 * n, "labels"), dtype="<u2").astype(np.int64)
    pixels = np.frombuffer(reader.read_bytes(8 * n * c * h * w, "pixels"), dtype="<f8")
    reader.expect_end()
    if n and labels.max() >= classes:
        raise WeightFormatError(f"{path}: label {labels.max()} >= class count {classes}")
    images = pixels.reshape(n, c, h, w).astype(np.float64)
    return Dataset(images=images, labels=labels, classes=classes, split=split, seed=seed)
