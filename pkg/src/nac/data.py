"""Datasets: the CIFAR-10 binary format, synthetic pattern data, augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x C x H x W, values in [0, 1]
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.images) == 0:
            raise ValueError("dataset needs N > 0 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> Dataset:
        return replace(self, images=self.images[index], labels=self.labels[index])


# --------------------------------------------------------------------------- CIFAR-10 binary


def read_cifar_records(raw: bytes, image_shape=CIFAR_SHAPE, max_label: int = 9) -> tuple[np.ndarray, np.ndarray]:
    rec = 1 + int(np.prod(image_shape))
    if len(raw) % rec:
        raise DataFormatError(f"file size {len(raw)} is not a multiple of the {rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    if labels.size and labels.max() > max_label:
        bad = int(np.argmax(labels > max_label))
        raise DataFormatError(f"record {bad} has label byte {labels[bad]} > {max_label}")
    images = arr[:, 1:].reshape(-1, *image_shape)
    return images, labels


def load_cifar10(
    path: str | Path, split: str = "train", limit: int | None = None, image_shape=CIFAR_SHAPE,
    dtype=np.float32,
) -> Dataset:
    """Load CIFAR-10 binary batches from a directory (or a single batch file).

    Each record is one label byte followed by the R, G and B planes, each
    row-major. Pixels are scaled to [0, 1].
    """
    path = Path(path)
    if path.is_file():
        files = [path]
    else:
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} batch files under {path}")
    imgs, labs = [], []
    remaining = limit
    for f in files:
        images, labels = read_cifar_records(f.read_bytes(), image_shape)
        if remaining is not None:
            images, labels = images[:remaining], labels[:remaining]
            remaining -= len(labels)
        imgs.append(images)
        labs.append(labels)
        if remaining is not None and remaining <= 0:
            break
    images = np.concatenate(imgs).astype(dtype) / 255.0
    return Dataset(images.astype(dtype), np.concatenate(labs), 10, split)


def write_cifar10(dataset: Dataset, path: str | Path) -> Path:
    """Write a dataset in the same record format (pixels quantised to bytes)."""
    if dataset.class_count > 256:
        raise DataFormatError("labels must fit in one byte")
    pix = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rec.tobytes())
    return path


# --------------------------------------------------------------------------- synthetic data


def class_pattern(c: int, classes: int, hw: int, channels: int) -> np.ndarray:
    """Deterministic template for class ``c``: an oriented grating with a class-specific
    frequency and per-channel phase, in [0, 1]."""
    theta = math.pi * c / classes
    freq = 1.0 + (c % 3)
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    out = np.empty((channels, hw, hw))
    for ch in range(channels):
        phase = 2 * math.pi * ((c * 0.37 + ch * 0.25) % 1.0)
        out[ch] = 0.5 + 0.4 * np.sin(2 * math.pi * freq * proj + phase)
    return out


def synthetic_blobs(
    classes: int = 10,
    n_per_class: int = 200,
    hw: int = 16,
    channels: int = 3,
    noise_sigma: float = 0.1,
    seed: int = 0,
    jitter: int = 0,
    split: str = "train",
    dtype=np.float32,
) -> Dataset:
    """Class templates plus Gaussian noise, clipped to [0, 1].

    ``jitter`` > 0 circularly shifts each image by up to that many pixels,
    which makes the task harder for linear models but not for convolutions.
    """
    rng = np.random.default_rng(seed)
    templates = np.stack([class_pattern(c, classes, hw, channels) for c in range(classes)])
    labels = np.repeat(np.arange(classes), n_per_class)
    images = templates[labels].copy()
    if jitter:
        shifts = rng.integers(-jitter, jitter + 1, size=(len(labels), 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (int(dy), int(dx)), axis=(1, 2))
    if noise_sigma > 0:
        images += rng.normal(0.0, noise_sigma, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order].astype(dtype), labels[order], classes, split)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    random_crop_pad: int = 0
    random_flip: bool = False
    brightness: float = 0.0
    contrast: tuple[float, float] | None = None

    @classmethod
    def default(cls) -> AugmentPolicy:
        return cls(random_crop_pad=4, random_flip=True, brightness=0.2, contrast=(0.8, 1.25))

    @property
    def enabled(self) -> bool:
        return bool(self.random_crop_pad or self.random_flip or self.brightness or self.contrast)


def flip(images: np.ndarray, coins: np.ndarray) -> np.ndarray:
    """Horizontally mirror the images whose coin is True."""
    out = images.copy()
    out[coins] = out[coins][..., ::-1]
    return out


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offs):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the training-time perturbations; labels are never touched."""
    if not policy.enabled:
        return images
    out = images
    n = len(images)
    if policy.random_crop_pad:
        out = random_crop(out, policy.random_crop_pad, rng)
    if policy.random_flip:
        out = flip(out, rng.random(n) < 0.5)
    if policy.brightness:
        out = out + rng.uniform(-policy.brightness, policy.brightness, size=(n, 1, 1, 1)).astype(out.dtype)
    if policy.contrast:
        lo, hi = policy.contrast
        factor = rng.uniform(lo, hi, size=(n, 1, 1, 1)).astype(out.dtype)
        mean = out.mean(axis=(1, 2, 3), keepdims=True)
        out = (out - mean) * factor + mean
    return np.clip(out, 0.0, 1.0).astype(images.dtype, copy=False)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]
