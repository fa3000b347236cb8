"""CIFAR-10 binary loading, augmentation and patch extraction.

Images are float arrays of shape ``(3, N, N)`` with values in ``[0, 1]``.
A patch is the flattened ``(3, P, P)`` window in channel-planar order, so its
length is ``3 * P**2``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NUM_CLASSES = 10
IMAGE_SIDE = 32
RECORD_BYTES = 1 + 3 * IMAGE_SIDE * IMAGE_SIDE
PAD = 4

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImageSet:
    """Immutable image collection stored as raw bytes.

    ``raw`` holds uint8 pixels of shape ``(n, 3, N, N)``; normalized float
    views are produced on demand so the 50k training split stays at ~150 MB.
    """

    raw: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.raw.ndim != 4 or self.raw.shape[1] != 3 or self.raw.shape[2] != self.raw.shape[3]:
            raise DatasetError(f"expected (n, 3, N, N) pixels, got {self.raw.shape}")
        if len(self.labels) != len(self.raw):
            raise DatasetError("pixel and label counts differ")
        self.raw.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.raw)

    @property
    def side(self) -> int:
        return self.raw.shape[-1]

    def images(self, index=slice(None), dtype=np.float64) -> np.ndarray:
        """Normalized pixels in [0, 1] for ``index`` (int, slice or array)."""
        return self.raw[index].astype(dtype) / 255.0

    def image(self, i: int, dtype=np.float64) -> np.ndarray:
        return self.images(i, dtype)

    def subset(self, index) -> "LabeledImageSet":
        return LabeledImageSet(
            np.ascontiguousarray(self.raw[index]),
            np.ascontiguousarray(self.labels[index]),
            self.split,
            self.num_classes,
        )


def _read_records(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    buf = np.fromfile(path, dtype=np.uint8)
    if buf.size % RECORD_BYTES:
        raise DatasetError(f"{path}: length {buf.size} is not a multiple of {RECORD_BYTES}")
    records = buf.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].copy()
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DatasetError(f"{path}: label byte {labels.max()} out of range")
    pixels = records[:, 1:].reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE).copy()
    return pixels, labels


def load_cifar10(directory: str, split: str = "train") -> LabeledImageSet:
    """Load a CIFAR-10 split from the canonical binary batch files."""
    if split == "train":
        names = TRAIN_FILES
    elif split == "test":
        names = TEST_FILES
    else:
        raise ValueError(f"unknown split {split!r}")
    parts = [_read_records(os.path.join(directory, name)) for name in names]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    return LabeledImageSet(pixels, labels, split)


def write_cifar10_records(path: str, images: LabeledImageSet) -> None:
    """Write ``images`` in the 3073-byte record format (inverse of loading)."""
    if images.side != IMAGE_SIDE:
        raise DatasetError("record format requires 32x32 images")
    n = len(images)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = images.labels
    records[:, 1:] = images.raw.reshape(n, -1)
    records.tofile(path)


def cifar10_available(directory: str | None) -> bool:
    if not directory:
        return False
    return all(os.path.isfile(os.path.join(directory, f)) for f in TRAIN_FILES + TEST_FILES)


def reflect_pad(image: np.ndarray, pad: int = PAD) -> np.ndarray:
    # "reflect" mode mirrors around the border pixel without repeating it
    return np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")


def crop_and_flip(image: np.ndarray, row: int, col: int, flip: bool, pad: int = PAD) -> np.ndarray:
    """Deterministic core of :func:`augment`; offsets index the padded image."""
    side = image.shape[-1]
    padded = reflect_pad(image, pad)
    out = padded[:, row:row + side, col:col + side]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = PAD) -> np.ndarray:
    """Random crop after reflect padding, then a horizontal flip with prob. 1/2."""
    row, col = rng.integers(0, 2 * pad + 1, size=2)
    flip = bool(rng.integers(0, 2))
    return crop_and_flip(image, int(row), int(col), flip, pad)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = PAD) -> np.ndarray:
    out = np.empty_like(images)
    for k in range(len(images)):
        out[k] = augment(images[k], rng, pad)
    return out


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """All overlapping patches of a ``(C, N, N)`` image, row-major positions.

    Returns an array of shape ``((N-P+1)**2, C*P*P)``.
    """
    c, h, w = image.shape
    if patch_size > min(h, w) or patch_size < 1:
        raise ValueError(f"patch size {patch_size} does not fit a {h}x{w} image")
    windows = sliding_window_view(image, (patch_size, patch_size), axis=(1, 2))
    # (C, Ho, Wo, P, P) -> (Ho, Wo, C, P, P)
    windows = windows.transpose(1, 2, 0, 3, 4)
    return windows.reshape(-1, c * patch_size * patch_size)


def patch_at(image: np.ndarray, row: int, col: int, patch_size: int) -> np.ndarray:
    return image[:, row:row + patch_size, col:col + patch_size].reshape(-1)


def sample_patch_positions(n_images: int, side: int, patch_size: int, count: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Uniform (image, row, col) triplets, drawn with replacement."""
    if n_images < 1:
        raise DatasetError("cannot sample patches from an empty dataset")
    span = side - patch_size + 1
    if span < 1:
        raise ValueError(f"patch size {patch_size} does not fit a {side}x{side} image")
    img = rng.integers(0, n_images, size=count)
    row = rng.integers(0, span, size=count)
    col = rng.integers(0, span, size=count)
    return np.stack([img, row, col], axis=1)


def gather_patches(dataset: LabeledImageSet, positions: np.ndarray, patch_size: int,
                   chunk: int = 65536) -> np.ndarray:
    """Normalized patches at the given (image, row, col) triplets, shape (n, 3P^2)."""
    positions = np.asarray(positions, dtype=np.int64)
    ch = np.arange(3)[None, :, None, None]
    off = np.arange(patch_size)
    out = np.empty((len(positions), 3 * patch_size * patch_size))
    for start in range(0, len(positions), chunk):
        pos = positions[start:start + chunk]
        img = pos[:, 0, None, None, None]
        rows = pos[:, 1, None, None, None] + off[None, None, :, None]
        cols = pos[:, 2, None, None, None] + off[None, None, None, :]
        block = dataset.raw[img, ch, rows, cols]
        out[start:start + len(pos)] = block.reshape(len(pos), -1) / 255.0
    return out
