"""Synthetic data shared by the tests."""
import os

import numpy as np

from patchkernel.dataset import TEST_FILES, TRAIN_FILES, LabeledImageSet, write_cifar10_records


def striped_images(n: int, rng, side: int = 32, noise: float = 0.1, num_classes: int = 10) -> LabeledImageSet:
    """Class-dependent oriented stripes and tint plus pixel noise.

    Easy enough that a small pipeline run beats chance by a wide margin.
    """
    rng = np.random.default_rng(rng)
    labels = rng.integers(0, num_classes, n)
    yy, xx = np.mgrid[0:side, 0:side]
    images = np.empty((n, 3, side, side))
    for i, c in enumerate(labels):
        angle = np.pi * c / num_classes
        freq = 0.3 + 0.05 * c
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
        tint = 0.3 * np.array([np.cos(c), np.sin(c), np.cos(2 * c)])
        images[i] = 0.5 + 0.3 * wave[None] + tint[:, None, None] + noise * rng.standard_normal((3, side, side))
    raw = np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)
    return LabeledImageSet(raw, labels.astype(np.uint8), "synthetic")


def random_images(n: int, rng, side: int = 32) -> LabeledImageSet:
    rng = np.random.default_rng(rng)
    raw = rng.integers(0, 256, size=(n, 3, side, side), dtype=np.uint8)
    return LabeledImageSet(raw, rng.integers(0, 10, n).astype(np.uint8), "random")


def write_fake_cifar(directory: str, per_batch: int = 40, n_test: int = 100, seed: int = 0) -> str:
    """Directory laid out like the CIFAR-10 binary distribution, filled with stripes."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    for name in TRAIN_FILES:
        write_cifar10_records(os.path.join(directory, name), striped_images(per_batch, rng))
    for name in TEST_FILES:
        write_cifar10_records(os.path.join(directory, name), striped_images(n_test, rng))
    return directory


def brute_force_bits(image, dictionary, op, q):
    """Whiten every patch, compute all distances, stable-sort, keep the first ``q``.

    Returns uint8 bits ``(2|D|, H, W)``; shares no code with the convolutional path.
    """
    c, n, _ = image.shape
    p = dictionary.patch_size
    side = n - p + 1
    bits = np.zeros((dictionary.size, side, side), np.uint8)
    for i in range(side):
        for j in range(side):
            patch = image[:, i:i + p, j:j + p].reshape(-1)
            white = op.matrix @ (patch - op.mean)
            dist = ((dictionary.atoms - white) ** 2).sum(axis=1)
            bits[np.argsort(dist, kind="stable")[:q], i, j] = 1
    return bits


def loop_pool(x, k, s):
    """Window means with explicit loops over channels and output positions."""
    c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                total = 0.0
                for a in range(k):
                    for b in range(k):
                        total += x[ch, i * s + a, j * s + b]
                out[ch, i, j] = total / (k * k)
    return out


def small_operator(images, patch_size, regularizer=1e-3, orientation="zca"):
    from patchkernel.dataset import extract_patches
    from patchkernel.whitening import build_whitening_operator, estimate_patch_moments
    patches = np.concatenate([extract_patches(img, patch_size) for img in images])
    return build_whitening_operator(estimate_patch_moments(patches), regularizer, orientation)


# acceptance outcomes, printed by the terminal summary hook in conftest.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = ("PASS" if ok else "FAIL", detail)
