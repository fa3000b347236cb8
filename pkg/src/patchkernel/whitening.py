"""Patch moments and the regularized whitening operator ``W = (lam*I + Sigma)^(-1/2)``."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import LabeledImageSet, gather_patches, sample_patch_positions
from .eigen import EigenDecomposition, symmetric_eigendecomposition

ZCA = "zca"
PCA = "pca"
ORIENTATIONS = (ZCA, PCA)
MOMENT_SAMPLES = 500_000
RANK_TOL = 1e-12

_OP_MAGIC = b"PKWHITE1"
_OP_HEADER = struct.Struct("<8sQdB")


class WhiteningError(ValueError):
    pass


@dataclass(frozen=True)
class PatchMoments:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def merge(self, other: "PatchMoments") -> "PatchMoments":
        """Combine two disjoint samples (pairwise update of mean and scatter)."""
        if other.dim != self.dim:
            raise WhiteningError("cannot merge moments of different dimension")
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        scatter = (self.covariance * self.count + other.covariance * other.count
                   + np.outer(delta, delta) * (self.count * other.count / n))
        cov = scatter / n
        return PatchMoments(mean, (cov + cov.T) / 2, n)


def estimate_patch_moments(patches: np.ndarray) -> PatchMoments:
    """Sample mean and biased (1/n) covariance of a ``(n, d)`` patch array."""
    if not isinstance(patches, np.ndarray) and len({len(p) for p in patches}) > 1:
        raise WhiteningError("patches have inconsistent lengths")
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise WhiteningError("patches must be a 2-D array of equal-length vectors")
    n = patches.shape[0]
    if n < 2:
        raise WhiteningError("at least two patches are needed to estimate moments")
    # shift by the first patch so constant coordinates give exactly zero variance
    shifted = patches - patches[0]
    offset = shifted.mean(axis=0)
    centered = shifted - offset
    mean = patches[0] + offset
    cov = centered.T @ centered / n
    return PatchMoments(mean, (cov + cov.T) / 2, n)


def accumulate_moments(chunks: Iterable[np.ndarray]) -> PatchMoments:
    """Streamed moments over patch chunks, merged left to right."""
    total = None
    for chunk in chunks:
        part = estimate_patch_moments(chunk)
        total = part if total is None else total.merge(part)
    if total is None:
        raise WhiteningError("no patches supplied")
    return total


def dataset_patch_moments(dataset: LabeledImageSet, patch_size: int, rng: np.random.Generator,
                          samples: int = MOMENT_SAMPLES, chunk: int = 50_000) -> PatchMoments:
    """Moments from ``samples`` patch positions drawn uniformly over the dataset."""
    positions = sample_patch_positions(len(dataset), dataset.side, patch_size, samples, rng)
    return accumulate_moments(
        gather_patches(dataset, positions[k:k + chunk], patch_size)
        for k in range(0, samples, chunk)
    )


@dataclass(frozen=True)
class WhiteningOperator:
    matrix: np.ndarray
    mean: np.ndarray
    regularizer: float
    orientation: str = ZCA

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, patches: np.ndarray) -> np.ndarray:
        """Whiten one patch ``(d,)`` or a stack ``(n, d)``."""
        patches = np.asarray(patches)
        if patches.shape[-1] != self.dim:
            raise WhiteningError(f"patch length {patches.shape[-1]} != operator dimension {self.dim}")
        return (patches - self.mean) @ self.matrix.T

    def fingerprint(self) -> bytes:
        return hashlib.sha1(to_bytes(self)).digest()


def build_whitening_operator(moments: PatchMoments, regularizer: float = 1e-3,
                             orientation: str = ZCA,
                             eig: EigenDecomposition | None = None) -> WhiteningOperator:
    """``ZCA: Q diag((lam+l_i)^-1/2) Q^T``; ``PCA: diag((lam+l_i)^-1/2) Q^T``."""
    if regularizer < 0:
        raise WhiteningError("regularizer must be non-negative")
    if orientation not in ORIENTATIONS:
        raise WhiteningError(f"unknown orientation {orientation!r}")
    if eig is None:
        eig = symmetric_eigendecomposition(moments.covariance)
    values, vectors = eig.values, eig.vectors
    if regularizer == 0:
        if values.size == 0 or values[-1] <= RANK_TOL * values[0]:
            raise WhiteningError("covariance is rank deficient; use a positive regularizer")
    scale = 1.0 / np.sqrt(regularizer + values)
    if orientation == ZCA:
        matrix = (vectors * scale) @ vectors.T
        matrix = (matrix + matrix.T) / 2
    else:
        matrix = scale[:, None] * vectors.T
    return WhiteningOperator(matrix, moments.mean.copy(), float(regularizer), orientation)


def whiten(patch: np.ndarray, op: WhiteningOperator) -> np.ndarray:
    return op.apply(patch)


def mahalanobis_distance(x: np.ndarray, y: np.ndarray, covariance: np.ndarray,
                         regularizer: float = 0.0) -> np.ndarray:
    """``sqrt((x-y)^T (lam*I + Sigma)^-1 (x-y))`` via a linear solve (no eigenvectors)."""
    diff = np.atleast_2d(np.asarray(x) - np.asarray(y))
    m = covariance + regularizer * np.eye(covariance.shape[0])
    sol = np.linalg.solve(m, diff.T).T
    out = np.sqrt(np.einsum("ij,ij->i", diff, sol))
    return out if np.ndim(x) > 1 or np.ndim(y) > 1 else out[0]


def to_bytes(op: WhiteningOperator) -> bytes:
    header = _OP_HEADER.pack(_OP_MAGIC, op.dim, op.regularizer, ORIENTATIONS.index(op.orientation))
    return (header + op.mean.astype("<f8").tobytes()
            + np.ascontiguousarray(op.matrix, dtype="<f8").tobytes())


def from_bytes(blob: bytes) -> WhiteningOperator:
    if len(blob) < _OP_HEADER.size:
        raise WhiteningError("truncated whitening file")
    magic, d, lam, orient = _OP_HEADER.unpack_from(blob)
    if magic != _OP_MAGIC:
        raise WhiteningError("not a whitening operator file")
    expected = _OP_HEADER.size + 8 * (d + d * d)
    if len(blob) != expected:
        raise WhiteningError(f"whitening file has {len(blob)} bytes, expected {expected}")
    body = np.frombuffer(blob, dtype="<f8", offset=_OP_HEADER.size)
    mean = body[:d].astype(np.float64)
    matrix = body[d:].reshape(d, d).astype(np.float64)
    return WhiteningOperator(matrix, mean, lam, ORIENTATIONS[orient])


def save_whitening(path: str, op: WhiteningOperator) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(op))


def load_whitening(path: str) -> WhiteningOperator:
    with open(path, "rb") as f:
        return from_bytes(f.read())
