"""Patch geometry diagnostics: covariance spectrum, covariance dimension, intrinsic dimension."""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import LabeledImageSet, gather_patches, sample_patch_positions
from .eigen import symmetric_eigendecomposition
from .whitening import build_whitening_operator, estimate_patch_moments

SWEEP_FIELDS = ("P", "dExt", "dCovRaw", "dCovWhite", "dIntRaw", "dIntWhite")
SPECTRUM_FIELDS = ("index", "value")


class AnalysisError(ValueError):
    pass


def covariance_spectrum(covariance: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Singular values of ``Sigma^(1/2)`` in decreasing order, optionally over the largest."""
    values = np.sqrt(symmetric_eigendecomposition(covariance).values)
    if normalize:
        if values[0] <= 0:
            raise AnalysisError("cannot normalize an all-zero spectrum")
        values = values / values[0]
    return values


def covariance_dimension(eigenvalues: np.ndarray, threshold: float = 0.95) -> int:
    """Smallest ``k`` with ``sum(l[:k]) >= threshold * sum(l)`` for descending variances ``l``."""
    ev = np.asarray(eigenvalues, dtype=np.float64)
    if ev.size == 0 or not np.any(ev > 0):
        raise AnalysisError("spectrum is empty or all zero")
    if np.any(ev < 0) or np.any(np.diff(ev) > 0):
        raise AnalysisError("eigenvalues must be non-negative and sorted descending")
    csum = np.cumsum(ev)
    # relative slack so an exactly-representable fraction is not lost to rounding
    k = int(np.searchsorted(csum, threshold * csum[-1] * (1 - 1e-12))) + 1
    return min(k, ev.size)


def intrinsic_dimension_local(distances: np.ndarray) -> float:
    """MLE estimate from ascending neighbor distances ``tau_1 <= ... <= tau_K``."""
    tau = np.asarray(distances, dtype=np.float64)
    if tau.size < 2:
        raise AnalysisError("need at least two neighbor distances")
    if np.any(tau <= 0):
        raise AnalysisError("zero neighbor distance (duplicate point)")
    return 1.0 / np.mean(np.log(tau[-1] / tau[:-1]))


@dataclass(frozen=True)
class IntrinsicDimension:
    value: float
    local: np.ndarray
    skipped: int
    k: int


def knn_distances(points: np.ndarray, anchors: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Exact ascending distances from each anchor index to its ``k`` nearest other points."""
    x = np.asarray(points, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty((len(anchors), k))
    for lo in range(0, len(anchors), chunk):
        a = anchors[lo:lo + chunk]
        d2 = sq[a, None] + sq[None, :] - 2.0 * x[a] @ x.T
        d2[np.arange(len(a)), a] = np.inf  # exclude self, keep duplicates
        part = np.partition(d2, k - 1, axis=1)[:, :k]
        part.sort(axis=1)
        out[lo:lo + len(a)] = np.sqrt(np.maximum(part, 0.0))
    return out


def intrinsic_dimension(points: np.ndarray, k: int, max_anchors: int | None = None,
                        rng: np.random.Generator | int = 0) -> IntrinsicDimension:
    """Average of local MLE estimates over anchors, with brute-force neighbors.

    Anchors whose neighbor list contains a zero distance are skipped and counted.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 2 or n <= k:
        raise AnalysisError(f"need more than K={k} points, got {n}")
    anchors = np.arange(n)
    if max_anchors is not None and max_anchors < n:
        anchors = np.sort(np.random.default_rng(rng).choice(n, size=max_anchors, replace=False))
    tau = knn_distances(points, anchors, k)
    ok = np.all(tau > 0, axis=1)
    if not ok.any():
        raise AnalysisError("every anchor has a duplicate neighbor")
    logs = np.log(tau[ok, -1:] / tau[ok, :-1])
    local = 1.0 / logs.mean(axis=1)
    return IntrinsicDimension(float(local.mean()), local, int((~ok).sum()), k)


@dataclass(frozen=True)
class DimensionReport:
    P: int
    dExt: int
    dCovRaw: int
    dCovWhite: int
    dIntRaw: float
    dIntWhite: float
    K: int
    dictSize: int
    regularizer: float

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k in SWEEP_FIELDS}


def patch_dimensions(patches: np.ndarray, moments_patches: np.ndarray, regularizer: float,
                     k: int, patch_size: int, max_anchors: int | None = None,
                     rng: np.random.Generator | int = 0) -> DimensionReport:
    """Dimensions of a patch sample before and after whitening.

    ``moments_patches`` estimates the whitening statistics; ``patches`` is the
    sample being measured (a dictionary-sized draw).
    """
    moments = estimate_patch_moments(moments_patches)
    eig = symmetric_eigendecomposition(moments.covariance)
    op = build_whitening_operator(moments, regularizer, eig=eig)
    white = op.apply(patches)
    white_cov = estimate_patch_moments(white).covariance
    d_cov_raw = covariance_dimension(eig.values)
    d_cov_white = covariance_dimension(symmetric_eigendecomposition(white_cov).values)
    d_int_raw = intrinsic_dimension(patches, k, max_anchors, rng).value
    d_int_white = intrinsic_dimension(white, k, max_anchors, rng).value
    return DimensionReport(patch_size, patches.shape[1], d_cov_raw, d_cov_white,
                           d_int_raw, d_int_white, k, len(patches), regularizer)


def dimension_sweep(dataset: LabeledImageSet, patch_sizes, regularizer: float = 1e-3,
                    dict_size: int = 16_000, k: int = 4_000, moment_samples: int = 100_000,
                    max_anchors: int | None = None, seed: int = 0) -> list[DimensionReport]:
    reports = []
    for p in patch_sizes:
        if not 1 <= p <= dataset.side:
            raise AnalysisError(f"invalid patch size {p}")
        rng = np.random.default_rng([seed, p])
        pos_m = sample_patch_positions(len(dataset), dataset.side, p, moment_samples, rng)
        pos_d = sample_patch_positions(len(dataset), dataset.side, p, dict_size, rng)
        reports.append(patch_dimensions(gather_patches(dataset, pos_d, p),
                                        gather_patches(dataset, pos_m, p),
                                        regularizer, k, p, max_anchors, rng))
    return reports


def write_sweep_csv(path: str, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_spectrum_csv(path: str, spectrum: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SPECTRUM_FIELDS)
        for i, v in enumerate(spectrum, start=1):
            w.writerow([i, repr(float(v))])
