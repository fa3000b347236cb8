"""Q-nearest-neighbor patch encoding, average pooling and the on-disk feature cache.

Scores are computed directly on raw images. With whitened atoms ``d`` the
squared whitened distance expands to

    ||W(p - mu) - d||^2 = ||W(p - mu)||^2 + 2 * (b_d - <p, W^T d>)
    b_d = ||d||^2 / 2 + <mu, W^T d>

so ranking atoms by ``score = b_d - <p, W^T d>`` at a fixed position ranks them
by distance. Filters ``W^T d`` are shared by ``d`` and ``-d``; only the biases
differ, and ``score(d) + score(-d) = ||d||^2``.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import time
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .dataset import LabeledImageSet, extract_patches
from .dictionary import Dictionary
from .whitening import WhiteningOperator

log = logging.getLogger(__name__)

HARD = "hard"
SOFT = "soft"
ASSIGNMENTS = (HARD, SOFT)
SOFT_LEVELS = 65535


class EncodingError(ValueError):
    pass


class PartialCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScoreMap:
    """``scores[d, r, c]``: distance surrogate of atom ``d`` at position ``(r, c)``.

    ``patch_sq_norms[r, c] = ||W(p - mu)||^2`` restores true squared distances as
    ``2 * scores + patch_sq_norms``.
    """

    scores: np.ndarray
    patch_sq_norms: np.ndarray

    def squared_distances(self) -> np.ndarray:
        return np.maximum(2.0 * self.scores + self.patch_sq_norms, 0.0)


@dataclass(frozen=True)
class BinaryFeatureMap:
    bits: np.ndarray
    q: int
    thresholds: np.ndarray


class PatchEncoder:
    """Precomputed convolution filters and biases for one (dictionary, whitening) pair."""

    def __init__(self, dictionary: Dictionary, op: WhiteningOperator, dtype=np.float64):
        if dictionary.dim != op.dim:
            raise EncodingError(f"dictionary dimension {dictionary.dim} != whitening dimension {op.dim}")
        self.dictionary = dictionary
        self.op = op
        self.patch_size = dictionary.patch_size
        self.dtype = dtype
        atoms = dictionary.positives
        # rows are W^T d for the positive atoms
        filters = atoms @ op.matrix
        half_norms = 0.5 * np.einsum("ij,ij->i", atoms, atoms)
        shift = filters @ op.mean
        self.filters = filters.astype(dtype)
        self.bias_pos = (half_norms + shift).astype(dtype)
        self.bias_neg = (half_norms - shift).astype(dtype)
        self.n_atoms = dictionary.size

    def source_digest(self) -> bytes:
        """SHA-1 over the atoms and the whitening operator; identifies cache provenance."""
        h = hashlib.sha1(np.ascontiguousarray(self.dictionary.atoms, dtype="<f8").tobytes())
        h.update(self.op.fingerprint())
        return h.digest()

    def output_side(self, image_side: int) -> int:
        return image_side - self.patch_size + 1

    def _patches(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1] * self.patch_size ** 2 != self.dictionary.dim:
            raise EncodingError("image channels do not match the dictionary")
        return np.stack([extract_patches(img, self.patch_size) for img in images])

    def scores(self, images: np.ndarray, with_norms: bool = False):
        """Surrogate scores, channels last: ``(B, L, 2|D|)`` for ``L`` positions."""
        patches = self._patches(images)
        ip = patches @ self.filters.T
        scores = np.concatenate([self.bias_pos - ip, self.bias_neg + ip], axis=-1)
        if not with_norms:
            return scores
        white = (patches - self.op.mean) @ self.op.matrix.T
        return scores, np.einsum("bld,bld->bl", white, white)

    def score_map(self, image: np.ndarray) -> ScoreMap:
        side = self.output_side(image.shape[-1])
        scores, norms = self.scores(image, with_norms=True)
        return ScoreMap(scores[0].T.reshape(self.n_atoms, side, side), norms[0].reshape(side, side))

    def encode(self, images: np.ndarray, q: int, assignment: str = HARD) -> np.ndarray:
        """Per-position encodings ``(B, 2|D|, H, W)``; uint8 bits or float soft values."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        side = self.output_side(images.shape[-1])
        check_q(q, self.n_atoms)
        if assignment == HARD:
            codes = select_smallest(self.scores(images), q)
        elif assignment == SOFT:
            scores, norms = self.scores(images, with_norms=True)
            codes = soft_assign(np.sqrt(np.maximum(2.0 * scores + norms[..., None], 0.0)), q)
        else:
            raise EncodingError(f"unknown assignment {assignment!r}")
        b = len(images)
        return codes.reshape(b, side, side, self.n_atoms).transpose(0, 3, 1, 2)

    def pooled(self, images: np.ndarray, q: int, k: int, s: int, assignment: str = HARD,
               dtype=np.float32) -> np.ndarray:
        """Pooled features ``(B, 2|D|, Hp, Wp)`` as window means."""
        return pool(self.encode(images, q, assignment), k, s).astype(dtype)

    def pooled_sums(self, images: np.ndarray, q: int, k: int, s: int) -> np.ndarray:
        """Integer window counts of hard bits (exact, for the quantized cache)."""
        bits = self.encode(images, q, HARD)
        return window_sum(bits.astype(np.uint16), k, s)


def check_q(q: int, n_atoms: int) -> None:
    if not 1 <= q <= n_atoms:
        raise EncodingError(f"Q={q} outside [1, {n_atoms}]")


def select_smallest(scores: np.ndarray, q: int) -> np.ndarray:
    """Bits marking the ``q`` smallest entries along the last axis.

    Ties at the ``q``-th value go to the lower index, so every row has exactly
    ``q`` ones.
    """
    check_q(q, scores.shape[-1])
    tau = np.partition(scores, q - 1, axis=-1)[..., q - 1:q]
    below = scores < tau
    at = scores == tau
    room = q - below.sum(axis=-1, keepdims=True)
    return (below | (at & (np.cumsum(at, axis=-1) <= room))).astype(np.uint8)


def kth_smallest(values: np.ndarray, q: int) -> np.ndarray:
    return np.partition(values, q - 1, axis=-1)[..., q - 1]


def soft_assign(distances: np.ndarray, q: int) -> np.ndarray:
    """``1 / (1 + exp(dist - tau))`` with ``tau`` the ``q``-th smallest distance."""
    check_q(q, distances.shape[-1])
    tau = kth_smallest(distances, q)[..., None]
    return expit(tau - distances)


def compute_scores(image: np.ndarray, dictionary: Dictionary, op: WhiteningOperator) -> ScoreMap:
    return PatchEncoder(dictionary, op).score_map(image)


def encode_hard(scores: ScoreMap, q: int) -> BinaryFeatureMap:
    s = np.moveaxis(scores.scores, 0, -1)
    bits = select_smallest(s, q)
    thresholds = kth_smallest(s, q).reshape(-1)
    return BinaryFeatureMap(np.moveaxis(bits, -1, 0), q, thresholds)


def encode_soft(scores: ScoreMap, q: int) -> np.ndarray:
    dist = np.sqrt(np.moveaxis(scores.squared_distances(), 0, -1))
    return np.moveaxis(soft_assign(dist, q), -1, 0)


def pooled_side(side: int, k: int, s: int) -> int:
    if k > side:
        raise EncodingError(f"pool kernel {k} larger than input {side}")
    return (side - k) // s + 1


def window_sum(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """Sum over ``k x k`` windows with stride ``s`` on the last two axes."""
    pooled_side(min(x.shape[-2:]), k, s)
    win = sliding_window_view(x, (k, k), axis=(-2, -1))[..., ::s, ::s, :, :]
    return win.sum(axis=(-2, -1))


def pool(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """Average pooling, kernel ``k``, stride ``s``, no padding."""
    return window_sum(np.asarray(x, dtype=np.float64), k, s) / (k * k)


def encoding_distance(a, b) -> int:
    """Hamming distance between two binary encodings of the same shape."""
    a = a.bits if isinstance(a, BinaryFeatureMap) else np.asarray(a)
    b = b.bits if isinstance(b, BinaryFeatureMap) else np.asarray(b)
    if a.shape != b.shape:
        raise EncodingError(f"shape mismatch {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


# feature cache -----------------------------------------------------------

_CACHE_MAGIC = b"PKFEAT"
_CACHE_VERSION = 1
# magic, version, count, channels, Hp, Wp, assignment, quantization, pool kernel
_CACHE_HEADER = struct.Struct("<6sHQIIIBBIII20s")
QUANT_U8_COUNTS = 0
QUANT_U16_FIXED = 1


@dataclass(frozen=True)
class CacheHeader:
    count: int
    channels: int
    height: int
    width: int
    assignment: str
    pool_kernel: int
    pool_stride: int = 0
    q: int = 0
    source: bytes = b"\0" * 20  # digest of the dictionary and whitening that produced it

    @property
    def quantization(self) -> int:
        return QUANT_U8_COUNTS if self.assignment == HARD else QUANT_U16_FIXED

    @property
    def feature_dtype(self):
        return np.dtype("u1") if self.assignment == HARD else np.dtype("<u2")

    @property
    def record_dtype(self) -> np.dtype:
        return np.dtype([("label", "u1"),
                         ("features", self.feature_dtype, (self.channels, self.height, self.width))])

    def pack(self) -> bytes:
        return _CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, self.count, self.channels,
                                  self.height, self.width, ASSIGNMENTS.index(self.assignment),
                                  self.quantization, self.pool_kernel, self.pool_stride, self.q,
                                  self.source)

    @classmethod
    def unpack(cls, blob: bytes) -> "CacheHeader":
        if len(blob) < _CACHE_HEADER.size:
            raise EncodingError("truncated feature cache header")
        magic, version, count, ch, h, w, mode, quant, k, stride, q, source = _CACHE_HEADER.unpack_from(blob)
        if magic != _CACHE_MAGIC:
            raise EncodingError("not a feature cache file")
        if version != _CACHE_VERSION:
            raise EncodingError(f"unsupported feature cache version {version}")
        if mode >= len(ASSIGNMENTS):
            raise EncodingError(f"unknown encoding mode {mode}")
        header = cls(count, ch, h, w, ASSIGNMENTS[mode], k, stride, q, source)
        if quant != header.quantization:
            raise EncodingError("quantization mode inconsistent with assignment")
        return header


def quantize(pooled: np.ndarray, header: CacheHeader) -> np.ndarray:
    if header.assignment == HARD:
        return np.rint(pooled * header.pool_kernel ** 2).astype(np.uint8)
    return np.rint(np.clip(pooled, 0.0, 1.0) * SOFT_LEVELS).astype("<u2")


def dequantize(raw: np.ndarray, header: CacheHeader, dtype=np.float32) -> np.ndarray:
    scale = header.pool_kernel ** 2 if header.assignment == HARD else SOFT_LEVELS
    return raw.astype(dtype) / dtype(scale)


class FeatureCache:
    """Read-only memory-mapped view of a complete feature cache."""

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as f:
            self.header = CacheHeader.unpack(f.read(_CACHE_HEADER.size))
        done = _complete_records(path, self.header)
        if done != self.header.count:
            raise PartialCacheError(f"{path}: {done}/{self.header.count} records present")
        self.records = np.memmap(path, dtype=self.header.record_dtype, mode="r",
                                 offset=_CACHE_HEADER.size, shape=(self.header.count,))
        self.labels = np.asarray(self.records["label"]).astype(np.int64)

    def __len__(self):
        return self.header.count

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.header.channels, self.header.height, self.header.width

    def features(self, index, dtype=np.float32) -> np.ndarray:
        return dequantize(np.asarray(self.records["features"][index]), self.header, dtype)


def _complete_records(path: str, header: CacheHeader) -> int:
    body = os.path.getsize(path) - _CACHE_HEADER.size
    return max(body, 0) // header.record_dtype.itemsize


def cache_status(path: str, header: CacheHeader) -> str:
    """'missing', 'complete', 'partial' or 'mismatch' for an expected header."""
    if not os.path.exists(path):
        return "missing"
    with open(path, "rb") as f:
        try:
            found = CacheHeader.unpack(f.read(_CACHE_HEADER.size))
        except EncodingError:
            return "mismatch"
    if found != header:
        return "mismatch"
    done = _complete_records(path, header)
    return "complete" if done == header.count else "partial"


def encode_dataset(dataset: LabeledImageSet, encoder: PatchEncoder, q: int, k: int, s: int,
                   path: str, assignment: str = HARD, batch_size: int = 8,
                   resume: bool = False) -> FeatureCache:
    """Encode every image in order and write the quantized pooled features to ``path``.

    A complete cache with a matching header is reused as is. A partial one is
    an error unless ``resume`` is set, in which case encoding continues after
    the last complete record.
    """
    if assignment not in ASSIGNMENTS:
        raise EncodingError(f"unknown assignment {assignment!r}")
    side = pooled_side(encoder.output_side(dataset.side), k, s)
    header = CacheHeader(len(dataset), encoder.n_atoms, side, side, assignment, k, s, q, encoder.source_digest())
    if assignment == HARD and k * k > 255:
        raise EncodingError("pool kernel too large for 8-bit counts")
    status = cache_status(path, header)
    start = 0
    if status == "complete":
        log.info("feature cache %s already complete, skipping", path)
        return FeatureCache(path)
    if status == "mismatch":
        raise EncodingError(f"{path} exists with a different layout")
    if status == "partial":
        if not resume:
            raise PartialCacheError(f"{path} is incomplete; pass resume=True to continue")
        start = _complete_records(path, header)
        with open(path, "r+b") as f:
            f.truncate(_CACHE_HEADER.size + start * header.record_dtype.itemsize)
    else:
        with open(path, "wb") as f:
            f.write(header.pack())
    t0 = time.perf_counter()
    rec = np.zeros(0, dtype=header.record_dtype)
    with open(path, "ab") as f:
        for lo in range(start, len(dataset), batch_size):
            hi = min(lo + batch_size, len(dataset))
            images = dataset.images(slice(lo, hi), encoder.dtype)
            if assignment == HARD:
                feats = encoder.pooled_sums(images, q, k, s).astype(np.uint8)
            else:
                feats = quantize(encoder.pooled(images, q, k, s, SOFT, np.float64), header)
            if len(rec) != hi - lo:
                rec = np.zeros(hi - lo, dtype=header.record_dtype)
            rec["label"] = dataset.labels[lo:hi]
            rec["features"] = feats
            f.write(rec.tobytes())
    elapsed = time.perf_counter() - t0
    log.info("encoded %d images in %.1fs (%.1f img/s)", len(dataset) - start, elapsed,
             (len(dataset) - start) / max(elapsed, 1e-9))
    return FeatureCache(path)
