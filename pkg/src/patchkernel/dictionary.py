"""Random whitened patch dictionaries, augmented with their negations."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import LabeledImageSet, DatasetError, gather_patches, sample_patch_positions
from .whitening import WhiteningOperator

_MAGIC = b"PKDICT"
_VERSION = 1
# magic, version, base size, patch side, seed, d_ext, has provenance, whitening sha1
_HEADER = struct.Struct("<6sHQIqIB20s")
NO_SEED = -1


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class Dictionary:
    """``atoms[:base_size]`` are the sampled atoms, ``atoms[base_size:]`` their negations."""

    atoms: np.ndarray
    base_size: int
    patch_size: int
    seed: int = NO_SEED
    provenance: np.ndarray | None = None
    whitening_ref: bytes = b"\0" * 20

    def __post_init__(self):
        if self.atoms.shape != (2 * self.base_size, 3 * self.patch_size ** 2):
            raise DictionaryError(
                f"atoms shape {self.atoms.shape} inconsistent with |D|={self.base_size}, P={self.patch_size}")

    @property
    def size(self) -> int:
        return 2 * self.base_size

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def positives(self) -> np.ndarray:
        return self.atoms[:self.base_size]

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        prov_equal = (self.provenance is None and other.provenance is None) or (
            self.provenance is not None and other.provenance is not None
            and np.array_equal(self.provenance, other.provenance))
        return (self.base_size == other.base_size and self.patch_size == other.patch_size
                and self.seed == other.seed and self.whitening_ref == other.whitening_ref
                and np.array_equal(self.atoms, other.atoms) and prov_equal)

    __hash__ = None


def with_negations(atoms: np.ndarray) -> np.ndarray:
    return np.concatenate([atoms, -atoms])


def sample_dictionary(dataset: LabeledImageSet, size: int, patch_size: int,
                      op: WhiteningOperator, rng: np.random.Generator | int) -> Dictionary:
    """Whitened patches at uniformly drawn (image, row, col), with replacement."""
    if size < 1:
        raise DictionaryError("dictionary size must be at least 1")
    if len(dataset) == 0:
        raise DatasetError("cannot sample a dictionary from an empty dataset")
    seed = rng if isinstance(rng, (int, np.integer)) else NO_SEED
    rng = np.random.default_rng(rng)
    positions = sample_patch_positions(len(dataset), dataset.side, patch_size, size, rng)
    atoms = op.apply(gather_patches(dataset, positions, patch_size))
    return Dictionary(with_negations(atoms), size, patch_size, int(seed),
                      positions.astype(np.int32), op.fingerprint())


def sample_gaussian_dictionary(size: int, patch_size: int, rng: np.random.Generator | int) -> Dictionary:
    """Data-independent dictionary of i.i.d. standard normal atoms (not whitened)."""
    if size < 1:
        raise DictionaryError("dictionary size must be at least 1")
    seed = rng if isinstance(rng, (int, np.integer)) else NO_SEED
    rng = np.random.default_rng(rng)
    atoms = rng.standard_normal((size, 3 * patch_size ** 2))
    return Dictionary(with_negations(atoms), size, patch_size, int(seed))


def to_bytes(d: Dictionary) -> bytes:
    has_prov = d.provenance is not None
    header = _HEADER.pack(_MAGIC, _VERSION, d.base_size, d.patch_size, d.seed, d.dim,
                          int(has_prov), d.whitening_ref)
    parts = [header, np.ascontiguousarray(d.atoms, dtype="<f8").tobytes()]
    if has_prov:
        parts.append(np.ascontiguousarray(d.provenance, dtype="<i4").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> Dictionary:
    if len(blob) < _HEADER.size:
        raise DictionaryError("truncated dictionary file")
    magic, version, base, p, seed, dim, has_prov, ref = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise DictionaryError("not a dictionary file")
    if version != _VERSION:
        raise DictionaryError(f"unsupported dictionary version {version}")
    n_atoms = 8 * 2 * base * dim
    expected = _HEADER.size + n_atoms + (12 * base if has_prov else 0)
    if len(blob) != expected:
        raise DictionaryError(f"dictionary file has {len(blob)} bytes, expected {expected}")
    atoms = np.frombuffer(blob, "<f8", count=2 * base * dim, offset=_HEADER.size)
    atoms = atoms.reshape(2 * base, dim).astype(np.float64)
    prov = None
    if has_prov:
        prov = np.frombuffer(blob, "<i4", offset=_HEADER.size + n_atoms).reshape(base, 3).astype(np.int32)
    return Dictionary(atoms, base, p, seed, prov, ref)


def save_dictionary(path: str, d: Dictionary) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(d))


def load_dictionary(path: str) -> Dictionary:
    with open(path, "rb") as f:
        return from_bytes(f.read())
