"""Cyclic Jacobi eigendecomposition for small dense symmetric matrices.

Each sweep visits every (p, q) pair once using the round-robin ordering, so
the n/2 rotations of a round touch disjoint rows and columns and can be
applied together with vectorized row/column updates. Cost is O(n^3) per sweep.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-8
OFFDIAG_TOL = 1e-12
NEGATIVE_TOL = 1e-8
MAX_SWEEPS = 100


class EigenError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending; ``vectors[:, k]`` pairs with ``values[k]``."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint index pairs for each of the rounds of one cyclic sweep.

    Uses the circle method; for odd ``n`` a phantom index sits out each round.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        left = players[:half]
        right = players[half:][::-1]
        p = np.array([min(a, b) for a, b in zip(left, right)])
        q = np.array([max(a, b) for a, b in zip(left, right)])
        keep = q < n
        rounds.append((p[keep], q[keep]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _offdiag_norm(a: np.ndarray) -> float:
    # direct sum; ||A||^2 - ||diag||^2 cancels catastrophically near convergence
    off = a[~np.eye(a.shape[0], dtype=bool)]
    return float(np.sqrt(np.dot(off, off)))


def jacobi_eigh(s: np.ndarray, tol: float = OFFDIAG_TOL, max_sweeps: int = MAX_SWEEPS):
    """Raw Jacobi iteration. Returns unsorted (eigenvalues, eigenvectors, sweeps)."""
    a = np.array(s, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), v, 0
    scale = np.linalg.norm(a)
    target = tol * scale
    rounds = round_robin_pairs(n)
    for sweep in range(max_sweeps + 1):
        if _offdiag_norm(a) <= target:
            return np.diag(a).copy(), v, sweep
        if sweep == max_sweeps:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            with np.errstate(over="ignore"):
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            # A <- J^T A J, applied as a row update then a column update
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - sn[:, None] * rq
            a[q, :] = sn[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * sn
            a[:, q] = cp * sn + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * sn
            v[:, q] = vp * sn + vq * c
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")


def symmetric_eigendecomposition(s: np.ndarray, negative_tol: float = NEGATIVE_TOL,
                                 psd: bool = True) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.

    With ``psd=True`` (covariance matrices) eigenvalues below
    ``-negative_tol * lambda_1`` raise, and the remaining small negatives are
    clamped to zero.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise EigenError(f"expected a square matrix, got shape {s.shape}")
    scale = max(np.abs(s).max(initial=0.0), 1.0)
    if np.abs(s - s.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise EigenError("matrix is not symmetric")
    values, vectors, _ = jacobi_eigh(s)
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    if psd and values.size:
        floor = -negative_tol * max(values[0], 0.0)
        if values[-1] < floor:
            raise EigenError(f"matrix is not positive semi-definite (eigenvalue {values[-1]:.3e})")
        values = np.maximum(values, 0.0)
    return EigenDecomposition(values, vectors)
