"""Leading eigenvector by power iteration and the classic spectral-matching baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .consistency import ConsistencyParams, compatibility_matrix
from .geom import RigidTransform, as_correspondences, weighted_kabsch

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 50
_TINY = 1e-15


@dataclass(frozen=True, eq=False)
class EigenResult:
    vector: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool = False


def _matvec(m: np.ndarray, e: np.ndarray) -> np.ndarray:
    # row-wise reduction with numpy's fixed summation order, no BLAS threading
    return np.add.reduce(m * e[None, :], axis=1)


def leading_eigenvector(m, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> EigenResult:
    """Perron vector of a symmetric nonnegative matrix.

    Starts from the all-ones vector and repeats ``e <- M e / ||M e||`` until the
    largest entrywise change drops below ``tol``. A matrix that maps the
    iterate to (numerically) zero yields the uniform vector flagged
    ``degenerate``.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    m = np.asarray(getattr(m, "entries", m), dtype=np.float64)
    k = m.shape[0]
    uniform = np.full(k, 1.0 / math.sqrt(k))
    e = uniform
    for it in range(1, max_iter + 1):
        nxt = _matvec(m, e)
        norm = math.sqrt(float(nxt @ nxt))
        if norm < _TINY:
            return EigenResult(uniform.copy(), it, False, True)
        nxt /= norm
        change = float(np.max(np.abs(nxt - e)))
        e = nxt
        if change < tol:
            return EigenResult(e, it, True)
    return EigenResult(e, max_iter, False)


def top_fraction(scores: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask of the ``ceil(fraction * n)`` highest scores, ties to lower index."""
    n = len(scores)
    keep = min(n, max(1, math.ceil(fraction * n - 1e-9)))
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    mask = np.zeros(n, dtype=bool)
    mask[order[:keep]] = True
    return mask


def traditional_sm(corrs, sigma_d: float, keep_fraction: float = 0.10,
                   tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
                   ) -> tuple[np.ndarray, RigidTransform]:
    """Global spectral matching over all correspondences.

    The eigenvector of the length-consistency graph is discretized by keeping
    the top ``keep_fraction`` entries; the kept set is fitted with uniform weights.
    """
    corrs = as_correspondences(corrs)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if len(corrs) * keep_fraction < 3 - 1e-9:
        raise ValueError(f"{len(corrs)} correspondences are too few for keep_fraction={keep_fraction}")
    m = compatibility_matrix(corrs, None, ConsistencyParams(sigma_d=sigma_d))
    eig = leading_eigenvector(m, tol, max_iter)
    labels = top_fraction(eig.vector, keep_fraction)
    return labels, weighted_kabsch(corrs.subset(np.flatnonzero(labels)))
