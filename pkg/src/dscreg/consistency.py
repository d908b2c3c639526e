"""Pairwise length consistency, feature similarity and the compatibility matrix."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ZeroNormFeatureWarning
from .geom import Correspondence, Correspondences, as_correspondences

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class ConsistencyParams:
    sigma_d: float = 0.10
    sigma_f: float = 1.0

    def __post_init__(self):
        for name in ("sigma_d", "sigma_f"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True, eq=False)
class CompatibilityMatrix:
    """Symmetric ``k x k`` compatibility scores in [0, 1] with a zero diagonal.

    ``zero_norm_rows`` lists feature rows that were too small to normalize.
    """

    entries: np.ndarray
    zero_norm_rows: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def zero_norm_feature(self) -> bool:
        return bool(self.zero_norm_rows)

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def length_difference(c_i: Correspondence, c_j: Correspondence) -> float:
    return abs(float(np.linalg.norm(c_i.src - c_j.src)) - float(np.linalg.norm(c_i.dst - c_j.dst)))


def spatial_consistency(c_i: Correspondence, c_j: Correspondence, sigma_d: float) -> float:
    d = length_difference(c_i, c_j)
    return max(0.0, 1.0 - d * d / (sigma_d * sigma_d))


def _pairwise_distances(p: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def length_difference_matrix(corrs) -> np.ndarray:
    corrs = as_correspondences(corrs)
    return np.abs(_pairwise_distances(corrs.src) - _pairwise_distances(corrs.dst))


def spatial_consistency_matrix(corrs, sigma_d: float) -> np.ndarray:
    """Matrix of ``beta_ij = [1 - d_ij^2 / sigma_d^2]_+`` with unit diagonal."""
    d = length_difference_matrix(corrs)
    beta = np.maximum(0.0, 1.0 - (d * d) / (sigma_d * sigma_d))
    np.fill_diagonal(beta, 1.0)
    return beta


def normalize_rows(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; rows with norm below ``ZERO_NORM`` become zero.

    Returns the normalized matrix and the boolean mask of zero-norm rows.
    """
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    small = norms[..., 0] < ZERO_NORM
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    out = np.where(norms < ZERO_NORM, 0.0, feats / safe)
    return out, small


def feature_similarity(f_i, f_j, sigma_f: float) -> float:
    """``gamma = [1 - ||f_i/|f_i| - f_j/|f_j| ||^2 / sigma_f^2]_+``."""
    both, small = normalize_rows(np.vstack([np.ravel(f_i), np.ravel(f_j)]))
    if small.any():
        warnings.warn("zero-norm feature row normalized to the zero vector",
                      ZeroNormFeatureWarning, stacklevel=2)
    diff = both[0] - both[1]
    return max(0.0, 1.0 - float(diff @ diff) / (sigma_f * sigma_f))


def feature_similarity_matrix(feats, sigma_f: float) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs ``gamma`` (diagonal included) and the zero-norm row mask."""
    fn, small = normalize_rows(feats)
    sq = np.einsum("ij,ij->i", fn, fn)
    gram = fn @ fn.T
    gram = 0.5 * (gram + gram.T)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    return np.maximum(0.0, 1.0 - dist2 / (sigma_f * sigma_f)), small


def compatibility_matrix(corrs, feats=None, params: ConsistencyParams = ConsistencyParams()
                         ) -> CompatibilityMatrix:
    """``M_ij = beta_ij * gamma_ij`` with the diagonal forced to zero.

    Without features the similarity term is identically one, which reduces to
    the classic length-consistency graph.
    """
    corrs = as_correspondences(corrs)
    if len(corrs) < 2:
        raise ValueError("compatibility needs at least 2 correspondences")
    m = spatial_consistency_matrix(corrs, params.sigma_d)
    zero_rows: tuple[int, ...] = ()
    if feats is not None:
        feats = np.asarray(feats)
        if feats.shape[0] != len(corrs):
            raise ValueError(f"{feats.shape[0]} feature rows for {len(corrs)} correspondences")
        gamma, small = feature_similarity_matrix(feats, params.sigma_f)
        m = m * gamma
        zero_rows = tuple(int(i) for i in np.flatnonzero(small))
    np.fill_diagonal(m, 0.0)
    return CompatibilityMatrix(m, zero_rows)
