"""Rigid-transform algebra, weighted least-squares fitting and pose errors.

Correspondences are stored as two aligned ``(n, 3)`` arrays. Single
correspondences (:class:`Correspondence`) exist for convenience and for the
scalar helpers; everything hot works on :class:`Correspondences`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateConfiguration, SumWeightsZero

ORTHO_TOL = 1e-9
SVD_TOL = 1e-12
DEGENERACY_RATIO = 1e-12


def _as_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"point has non-finite coordinates: {p}")
    return p


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return (f"RigidTransform(rotation={self.rotation.tolist()}, "
                f"translation={self.translation.tolist()})")


@dataclass(frozen=True)
class Correspondence:
    src: np.ndarray
    dst: np.ndarray
    gt_label: bool | None = None
    confidence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "src", _as_point(self.src))
        object.__setattr__(self, "dst", _as_point(self.dst))
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(eq=False)
class Correspondences:
    """A set of putative matches ``src[i] <-> dst[i]`` with optional ground truth."""

    src: np.ndarray
    dst: np.ndarray
    labels: np.ndarray | None = None
    confidences: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.src = np.ascontiguousarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.ascontiguousarray(self.dst, dtype=np.float64).reshape(-1, 3)
        if self.src.shape != self.dst.shape:
            raise ValueError(f"src/dst shape mismatch: {self.src.shape} vs {self.dst.shape}")
        if not (np.all(np.isfinite(self.src)) and np.all(np.isfinite(self.dst))):
            raise ValueError("correspondences contain non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
            if len(self.labels) != len(self.src):
                raise ValueError("labels length does not match correspondence count")
        if self.confidences is not None:
            c = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
            if len(c) != len(self.src):
                raise ValueError("confidences length does not match correspondence count")
            if np.any(c < 0) or np.any(c > 1):
                raise ValueError("confidences must lie in [0, 1]")
            self.confidences = c

    @classmethod
    def from_list(cls, items: Iterable[Correspondence]) -> Correspondences:
        items = list(items)
        src = np.array([c.src for c in items]).reshape(-1, 3)
        dst = np.array([c.dst for c in items]).reshape(-1, 3)
        labels = None
        if items and all(c.gt_label is not None for c in items):
            labels = np.array([c.gt_label for c in items], dtype=bool)
        conf = None
        if items and all(c.confidence is not None for c in items):
            conf = np.array([c.confidence for c in items])
        return cls(src, dst, labels, conf)

    @classmethod
    def from_array(cls, coords, labels=None) -> Correspondences:
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 6)
        return cls(coords[:, :3], coords[:, 3:], labels)

    def __len__(self):
        return len(self.src)

    def __getitem__(self, i) -> Correspondence:
        label = None if self.labels is None else bool(self.labels[i])
        conf = None if self.confidences is None else float(self.confidences[i])
        return Correspondence(self.src[i], self.dst[i], label, conf)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> Correspondences:
        idx = np.asarray(indices)
        return Correspondences(
            self.src[idx], self.dst[idx],
            None if self.labels is None else self.labels[idx],
            None if self.confidences is None else self.confidences[idx],
        )

    @property
    def coords(self) -> np.ndarray:
        """The ``(n, 6)`` array of concatenated ``(src, dst)`` coordinates."""
        return np.hstack([self.src, self.dst])


def as_correspondences(corrs) -> Correspondences:
    """Coerce a ``Correspondences``, a sequence of ``Correspondence`` or an ``(n, 6)`` array."""
    if isinstance(corrs, Correspondences):
        return corrs
    if isinstance(corrs, np.ndarray):
        return Correspondences.from_array(corrs)
    return Correspondences.from_list(corrs)


def apply_transform(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def residual(t: RigidTransform, c: Correspondence) -> float:
    return float(np.linalg.norm(t.apply(c.src) - c.dst))


def residuals(t: RigidTransform, corrs: Correspondences) -> np.ndarray:
    """Vector of ``||R x_i + t - y_i||`` over a correspondence set."""
    diff = corrs.src @ t.rotation.T + t.translation - corrs.dst
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


# --- small-matrix SVD ------------------------------------------------------

def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def svd3(h) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix by one-sided Jacobi rotations.

    Returns ``(u, s, v)`` with ``h = u @ diag(s) @ v.T``, singular values in
    descending order and ``u``, ``v`` orthogonal. Columns of ``u`` belonging
    to zero singular values are completed to an orthonormal basis.
    Plain-float arithmetic keeps the result independent of BLAS threading.
    """
    h = np.asarray(h, dtype=np.float64)
    # work on columns: a[j] is column j of h
    a = [[float(h[0, j]), float(h[1, j]), float(h[2, j])] for j in range(3)]
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]  # v[j] is column j
    for _ in range(60):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            ap, aq = a[p], a[q]
            alpha = ap[0] * ap[0] + ap[1] * ap[1] + ap[2] * ap[2]
            beta = aq[0] * aq[0] + aq[1] * aq[1] + aq[2] * aq[2]
            gamma = ap[0] * aq[0] + ap[1] * aq[1] + ap[2] * aq[2]
            if gamma == 0.0 or abs(gamma) <= SVD_TOL * math.sqrt(alpha * beta):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            tan = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + tan * tan)
            s = c * tan
            a[p] = [c * ap[i] - s * aq[i] for i in range(3)]
            a[q] = [s * ap[i] + c * aq[i] for i in range(3)]
            vp, vq = v[p], v[q]
            v[p] = [c * vp[i] - s * vq[i] for i in range(3)]
            v[q] = [s * vp[i] + c * vq[i] for i in range(3)]
        if not rotated:
            break

    sig = [math.sqrt(col[0] ** 2 + col[1] ** 2 + col[2] ** 2) for col in a]
    order = sorted(range(3), key=lambda j: -sig[j])
    sig = [sig[j] for j in order]
    a = [a[j] for j in order]
    v = [v[j] for j in order]

    scale = sig[0]
    u = []
    for j in range(3):
        if scale > 0.0 and sig[j] > SVD_TOL * scale:
            u.append([x / sig[j] for x in a[j]])
        elif j == 0:
            u.append([1.0, 0.0, 0.0])
        elif j == 1:
            # any unit vector orthogonal to u[0]
            e = min(range(3), key=lambda i: abs(u[0][i]))
            w = [0.0, 0.0, 0.0]
            w[e] = 1.0
            w = _cross(u[0], w)
            n = math.sqrt(sum(x * x for x in w))
            u.append([x / n for x in w])
        else:
            u.append(_cross(u[0], u[1]))
    return np.array(u).T, np.array(sig), np.array(v).T


def weighted_kabsch(corrs, weights=None) -> RigidTransform:
    """Rigid transform minimizing ``sum_i w_i ||R x_i + t - y_i||^2``.

    Closed form: weighted centroids, weighted cross-covariance
    ``H = X~^T diag(w) Y~``, ``R = V diag(1, 1, det(V U^T)) U^T`` and
    ``t = y_bar - R x_bar``. The determinant correction keeps ``R`` a proper
    rotation when the unconstrained optimum is a reflection.

    Raises ``SumWeightsZero`` when the weights sum to zero and
    ``DegenerateConfiguration`` for fewer than three weighted points or
    collinear/coincident weighted source points.
    """
    corrs = as_correspondences(corrs)
    n = len(corrs)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != n:
        raise ValueError(f"{len(w)} weights for {n} correspondences")
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise SumWeightsZero("weights sum to zero")
    if np.count_nonzero(w) < 3:
        raise DegenerateConfiguration("fewer than 3 points carry positive weight")

    w = w / total
    x_bar = w @ corrs.src
    y_bar = w @ corrs.dst
    xc = corrs.src - x_bar
    yc = corrs.dst - y_bar
    h = (xc * w[:, None]).T @ yc

    u, s, v = svd3(h)
    if s[0] == 0.0 or s[1] < DEGENERACY_RATIO * s[0]:
        raise DegenerateConfiguration("weighted source points are collinear or coincident")
    d = 1.0 if np.linalg.det(v @ u.T) > 0 else -1.0
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, y_bar - rot @ x_bar)


def rotation_error(estimate: RigidTransform, truth: RigidTransform) -> float:
    """Geodesic angle (radians) between two rotations.

    Equal to ``arccos(clamp((tr(R_est^T R_true) - 1) / 2, -1, 1))``; evaluated as
    ``atan2(sin, cos)`` of the relative rotation so that angles near 0 and pi
    keep full precision.
    """
    q = estimate.rotation.T @ truth.rotation
    cos = (np.trace(q) - 1.0) / 2.0
    sin = 0.5 * math.sqrt((q[2, 1] - q[1, 2]) ** 2 + (q[0, 2] - q[2, 0]) ** 2
                          + (q[1, 0] - q[0, 1]) ** 2)
    cos = min(1.0, max(-1.0, cos))
    return math.atan2(sin, cos)


def translation_error(estimate: RigidTransform, truth: RigidTransform) -> float:
    return float(np.linalg.norm(estimate.translation - truth.translation))


def axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (Rodrigues)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def random_pose(rng: np.random.Generator, max_translation: float = 0.5) -> RigidTransform:
    """Rotation about a uniformly random axis by a uniform angle in [0, 2pi),
    translation uniform in ``[-max_translation, max_translation]`` per axis."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(axis_angle(axis, angle), t)
