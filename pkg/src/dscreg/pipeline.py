"""End-to-end registration: seeds, local spectral matching, hypothesis selection, refinement."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .consistency import ConsistencyParams, compatibility_matrix, normalize_rows
from .embed import EmbeddingNetwork, forward
from .errors import AllHypothesesDegenerate, DegenerateConfiguration, TooFewCorrespondences
from .geom import Correspondences, RigidTransform, as_correspondences, residuals, weighted_kabsch
from .spectral import DEFAULT_MAX_ITER, DEFAULT_TOL, leading_eigenvector

KD_TREE_MIN = 512
NMS_DIAMETER_FRACTION = 0.03


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = 0.10
    k_subset: int = 40
    seed_fraction: float = 0.10
    min_seeds: int = 4
    nms_radius: float | None = None  # None: 0.03 x scene diameter
    sigma_d: float | None = None  # None: tau
    refine_max_iter: int = 20
    spatial_only: bool = False
    eig_tol: float = DEFAULT_TOL
    eig_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.k_subset < 1:
            raise ValueError("k_subset must be at least 1")
        if not 0.0 < self.seed_fraction <= 1.0:
            raise ValueError("seed_fraction must lie in (0, 1]")
        if self.nms_radius is not None and self.nms_radius < 0:
            raise ValueError("nms_radius must be nonnegative")
        if self.sigma_d is not None and not self.sigma_d > 0:
            raise ValueError("sigma_d must be positive")
        if self.refine_max_iter < 1:
            raise ValueError("refine_max_iter must be at least 1")

    @property
    def effective_sigma_d(self) -> float:
        return self.tau if self.sigma_d is None else self.sigma_d

    def seed_count(self, n: int) -> int:
        return max(self.min_seeds, math.ceil(self.seed_fraction * n - 1e-9))


@dataclass(frozen=True, eq=False)
class Hypothesis:
    seed_index: int
    subset_indices: np.ndarray
    eigenvector: np.ndarray
    transform: RigidTransform | None
    consensus: int
    degenerate: bool = False
    eig_iterations: int = 0


@dataclass(eq=False)
class RegistrationReport:
    transform: RigidTransform
    labels: np.ndarray
    best_seed: int
    hypotheses_evaluated: int
    refine_iterations: int
    timing: dict[str, float] = field(default_factory=dict)  # seconds per stage
    seeds: list[int] = field(default_factory=list)
    consensus: int = 0
    refine_degenerate: bool = False
    refit_degenerate: bool = False
    confidences: np.ndarray | None = None

    @property
    def num_inliers(self) -> int:
        return int(np.count_nonzero(self.labels))


def worker_count() -> int:
    """Threads for per-seed work: ``DSC_THREADS`` if set and positive, else the CPU count."""
    raw = os.environ.get("DSC_THREADS", "").strip()
    try:
        n = int(raw) if raw else 0
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def scene_diameter(points: np.ndarray) -> float:
    """Bounding-box diagonal of a point set."""
    points = np.asarray(points).reshape(-1, 3)
    if len(points) == 0:
        return 0.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def select_seeds(corrs, confidences, n_seeds: int, nms_radius: float) -> list[int]:
    """Greedy non-maximum suppression over confidences in source space.

    Takes the most confident unsuppressed correspondence (lower index on
    ties), suppresses every source point strictly closer than ``nms_radius``,
    and repeats until ``n_seeds`` are chosen or none remain.
    """
    corrs = as_correspondences(corrs)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if len(conf) != len(corrs):
        raise ValueError("one confidence per correspondence required")
    order = np.lexsort((np.arange(len(conf)), -conf))
    alive = np.ones(len(conf), dtype=bool)
    seeds: list[int] = []
    for i in order:
        if len(seeds) >= n_seeds:
            break
        if not alive[i]:
            continue
        seeds.append(int(i))
        alive[i] = False
        if nms_radius > 0:
            d2 = np.sum((corrs.src - corrs.src[i]) ** 2, axis=1)
            alive &= d2 >= nms_radius * nms_radius
    return seeds


class KnnIndex:
    """Exact k-nearest-neighbour queries with (distance, index) ordering.

    Above ``KD_TREE_MIN`` rows a k-d tree proposes candidates; the final
    ranking always uses the same squared-distance formula as the linear scan,
    so both paths agree exactly.
    """

    def __init__(self, points: np.ndarray, use_tree: bool | None = None):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        n = len(self.points)
        if use_tree is None:
            use_tree = n > KD_TREE_MIN
        self.tree = cKDTree(self.points) if use_tree else None

    def _rank(self, seed: int, candidates: np.ndarray, k: int) -> np.ndarray:
        diff = self.points[candidates] - self.points[seed]
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((candidates, d2))
        return candidates[order[:k]]

    def query(self, seed: int, k: int) -> np.ndarray:
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        if self.tree is None:
            return self._rank(seed, np.arange(n), k)
        dist, _ = self.tree.query(self.points[seed], k=k)
        radius = float(np.max(dist))
        cand = self.tree.query_ball_point(self.points[seed], radius * (1 + 1e-9) + 1e-12)
        return self._rank(seed, np.asarray(sorted(cand), dtype=np.intp), k)


def knn_space(corrs: Correspondences, feats: np.ndarray | None) -> np.ndarray:
    """Points used for subset retrieval: normalized features, or raw 6-D coordinates."""
    if feats is None:
        return corrs.coords
    return normalize_rows(feats)[0]


def feature_knn(feats, seed_index: int, k: int, index: KnnIndex | None = None) -> np.ndarray:
    """Indices of the ``k`` rows nearest to the seed's row (seed included), ties to lower index.

    ``feats`` is used as given; pass :func:`knn_space` output for the pipeline's
    normalization convention.
    """
    if index is None:
        index = KnnIndex(np.asarray(feats, dtype=np.float64))
    return index.query(seed_index, k)


def seed_hypothesis(corrs, subset_indices, feats, params: ConsistencyParams, tau: float,
                    seed_index: int | None = None, eig_tol: float = DEFAULT_TOL,
                    eig_max_iter: int = DEFAULT_MAX_ITER) -> Hypothesis:
    """Spectral matching on one subset, eigenvector-weighted fit, consensus over all of ``corrs``."""
    corrs = as_correspondences(corrs)
    subset_indices = np.asarray(subset_indices, dtype=np.intp)
    if len(subset_indices) < 3:
        raise ValueError("a hypothesis needs at least 3 correspondences")
    seed = int(subset_indices[0]) if seed_index is None else int(seed_index)
    sub = corrs.subset(subset_indices)
    sub_feats = None if feats is None else np.asarray(feats)[subset_indices]
    m = compatibility_matrix(sub, sub_feats, params)
    eig = leading_eigenvector(m, eig_tol, eig_max_iter)
    try:
        t = weighted_kabsch(sub, eig.vector)
    except DegenerateConfiguration:
        return Hypothesis(seed, subset_indices, eig.vector, None, 0, True, eig.iterations)
    consensus = int(np.count_nonzero(residuals(t, corrs) < tau))
    return Hypothesis(seed, subset_indices, eig.vector, t, consensus, False, eig.iterations)


def select_hypothesis(hypotheses) -> Hypothesis:
    """Hypothesis with the largest consensus; ties go to the lower seed index."""
    valid = [h for h in hypotheses if not h.degenerate]
    if not valid:
        raise AllHypothesesDegenerate("every seed produced a degenerate fit")
    return min(valid, key=lambda h: (-h.consensus, h.seed_index))


@dataclass(frozen=True, eq=False)
class RefineResult:
    transform: RigidTransform
    iterations: int
    degenerate: bool = False


def post_refine(corrs, transform: RigidTransform, tau: float, max_iter: int = 20) -> RefineResult:
    """Iteratively reweighted refit until the inlier count stops changing.

    Each round labels ``res < tau``, stops if the count equals the previous
    round's, and otherwise refits with weights ``w_i / (1 + (res_i / tau)^2)``.
    The first refit always happens when any inliers exist.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    corrs = as_correspondences(corrs)
    current = transform
    res = residuals(current, corrs)
    prev = int(np.count_nonzero(res < tau))
    if prev == 0:
        return RefineResult(transform, 0)
    iterations = 0
    while iterations < max_iter:
        res = residuals(current, corrs)
        inl = res < tau
        num = int(np.count_nonzero(inl))
        if iterations > 0 and num == prev:
            break
        weights = np.where(inl, 1.0 / (1.0 + (res / tau) ** 2), 0.0)
        try:
            current = weighted_kabsch(corrs, weights)
        except DegenerateConfiguration:
            return RefineResult(current, iterations, True)
        iterations += 1
        prev = num
    return RefineResult(current, iterations)


@dataclass(frozen=True, eq=False)
class LabelResult:
    labels: np.ndarray
    transform: RigidTransform
    degenerate: bool = False


def final_labels(corrs, transform: RigidTransform, tau: float) -> LabelResult:
    """Label ``res < tau`` under ``transform``, then refit uniformly on the survivors.

    With fewer than three survivors (or a degenerate refit) the input
    transform is kept and ``degenerate`` is set.
    """
    corrs = as_correspondences(corrs)
    labels = residuals(transform, corrs) < tau
    idx = np.flatnonzero(labels)
    if len(idx) < 3:
        return LabelResult(labels, transform, True)
    try:
        refit = weighted_kabsch(corrs.subset(idx))
    except DegenerateConfiguration:
        return LabelResult(labels, transform, True)
    return LabelResult(labels, refit)


def register(corrs, net: EmbeddingNetwork | None = None, cfg: PipelineConfig = PipelineConfig(),
             src_cloud=None, dst_cloud=None, threads: int | None = None) -> RegistrationReport:
    """Estimate the rigid transform aligning ``src`` to ``dst`` from putative matches.

    Without a network (or with ``cfg.spatial_only``) confidences are uniform,
    subsets are retrieved in the 6-D coordinate space and the similarity
    term is dropped. ``src_cloud`` only sets the scene diameter for the
    default suppression radius. ``dst_cloud`` is accepted for symmetry.
    """
    corrs = as_correspondences(corrs)
    n = len(corrs)
    if n < 3:
        raise TooFewCorrespondences(f"registration needs at least 3 correspondences, got {n}")
    spatial_only = cfg.spatial_only or net is None
    sigma_d = cfg.effective_sigma_d
    timing: dict[str, float] = {}

    t0 = time.perf_counter()
    if spatial_only:
        feats, conf = None, np.ones(n)
        params = ConsistencyParams(sigma_d=sigma_d)
    else:
        feats, conf = forward(net, corrs, sigma_d)
        params = ConsistencyParams(sigma_d=sigma_d, sigma_f=net.sigma_f)
    timing["embed"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    radius = cfg.nms_radius
    if radius is None:
        cloud = corrs.src if src_cloud is None else np.asarray(src_cloud, dtype=np.float64)
        radius = NMS_DIAMETER_FRACTION * scene_diameter(cloud)
    seeds = select_seeds(corrs, conf, cfg.seed_count(n), radius)
    timing["seeds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    k = min(cfg.k_subset, n)
    index = KnnIndex(knn_space(corrs, feats))

    def one(seed: int) -> Hypothesis:
        subset = index.query(seed, k)
        if len(subset) < 3:
            return Hypothesis(seed, subset, np.ones(len(subset)), None, 0, True)
        return seed_hypothesis(corrs, subset, feats, params, cfg.tau, seed,
                               cfg.eig_tol, cfg.eig_max_iter)

    workers = worker_count() if threads is None else max(1, threads)
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hypotheses = list(pool.map(one, seeds))
    else:
        hypotheses = [one(s) for s in seeds]
    timing["hypotheses"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    best = select_hypothesis(hypotheses)
    timing["selection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    refined = post_refine(corrs, best.transform, cfg.tau, cfg.refine_max_iter)
    timing["refine"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    final = final_labels(corrs, refined.transform, cfg.tau)
    labels = residuals(final.transform, corrs) < cfg.tau
    timing["labels"] = time.perf_counter() - t0
    timing["total"] = sum(timing.values())

    return RegistrationReport(
        transform=final.transform,
        labels=labels,
        best_seed=best.seed_index,
        hypotheses_evaluated=len(hypotheses),
        refine_iterations=refined.iterations,
        timing=timing,
        seeds=seeds,
        consensus=best.consensus,
        refine_degenerate=refined.degenerate,
        refit_degenerate=final.degenerate,
        confidences=None if spatial_only else conf,
    )
