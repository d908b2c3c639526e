"""Synthetic scenes, RANSAC baselines and registration metrics.

Randomness always comes from ``numpy.random.Generator(PCG64(seed))`` so scenes
and RANSAC draws are reproducible across platforms.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import forward
from .errors import AllSamplesDegenerate, DegenerateConfiguration
from .geom import (Correspondences, RigidTransform, as_correspondences, random_pose,
                   residuals, rotation_error, translation_error, weighted_kabsch)
from .io import write_json
from .pipeline import PipelineConfig, register, worker_count
from .spectral import traditional_sm

RE_THRESH_DEG = 15.0
TE_THRESH = 0.30


@dataclass(frozen=True)
class SceneSpec:
    n_corrs: int = 1000
    outlier_ratio: float = 0.9
    noise_sigma: float = 0.005
    extent: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_corrs < 1:
            raise ValueError("n_corrs must be positive")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise ValueError("outlier_ratio must lie in [0, 1)")
        if self.noise_sigma < 0 or self.extent <= 0:
            raise ValueError("noise_sigma must be >= 0 and extent > 0")

    @property
    def n_inliers(self) -> int:
        return int(round((1.0 - self.outlier_ratio) * self.n_corrs))


@dataclass(eq=False)
class Scene:
    corrs: Correspondences
    truth: RigidTransform
    spec: SceneSpec | None = None


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def generate_scene(spec: SceneSpec) -> Scene:
    """Random rigid scene with a known share of outlier correspondences.

    Inliers: ``y = R x + t + noise`` with ``x`` uniform in a centred cube and
    the noise norm kept below ``5 * noise_sigma``. Outliers: ``x`` and ``y``
    drawn independently from the source cube and its image, rejecting pairs
    that land within ``3 * noise_sigma + 0.05 * extent`` of consistency.
    Rows are shuffled so the index carries no label information.
    """
    rng = make_rng(spec.seed)
    truth = random_pose(rng)
    half = spec.extent / 2.0
    n_in = spec.n_inliers
    n_out = spec.n_corrs - n_in

    src_in = rng.uniform(-half, half, size=(n_in, 3))
    noise = rng.normal(0.0, spec.noise_sigma, size=(n_in, 3))
    if spec.noise_sigma > 0:
        limit = 5.0 * spec.noise_sigma
        bad = np.linalg.norm(noise, axis=1) >= limit
        while bad.any():
            noise[bad] = rng.normal(0.0, spec.noise_sigma, size=(int(bad.sum()), 3))
            bad = np.linalg.norm(noise, axis=1) >= limit
    dst_in = truth.apply(src_in) + noise

    margin = 3.0 * spec.noise_sigma + 0.05 * spec.extent
    src_out = rng.uniform(-half, half, size=(n_out, 3))
    dst_out = truth.apply(rng.uniform(-half, half, size=(n_out, 3)))
    bad = np.linalg.norm(truth.apply(src_out) - dst_out, axis=1) < margin
    while bad.any():
        dst_out[bad] = truth.apply(rng.uniform(-half, half, size=(int(bad.sum()), 3)))
        bad = np.linalg.norm(truth.apply(src_out) - dst_out, axis=1) < margin

    src = np.vstack([src_in, src_out])
    dst = np.vstack([dst_in, dst_out])
    labels = np.r_[np.ones(n_in, dtype=bool), np.zeros(n_out, dtype=bool)]
    perm = rng.permutation(spec.n_corrs)
    return Scene(Correspondences(src[perm], dst[perm], labels[perm]), truth, spec)


def ground_truth_labels(corrs, truth: RigidTransform, tau: float) -> np.ndarray:
    return residuals(truth, as_correspondences(corrs)) < tau


# --- RANSAC ----------------------------------------------------------------

def _weighted_sample(rng: np.random.Generator, weights: np.ndarray, size: int) -> list[int]:
    """Draw ``size`` distinct indices with probability proportional to ``weights``.

    Sequential inverse-CDF draws without replacement. A constant weight vector
    gives uniform draws, so plain and prioritized RANSAC share one rng stream.
    """
    w = weights.copy()
    chosen = []
    for _ in range(size):
        cum = np.cumsum(w)
        idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        idx = min(idx, len(w) - 1)
        while w[idx] == 0.0:  # float edge: landed on a removed or zero-weight slot
            idx = idx - 1 if idx > 0 else int(np.flatnonzero(w)[0])
        chosen.append(idx)
        w[idx] = 0.0
    return chosen


def _ransac(corrs: Correspondences, weights: np.ndarray, iterations: int, tau: float,
            rng_seed: int) -> tuple[RigidTransform, np.ndarray]:
    n = len(corrs)
    if n < 3:
        raise DegenerateConfiguration(f"RANSAC needs at least 3 correspondences, got {n}")
    if np.count_nonzero(weights) < 3:
        weights = np.ones(n)
    rng = make_rng(rng_seed)
    best, best_count = None, -1
    for _ in range(iterations):
        sample = _weighted_sample(rng, weights, 3)
        try:
            hyp = weighted_kabsch(corrs.subset(sample))
        except DegenerateConfiguration:
            continue
        count = int(np.count_nonzero(residuals(hyp, corrs) < tau))
        if count > best_count:
            best, best_count = hyp, count
    if best is None:
        raise AllSamplesDegenerate(f"all {iterations} minimal samples were degenerate")
    labels = residuals(best, corrs) < tau
    if np.count_nonzero(labels) >= 3:
        try:
            best = weighted_kabsch(corrs.subset(np.flatnonzero(labels)))
            labels = residuals(best, corrs) < tau
        except DegenerateConfiguration:
            pass
    return best, labels


def ransac(corrs, iterations: int = 1000, tau: float = 0.10, rng_seed: int = 0
           ) -> tuple[RigidTransform, np.ndarray]:
    """Hypothesize-and-verify over uniformly drawn minimal samples of 3.

    The best hypothesis (earliest on ties) is refit on its inliers with
    uniform weights; labels are thresholded under the returned transform.
    """
    corrs = as_correspondences(corrs)
    return _ransac(corrs, np.ones(len(corrs)), iterations, tau, rng_seed)


def prioritized_ransac(corrs, confidences, iterations: int = 1000, tau: float = 0.10,
                       rng_seed: int = 0) -> tuple[RigidTransform, np.ndarray]:
    """RANSAC whose minimal samples are drawn proportionally to ``confidences``."""
    corrs = as_correspondences(corrs)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if len(conf) != len(corrs):
        raise ValueError("one confidence per correspondence required")
    if np.any(conf < 0) or not np.all(np.isfinite(conf)):
        raise ValueError("confidences must be finite and nonnegative")
    return _ransac(corrs, conf, iterations, tau, rng_seed)


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class PairResult:
    """Outcome of one registration, enough for :func:`evaluate`."""

    transform: RigidTransform
    labels: np.ndarray


@dataclass(frozen=True)
class MetricsSummary:
    registration_recall: float
    inlier_precision: float
    inlier_recall: float
    f1: float
    mean_re: float
    mean_te: float
    n_pairs: int = 0
    n_success: int = 0

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mean_re_deg"] = math.degrees(self.mean_re) if not math.isnan(self.mean_re) else None
        for k in ("mean_re", "mean_te"):
            if math.isnan(d[k]):
                d[k] = None
        d["ip_ir_aggregation"] = "per-pair mean"
        return d


def f1_score(precision: float, recall: float) -> float:
    if precision <= 0.0 or recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def inlier_precision_recall(pred, gt) -> tuple[float, float]:
    """Precision and recall of predicted inliers; 0 when nothing is kept or no inliers exist."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    kept_inliers = np.count_nonzero(pred & gt)
    kept = np.count_nonzero(pred)
    total = np.count_nonzero(gt)
    return (kept_inliers / kept if kept else 0.0), (kept_inliers / total if total else 0.0)


def is_success(estimate: RigidTransform, truth: RigidTransform,
               re_thresh: float = math.radians(RE_THRESH_DEG), te_thresh: float = TE_THRESH) -> bool:
    return rotation_error(estimate, truth) < re_thresh and translation_error(estimate, truth) < te_thresh


def evaluate(results, tau: float = 0.10, re_thresh: float = math.radians(RE_THRESH_DEG),
             te_thresh: float = TE_THRESH) -> MetricsSummary:
    """Aggregate metrics over ``(result, scene)`` pairs.

    ``result`` is anything with ``transform`` and ``labels`` attributes. IP/IR
    are computed per pair against ground-truth labels at ``tau`` and averaged
    over pairs; mean RE/TE are over successful pairs only (NaN if none).
    """
    results = list(results)
    if not results:
        raise ValueError("evaluate needs at least one result")
    successes, res, tes, ips, irs, f1s = 0, [], [], [], [], []
    for result, scene in results:
        re = rotation_error(result.transform, scene.truth)
        te = translation_error(result.transform, scene.truth)
        if re < re_thresh and te < te_thresh:
            successes += 1
            res.append(re)
            tes.append(te)
        gt = scene.corrs.labels
        if gt is None:
            gt = ground_truth_labels(scene.corrs, scene.truth, tau)
        p, r = inlier_precision_recall(result.labels, gt)
        ips.append(p)
        irs.append(r)
        f1s.append(f1_score(p, r))
    n = len(results)
    return MetricsSummary(
        registration_recall=successes / n,
        inlier_precision=float(np.mean(ips)),
        inlier_recall=float(np.mean(irs)),
        f1=float(np.mean(f1s)),
        mean_re=float(np.mean(res)) if res else float("nan"),
        mean_te=float(np.mean(tes)) if tes else float("nan"),
        n_pairs=n,
        n_success=successes,
    )


# --- benchmark harness -----------------------------------------------------

@dataclass(frozen=True)
class Method:
    name: str
    iterations: int = 0

    @property
    def label(self) -> str:
        return f"{self.name}:{self.iterations}" if self.name in ("ransac", "pransac") else self.name


def parse_methods(text: str) -> list[Method]:
    """Parse ``pipeline,sm,ransac:ITERS,pransac:ITERS``."""
    methods = []
    for token in filter(None, (t.strip() for t in text.split(","))):
        name, _, iters = token.partition(":")
        if name in ("pipeline", "sm"):
            if iters:
                raise ValueError(f"method {name!r} takes no iteration count")
            methods.append(Method(name))
        elif name in ("ransac", "pransac"):
            try:
                n = int(iters) if iters else 1000
            except ValueError:
                raise ValueError(f"bad iteration count in {token!r}") from None
            if n < 1:
                raise ValueError(f"iteration count must be positive in {token!r}")
            methods.append(Method(name, n))
        else:
            raise ValueError(f"unknown method {name!r}")
    if not methods:
        raise ValueError("no methods given")
    return methods


def run_method(method: Method, scene: Scene, net=None, cfg=None, tau: float = 0.10) -> tuple[PairResult, int]:
    """Run one method on one scene; returns the result and its consensus count."""
    cfg = cfg or PipelineConfig(tau=tau)
    seed = scene.spec.seed if scene.spec is not None else 0
    if method.name == "pipeline":
        report = register(scene.corrs, net, cfg, threads=1)
        return PairResult(report.transform, report.labels), report.num_inliers
    if method.name == "sm":
        kept, t = traditional_sm(scene.corrs, cfg.effective_sigma_d)
        labels = residuals(t, scene.corrs) < cfg.tau
        return PairResult(t, labels), int(np.count_nonzero(labels))
    if method.name == "ransac":
        t, labels = ransac(scene.corrs, method.iterations, cfg.tau, seed)
    else:
        conf = np.ones(len(scene.corrs))
        if net is not None:
            _, conf = forward(net, scene.corrs, cfg.effective_sigma_d)
        t, labels = prioritized_ransac(scene.corrs, conf, method.iterations, cfg.tau, seed)
    return PairResult(t, labels), int(np.count_nonzero(labels))


def run_benchmark(n_scenes: int, outlier_ratio: float, methods, out_dir=None, n_corrs: int = 1000,
                  noise_sigma: float = 0.005, first_seed: int = 0, net=None, cfg=None,
                  threads: int | None = None) -> dict:
    """Evaluate methods on ``n_scenes`` generated scenes (seeds ``first_seed + i``).

    Writes ``results.csv`` (one row per scene and method) and ``summary.json``
    to ``out_dir`` when given, and returns the summary dict keyed by method.
    Scenes run in parallel; rows and aggregates follow scene order.
    """
    if isinstance(methods, str):
        methods = parse_methods(methods)
    cfg = cfg or PipelineConfig()
    specs = [SceneSpec(n_corrs=n_corrs, outlier_ratio=outlier_ratio, noise_sigma=noise_sigma,
                       seed=first_seed + i) for i in range(n_scenes)]

    def job(spec):
        scene = generate_scene(spec)
        out = []
        for m in methods:
            t0 = time.perf_counter()
            try:
                result, consensus = run_method(m, scene, net, cfg)
            except (DegenerateConfiguration, AllSamplesDegenerate):
                result, consensus = PairResult(RigidTransform.identity(),
                                               np.zeros(len(scene.corrs), dtype=bool)), 0
            out.append((m, result, consensus, time.perf_counter() - t0))
        return scene, out

    workers = worker_count() if threads is None else max(1, threads)
    if workers > 1 and n_scenes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(job, specs))
    else:
        done = [job(s) for s in specs]

    rows = []
    per_method: dict[str, list] = {m.label: [] for m in methods}
    for scene, outs in done:
        for m, result, consensus, secs in outs:
            per_method[m.label].append((result, scene))
            rows.append({
                "scene_seed": scene.spec.seed,
                "method": m.label,
                "re_deg": math.degrees(rotation_error(result.transform, scene.truth)),
                "te": translation_error(result.transform, scene.truth),
                "consensus": consensus,
                "runtime_ms": 1000.0 * secs,
            })
    summary = {label: evaluate(res, cfg.tau).as_dict() for label, res in per_method.items()}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "results.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else
                                    ["scene_seed", "method", "re_deg", "te", "consensus", "runtime_ms"],
                                    lineterminator="\n")
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (format(v, ".17g") if isinstance(v, float) else v)
                                 for k, v in r.items()})
        write_json({"outlier_ratio": outlier_ratio, "n_scenes": n_scenes, "n_corrs": n_corrs,
                    "methods": summary}, out_dir / "summary.json")
    return {"rows": rows, "summary": summary}
