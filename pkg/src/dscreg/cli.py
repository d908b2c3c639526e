"""Command-line entry points: register, synth, benchmark, train.

Exit codes: 0 success, 2 parse or configuration error, 3 degenerate registration.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import bench, io
from .embed import EmbedConfig, EmbeddingNetwork, TrainConfig, load_weights, save_weights, train
from .errors import (AllHypothesesDegenerate, AllSamplesDegenerate, DegenerateConfiguration,
                     ParseError, TooFewCorrespondences, WeightFileError)
from .geom import rotation_error, translation_error
from .pipeline import PipelineConfig, register

log = logging.getLogger("dscreg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3

_D = PipelineConfig()
_T = TrainConfig()
_E = EmbedConfig()


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _ratio(text):
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dscreg", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", formatter_class=fmt,
                       help="register a correspondence CSV and write a JSON report")
    p.add_argument("--corrs", required=True, type=Path, help="correspondence CSV")
    p.add_argument("--weights", type=Path, default=None,
                   help="trained network weights; without them the run is spatial-only")
    p.add_argument("--spatial-only", action="store_true", help="ignore learned features")
    p.add_argument("--tau", type=_positive(float), default=_D.tau, help="inlier threshold")
    p.add_argument("--k", type=_positive(int), default=_D.k_subset, help="subset size per seed")
    p.add_argument("--sigma-d", type=_positive(float), default=None,
                   help="length-consistency sensitivity; None means equal to --tau")
    p.add_argument("--seed-fraction", type=_positive(float), default=_D.seed_fraction,
                   help="seeds as a fraction of correspondences")
    p.add_argument("--min-seeds", type=_positive(int), default=_D.min_seeds, help="minimum seed count")
    p.add_argument("--nms-radius", type=float, default=None,
                   help="seed suppression radius; None means 0.03 x source diameter")
    p.add_argument("--refine-max-iter", type=_positive(int), default=_D.refine_max_iter,
                   help="post-refinement iteration cap")
    p.add_argument("--src-cloud", type=Path, default=None,
                   help="source point cloud (XYZ/PLY) used for the scene diameter")
    p.add_argument("--truth", type=Path, default=None, help="ground-truth transform JSON")
    p.add_argument("--eval", action="store_true", help="print RE/TE against --truth")
    p.add_argument("--out", required=True, type=Path, help="output report JSON")

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="write a synthetic correspondence CSV and its truth transform")
    p.add_argument("--n", type=_positive(int), default=1000, help="number of correspondences")
    p.add_argument("--outlier-ratio", type=_ratio, default=0.9, help="fraction of outliers")
    p.add_argument("--noise", type=float, default=0.005, help="inlier noise standard deviation")
    p.add_argument("--extent", type=_positive(float), default=3.0, help="side of the sampling cube")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, type=Path, help="output correspondence CSV")
    p.add_argument("--truth-out", type=Path, default=None,
                   help="truth transform JSON; None means <out stem>.truth.json")

    p = sub.add_parser("benchmark", formatter_class=fmt,
                       help="compare methods on generated scenes")
    p.add_argument("--scenes", type=_positive(int), default=100, help="number of scenes")
    p.add_argument("--outlier-ratio", type=_ratio, default=0.9, help="fraction of outliers")
    p.add_argument("--methods", default="pipeline,sm,ransac:1000,pransac:1000",
                   help="comma-separated methods: pipeline, sm, ransac:ITERS, pransac:ITERS")
    p.add_argument("--out-dir", required=True, type=Path, help="directory for results.csv and summary.json")
    p.add_argument("--n", type=_positive(int), default=1000, help="correspondences per scene")
    p.add_argument("--noise", type=float, default=0.005, help="inlier noise standard deviation")
    p.add_argument("--first-seed", type=int, default=0, help="seed of the first scene")
    p.add_argument("--tau", type=_positive(float), default=_D.tau, help="inlier threshold")
    p.add_argument("--weights", type=Path, default=None,
                   help="network weights for the pipeline and pransac confidences")

    p = sub.add_parser("train", formatter_class=fmt, help="train the embedding network")
    p.add_argument("--scenes", type=_positive(int), default=2000, help="number of training scenes")
    p.add_argument("--steps", type=int, default=_T.steps, help="optimizer steps")
    p.add_argument("--seed", type=int, default=_T.seed, help="seed for initialization, scenes and augmentation")
    p.add_argument("--out-weights", required=True, type=Path, help="output weight file")
    p.add_argument("--n", type=_positive(int), default=100, help="correspondences per training scene")
    p.add_argument("--outlier-ratio", type=_ratio, default=0.7, help="fraction of outliers")
    p.add_argument("--batch", type=_positive(int), default=_T.batch, help="scenes per step")
    p.add_argument("--lr", type=_positive(float), default=_T.learning_rate, help="learning rate")
    p.add_argument("--lambda", dest="lam", type=float, default=_T.lam, help="classification loss weight")
    p.add_argument("--sigma-d", type=_positive(float), default=_T.sigma_d, help="length-consistency sensitivity")
    p.add_argument("--blocks", type=_positive(int), default=_E.num_blocks, help="nonlocal blocks")
    p.add_argument("--dim", type=_positive(int), default=_E.feature_dim, help="feature dimension")
    p.add_argument("--no-augment", action="store_true", help="disable data augmentation")
    p.add_argument("--no-normalization", action="store_true", help="disable batch normalization")
    return parser


def _cmd_register(args) -> int:
    corrs = io.read_correspondences(args.corrs)
    net = None if args.weights is None else load_weights(args.weights)
    cfg = PipelineConfig(tau=args.tau, k_subset=args.k, seed_fraction=args.seed_fraction,
                         min_seeds=args.min_seeds, nms_radius=args.nms_radius, sigma_d=args.sigma_d,
                         refine_max_iter=args.refine_max_iter,
                         spatial_only=args.spatial_only or net is None)
    src_cloud = None if args.src_cloud is None else io.read_point_cloud(args.src_cloud)
    report = register(corrs, net, cfg, src_cloud=src_cloud)
    io.write_report(report, args.out)
    log.info("wrote %s (%d inliers of %d)", args.out, report.num_inliers, len(corrs))
    if args.eval:
        if args.truth is None:
            raise ValueError("--eval needs --truth")
        truth = io.read_transform(args.truth)
        re = rotation_error(report.transform, truth)
        te = translation_error(report.transform, truth)
        print(f"RE={re:.17g} RE_deg={math.degrees(re):.17g} TE={te:.17g}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    scene = bench.generate_scene(bench.SceneSpec(n_corrs=args.n, outlier_ratio=args.outlier_ratio,
                                                 noise_sigma=args.noise, extent=args.extent,
                                                 seed=args.seed))
    truth_path = args.truth_out or args.out.with_name(args.out.stem + ".truth.json")
    io.write_correspondences(scene.corrs, args.out)
    io.write_transform(scene.truth, truth_path)
    log.info("wrote %s and %s", args.out, truth_path)
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    methods = bench.parse_methods(args.methods)
    net = None if args.weights is None else load_weights(args.weights)
    result = bench.run_benchmark(args.scenes, args.outlier_ratio, methods, args.out_dir,
                                 n_corrs=args.n, noise_sigma=args.noise, first_seed=args.first_seed,
                                 net=net, cfg=PipelineConfig(tau=args.tau))
    for label, summary in result["summary"].items():
        print(f"{label}: RR={summary['registration_recall']:.4f} IP={summary['inlier_precision']:.4f} "
              f"IR={summary['inlier_recall']:.4f} F1={summary['f1']:.4f}")
    return EXIT_OK


def _cmd_train(args) -> int:
    specs = [bench.SceneSpec(n_corrs=args.n, outlier_ratio=args.outlier_ratio, seed=args.seed * 1_000_003 + i)
             for i in range(args.scenes)]
    scenes = [bench.generate_scene(s) for s in specs]
    net = EmbeddingNetwork.init(EmbedConfig(num_blocks=args.blocks, feature_dim=args.dim,
                                            use_normalization=not args.no_normalization), args.seed)
    cfg = TrainConfig(learning_rate=args.lr, steps=args.steps, batch=args.batch, lam=args.lam,
                      seed=args.seed, augment=not args.no_augment, sigma_d=args.sigma_d)

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.6f", step, loss)

    result = train(net, scenes, cfg, progress)
    save_weights(result.net, args.out_weights)
    if result.losses:
        print(f"final_loss={result.losses[-1]:.17g} sigma_f={result.net.sigma_f:.17g}")
    return EXIT_OK


COMMANDS = {"register": _cmd_register, "synth": _cmd_synth,
            "benchmark": _cmd_benchmark, "train": _cmd_train}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (AllHypothesesDegenerate, DegenerateConfiguration, TooFewCorrespondences,
            AllSamplesDegenerate) as exc:
        print(f"error: degenerate registration ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ParseError, WeightFileError, ValueError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
