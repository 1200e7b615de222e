"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DataError, NumericError
from .pipeline import EstimationRun, RunMode, evaluate, run
from .synthdata import DensityMode, ShapeKind, build_benchmark, load_manifest, read_cloud
from .train import TrainConfig, load_train_config, load_training_clouds, train
from .net import ModelConfig

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv(kind):
    def parse(text):
        try:
            return [kind(t.strip()) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="normref", description="Oriented normal estimation for point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--shapes", type=_csv(ShapeKind), default=[ShapeKind.SPHERE, ShapeKind.TORUS, ShapeKind.CUBE,
                                                              ShapeKind.SHEET_STACK])
    p.add_argument("--noise", type=_csv(float), default=[0.0, 0.12, 0.6, 1.2])
    p.add_argument("--density", type=_csv(DensityMode), default=[DensityMode.UNIFORM])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--split", choices=["train", "test"], default="train")

    p = sub.add_parser("baseline", help="PCA normals oriented by MST propagation")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--k-pca", type=int, default=16)
    p.add_argument("--k-graph", type=int, default=8)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="train the refinement network")
    p.add_argument("--data", required=True, type=Path, help="manifest.json")
    p.add_argument("--config", type=Path, help="train.json")
    p.add_argument("--out", required=True, type=Path, help="checkpoint directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("estimate", help="network-refined oriented normals")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--init-normals", type=Path, help="refine these normals instead of PCA+MST")
    p.add_argument("--subset", type=int, help="refine only N randomly chosen points")
    p.add_argument("--k-pca", type=int, default=16)
    p.add_argument("--k-graph", type=int, default=8)

    p = sub.add_parser("eval", help="score predictions against a benchmark")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.add_argument("--err-dir", type=Path, help="per-point error exports (default: next to --out)")
    return parser


def _cmd_gen(args):
    manifest = build_benchmark(args.out, args.shapes, noise_levels=args.noise, densities=args.density,
                               n=args.n, seed=args.seed, split=args.split)
    print(f"wrote {len(manifest.entries)} cloud pairs to {args.out / 'manifest.json'}")


def _cmd_baseline(args):
    job = EstimationRun(str(args.input), RunMode.BASELINE_PCA_MST, str(args.out))
    run(job, read_cloud(args.input), k_pca=args.k_pca, k_graph=args.k_graph)
    print(f"init {job.timings['init_seconds']:.3f}s", file=sys.stderr)


def _cmd_train(args):
    if args.config:
        train_cfg, model_cfg = load_train_config(args.config)
    else:
        train_cfg, model_cfg = TrainConfig(), ModelConfig()
    clouds = load_training_clouds(load_manifest(args.data), train_cfg.k_pca, train_cfg.k_graph)
    result = train(clouds, model_cfg, train_cfg, args.out, resume=args.resume)
    print(f"final loss {result.history[-1]['mean_total']:.6f}; checkpoint {result.checkpoint}")


def _cmd_estimate(args):
    mode = RunMode.REFINE_EXTERNAL if args.init_normals else RunMode.NETWORK
    job = EstimationRun(str(args.input), mode, str(args.out), checkpoint=str(args.ckpt),
                        init_normals_path=str(args.init_normals) if args.init_normals else None)
    run(job, read_cloud(args.input), k_pca=args.k_pca, k_graph=args.k_graph, subset=args.subset)
    print(f"init {job.timings['init_seconds']:.3f}s + inference {job.timings['inference_seconds']:.3f}s",
          file=sys.stderr)


def _cmd_eval(args):
    err_dir = args.err_dir or (args.out.parent / "errors" if args.out else None)
    report = evaluate(load_manifest(args.data), args.pred_dir, error_dir=err_dir)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.dumps())
    sys.stdout.write(report.to_table() if args.format == "table" else report.dumps())


COMMANDS = {"gen": _cmd_gen, "baseline": _cmd_baseline, "train": _cmd_train,
            "estimate": _cmd_estimate, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
