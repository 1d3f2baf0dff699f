"""Command-line interface: dataset generation, training, evaluation,
gradient checking, and bin diagnostics for batch use.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure (a failed gradient check or a checkpoint that fails its hash).
Every command writes exactly one manifest.json into its output directory
and never writes outside it.  ADDV_THREADS caps the worker count used for
dataset generation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, datagen as dg, diffcore as dc, report as report_mod, trainer
from .errors import AddvError, CheckpointError, DatasetError, DivergenceError
from .losses import LossConfig
from .manifest import RunManifest, write_manifest
from .nets import load_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def worker_cap(requested: int = 1) -> int:
    """Apply the ADDV_THREADS ceiling to a requested worker count."""
    raw = os.environ.get("ADDV_THREADS")
    if raw is None:
        return max(1, requested)
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"ADDV_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise UsageError(f"ADDV_THREADS must be >= 1, got {cap}")
    return max(1, min(requested, cap))


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size expects WxH, got {text!r}") from None
    if w % 16 or h % 16:
        raise UsageError(f"--size {text}: extents must be divisible by 16")
    return w, h


def build_parser() -> _Parser:
    parser = _Parser(prog="addv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic triplet dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--layout", choices=("two-plane", "heightfield"), default="two-plane")
    p.add_argument("--size", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train depth and pose networks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--strategy", choices=("ud", "sid", "addv"), default="addv")
    p.add_argument("--no-uniformizing", action="store_true")
    p.add_argument("--no-sharpening", action="store_true")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics.json path or a directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bins-report", help="bin curves and disparity histograms")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True,
                   help="comma-separated triplet directories or PNG files")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bins_report)

    p = sub.add_parser("gradcheck", help="run the gradient verification suites")
    p.add_argument("--scope", choices=checks.SCOPES, default="ops")
    p.add_argument("--corrupt-op", default=None,
                   help="test hook: scale the named op's backward to prove detection")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def cmd_gen(args) -> int:
    width, height = _parse_size(args.size)
    if args.scenes < 0:
        raise UsageError(f"--scenes must be >= 0, got {args.scenes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="gen", argv=sys.argv[1:],
        config={"scenes": args.scenes, "layout": args.layout,
                "size": f"{width}x{height}", "seed": args.seed},
        seed=args.seed,
    )

    def build(i: int):
        spec = dg.random_scene(args.seed + i, args.layout, width=width, height=height)
        triplet = dg.generate_triplet(spec)
        dg.save_triplet(out / f"triplet_{i:05d}", triplet)

    workers = worker_cap(int(os.environ.get("ADDV_THREADS", "1")))
    if workers > 1 and args.scenes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build, range(args.scenes)))
    else:
        for i in range(args.scenes):
            build(i)
    write_manifest(out, manifest)
    logger.info("wrote %d triplet(s) to %s", args.scenes, out)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.tau is not None and args.no_sharpening:
        raise UsageError("--tau conflicts with --no-sharpening (which forces tau=1)")
    if args.tau is not None and not 0.0 < args.tau <= 1.0:
        raise UsageError(f"--tau must be in (0,1], got {args.tau}")
    loss_cfg = LossConfig(
        tau=args.tau if args.tau is not None else 0.5,
        uniformizing=not args.no_uniformizing,
        sharpening=not args.no_sharpening,
    )
    config = trainer.TrainConfig(
        epochs=args.epochs, seed=args.seed, n_bins=args.bins,
        strategy=args.strategy, loss=loss_cfg,
    )
    dataset = dg.load_dataset(args.data)
    if len(dataset) == 0:
        raise DatasetError(f"no triplets found under {args.data}")
    out = Path(args.out)
    manifest = RunManifest(
        command="train", argv=sys.argv[1:],
        config={
            "data": str(args.data), "bins": args.bins, "strategy": args.strategy,
            "epochs": args.epochs, "seed": args.seed, "tau": loss_cfg.tau,
            "uniformizing": loss_cfg.uniformizing, "sharpening": loss_cfg.sharpening,
            "alpha1": loss_cfg.alpha1, "alpha2": loss_cfg.alpha2, "alpha3": loss_cfg.alpha3,
            "lr": config.lr, "lr_after": config.lr_after,
            "lr_decay_epoch": config.lr_decay_epoch, "batch": config.batch,
        },
        seed=args.seed,
    )
    try:
        result = trainer.train(dataset, config, out_dir=out)
    except DivergenceError as exc:
        manifest.status = "aborted_nan"
        write_manifest(out, manifest)
        logger.error("NaN guard fired: %s", exc)
        return EXIT_RUNTIME
    write_manifest(out, manifest)
    if result.history:
        last = result.history[-1]
        uniform_note = f" L_u {last['L_u']:.5f}" if loss_cfg.uniformizing else ""
        logger.info("final epoch: L_p %.5f L_smooth %.5f%s L_final %.5f",
                    last["L_p"], last["L_smooth"], uniform_note, last["L_final"])
    return EXIT_OK


def _eval_paths(out_arg: str) -> tuple[Path, Path, Path]:
    out = Path(out_arg)
    if out.suffix == ".json":
        return out.parent, out, out.parent / "per_image.csv"
    return out, out / "metrics.json", out / "per_image.csv"


def cmd_eval(args) -> int:
    out_dir, metrics_path, csv_path = _eval_paths(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth_net, _pose, _meta = load_checkpoint(args.ckpt)
    dataset = dg.load_dataset(args.data)
    for d in dataset.dirs:
        if not (d / dg.DEPTH_NAME).exists():
            raise DatasetError(f"missing ground truth {d / dg.DEPTH_NAME}")
    metrics, rows = trainer.evaluate(depth_net, dataset)
    metrics_path.write_text(json.dumps(metrics.as_dict(), indent=1, sort_keys=True))
    csv_path.write_text(trainer.per_image_csv(rows))
    manifest = RunManifest(
        command="eval", argv=sys.argv[1:],
        config={"ckpt": str(args.ckpt), "data": str(args.data)}, seed=0,
    )
    write_manifest(out_dir, manifest)
    logger.info("metrics: %s", json.dumps(metrics.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_bins_report(args) -> int:
    depth_net, _pose, _meta = load_checkpoint(args.ckpt)
    items = []
    for raw in args.images.split(","):
        path = Path(raw)
        if path.is_dir():
            triplet = dg.load_triplet_dir(path)
            items.append((path.name, triplet.target, triplet.gt_depth))
        elif path.suffix.lower() == ".png":
            items.append((path.stem, dg.load_png(path), None))
        else:
            raise UsageError(f"--images entries must be triplet dirs or .png files, got {raw}")
    out = Path(args.out)
    report_mod.bins_report(depth_net, items, out, render_figures=not args.no_figures)
    manifest = RunManifest(
        command="bins-report", argv=sys.argv[1:],
        config={"ckpt": str(args.ckpt), "images": args.images}, seed=0,
    )
    write_manifest(out, manifest)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt_op:
        dc.corrupt_gradient(args.corrupt_op, 1.001)
    try:
        reports = checks.run_scope(args.scope)
    finally:
        dc.clear_gradient_corruption()
    failures = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    if failures:
        names = ", ".join(f"{r.name} (max rel err {r.max_rel_err:.3e})" for r in failures)
        print(f"gradient verification failed: {names}", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (AddvError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
