"""Command-line entry point: ``reconood <subcommand> ...``.

Exit status is 0 on success, 2 for argument/config/input errors and 1 for
runtime failures.
"""

import argparse
import json
import logging
import os
import sys

from . import WEIGHT_FORMAT_VERSION, __version__
from .errors import ReconError
from .evaluation import (DEFAULT_ORIENTATIONS, ORIENTATIONS, evaluate_experiment, read_manifest, write_manifest,
                         write_report)
from .generator import GeneratorConfig
from .imaging import AnomalyKind, WindowSpec
from .metrics import read_scores, write_scores
from .pipeline import (ExperimentConfig, default_jobs, generate_corpus, manifest_entries, preprocess_dir,
                       project_dir, run_pipeline, score_dir, train_from_dirs, write_run_manifest)
from .projection import ProjectionConfig
from .training import TrainConfig

log = logging.getLogger("reconood")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _channels(text):
    return tuple(int(c) for c in text.split(","))


def build_parser():
    p = _Parser(prog="reconood", description="Reconstruction-based OOD detection for CT-style images.")
    p.add_argument("--version", action="version",
                   version=f"reconood {__version__} (weight format {WEIGHT_FORMAT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("phantom-gen", help="write a synthetic HU phantom corpus")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--anomaly", choices=[k.value for k in AnomalyKind], default="none")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--noise-hu", type=float, default=None)
    g.add_argument("--out", required=True)

    pp = sub.add_parser("preprocess", help="window HU PNGs to 8-bit images and extract body masks")
    pp.add_argument("--level", type=float, default=50.0)
    pp.add_argument("--width", type=float, default=350.0)
    pp.add_argument("--mask-threshold", type=float, default=10.0)
    pp.add_argument("--in", dest="in_dir", required=True)
    pp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the decoder by generative latent optimization")
    t.add_argument("--in", dest="in_dirs", nargs="+", required=True)
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--lr-params", type=float, default=TrainConfig.lr_params)
    t.add_argument("--lr-latents", type=float, default=TrainConfig.lr_latents)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--val-fraction", type=float, default=TrainConfig.val_fraction)
    t.add_argument("--mirror", action="store_true")
    t.add_argument("--latent-dim", type=int, default=GeneratorConfig.latent_dim)
    t.add_argument("--base-resolution", type=int, default=GeneratorConfig.base_resolution)
    t.add_argument("--channels", type=_channels, default=GeneratorConfig.channels)

    pr = sub.add_parser("project", help="reconstruct images by latent optimization")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--in", dest="in_dir", required=True)
    pr.add_argument("--mask-dir", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--steps", type=int, default=ProjectionConfig.num_steps)
    pr.add_argument("--seed", type=int, required=True)
    pr.add_argument("--lr", type=float, default=ProjectionConfig.initial_lr)
    pr.add_argument("--no-mask", action="store_true", help="use every pixel in the pixel loss")
    pr.add_argument("--jobs", type=int, default=default_jobs())

    s = sub.add_parser("score", help="compute WD/MSE/SSIM for reconstructions")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--recon", required=True)
    s.add_argument("--mask-dir", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="score CSV to write")
    s.add_argument("--manifest-out", help="also write evaluation-manifest rows for this dataset")
    s.add_argument("--class", dest="cls", choices=["in-distribution", "ood"])

    e = sub.add_parser("evaluate", help="AUROC report from manifests and score tables")
    e.add_argument("--manifest", nargs="+", required=True)
    e.add_argument("--scores", nargs="+", required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--out", required=True)
    for m in ("wd", "mse", "ssim"):
        e.add_argument(f"--{m}-orientation", choices=ORIENTATIONS, default=DEFAULT_ORIENTATIONS[m])

    pl = sub.add_parser("pipeline", help="run every stage from one JSON config")
    pl.add_argument("--config", required=True)
    pl.add_argument("--out", help="override out_dir")
    pl.add_argument("--jobs", type=int, help="override jobs")
    return p


def _run(args):
    if args.command == "phantom-gen":
        generate_corpus(args.out, args.count, args.resolution, args.anomaly, args.seed, args.noise_hu)
    elif args.command == "preprocess":
        preprocess_dir(args.in_dir, args.out, WindowSpec(args.level, args.width), args.mask_threshold)
    elif args.command == "train":
        gen = GeneratorConfig(latent_dim=args.latent_dim, base_resolution=args.base_resolution,
                              output_resolution=args.base_resolution * 2 ** (len(args.channels) - 1),
                              channels=args.channels)
        cfg = TrainConfig(epochs=args.epochs, lr_params=args.lr_params, lr_latents=args.lr_latents,
                          batch_size=args.batch_size, val_fraction=args.val_fraction, mirror=args.mirror,
                          seed=args.seed)
        train_from_dirs(args.in_dirs, args.out, gen, cfg)
    elif args.command == "project":
        cfg = ProjectionConfig(num_steps=args.steps, initial_lr=args.lr, masked=not args.no_mask, seed=args.seed)
        project_dir(args.weights, args.in_dir, args.mask_dir, args.out, cfg, args.jobs)
    elif args.command == "score":
        records = score_dir(args.in_dir, args.recon, args.mask_dir, args.dataset)
        write_scores(args.out, records)
        if args.manifest_out:
            base = os.path.dirname(os.path.abspath(args.manifest_out))
            write_manifest(args.manifest_out, manifest_entries(args.in_dir, args.dataset, args.cls, base))
        write_run_manifest(os.path.dirname(os.path.abspath(args.out)), "score",
                           {"in": args.in_dir, "recon": args.recon, "mask_dir": args.mask_dir,
                            "dataset": args.dataset}, {})
    elif args.command == "evaluate":
        entries = [e for m in args.manifest for e in read_manifest(m)]
        scores = [r for s in args.scores for r in read_scores(s)]
        orientations = {"wd": args.wd_orientation, "mse": args.mse_orientation, "ssim": args.ssim_orientation}
        report = evaluate_experiment(entries, scores, args.seed, orientations)
        write_report(report, args.out)
        write_run_manifest(args.out, "evaluate", {"manifest": args.manifest, "scores": args.scores,
                                                  "orientations": orientations}, {"seed": args.seed})
        sys.stdout.write(report.to_text())
    elif args.command == "pipeline":
        with open(args.config, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
        if args.out:
            raw["out_dir"] = os.path.abspath(args.out)
        if args.jobs:
            raw["jobs"] = args.jobs
        cfg = ExperimentConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(args.config)))
        report = run_pipeline(cfg)
        sys.stdout.write(report.to_text())


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    if args.verbose:
        logging.getLogger("reconood").setLevel(logging.INFO)
    try:
        _run(args)
    except (UsageError, ValueError) as exc:
        print(f"reconood {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"reconood {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ReconError, OSError) as exc:
        print(f"reconood {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
