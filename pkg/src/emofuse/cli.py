"""Command-line entry point: ``emofuse {synth,extract,train,evaluate,explain}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline, synth
from .pipeline import FUSION_MODES, PipelineError, RunConfig

log = logging.getLogger("emofuse")


def _floats(n):
    def parse(text):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals

    return parse


def _modes(text):
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in FUSION_MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"fusion modes must be drawn from {','.join(FUSION_MODES)}")
    return modes


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="clip manifest (tab separated)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=_floats(3), default=(0.7, 0.15, 0.15), metavar="A,B,C",
                   help="train,val,test ratios (default 0.7,0.15,0.15)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--fusion", type=_modes, default=FUSION_MODES, metavar="MODES",
                   help="comma-separated subset of rppg,visual,early,late (default: all)")
    weights = p.add_mutually_exclusive_group()
    weights.add_argument("--weights", type=_floats(2), metavar="W1,W2", help="late-fusion weights")
    weights.add_argument("--tune-step", type=float, help="grid step for tuning late-fusion weights")
    p.add_argument("--pfi-repeats", type=int, default=5)
    roi = p.add_mutually_exclusive_group()
    roi.add_argument("--cascade", help="cascade JSON file (default: bundled demo cascade)")
    roi.add_argument("--roi-sidecars", action="store_true", help="use roi= sidecars instead of detection")
    p.add_argument("--scale-factor", type=float, default=1.25)
    p.add_argument("--normalize-landmarks", action="store_true",
                   help="express landmarks relative to the face ROI")
    p.add_argument("--no-standardize", dest="standardize", action="store_false",
                   help="feed padded features without per-column z-scoring")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for extraction")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emofuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=1000)
    p.add_argument("--min-frames", type=int, default=8)
    p.add_argument("--max-frames", type=int, default=12)
    p.add_argument("-v", "--verbose", action="store_true")

    for name, text in (
        ("extract", "extract rPPG and landmark caches"),
        ("train", "train the configured models"),
        ("evaluate", "score trained models on the test split"),
        ("explain", "permutation importance of each modality"),
    ):
        _add_common(sub.add_parser(name, help=text))
    return parser


def _config(args) -> RunConfig:
    return RunConfig(
        manifest=args.manifest,
        out=args.out,
        seed=args.seed,
        split=args.split,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        optimizer=args.optimizer,
        fusion=args.fusion,
        weights=args.weights,
        tune_step=args.tune_step,
        pfi_repeats=args.pfi_repeats,
        cascade=args.cascade,
        roi_sidecars=args.roi_sidecars,
        scale_factor=args.scale_factor,
        normalize_landmarks=args.normalize_landmarks,
        standardize=args.standardize,
        jobs=args.jobs,
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "synth":
        if args.clips < 1 or not 1 <= args.min_frames <= args.max_frames:
            parser.error("need --clips >= 1 and 1 <= --min-frames <= --max-frames")
        path = synth.generate_dataset(args.out, args.clips, args.seed, args.min_frames, args.max_frames)
        print(path)
        return 0

    cfg = _config(args)
    if args.command in ("extract", "train"):
        if cfg.manifest is None:
            parser.error(f"{args.command} requires --manifest")
        try:
            cfg.validate()
        except ValueError as exc:
            parser.error(str(exc))

    try:
        if args.command == "extract":
            failures = pipeline.run_extract(cfg)
            if failures:
                for cid, err in failures:
                    print(f"error: clip {cid}: {err}", file=sys.stderr)
                return 1
        elif args.command == "train":
            pipeline.run_train(cfg)
        elif args.command == "evaluate":
            pipeline.run_evaluate(cfg.out)
        elif args.command == "explain":
            if cfg.pfi_repeats < 1:
                parser.error("--pfi-repeats must be >= 1")
            pipeline.run_explain(cfg.out, cfg.pfi_repeats)
    except (PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
