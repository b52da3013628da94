"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import fields
from typing import List, Optional, Sequence

import numpy as np

from . import metrics, pnm
from .ablation import KINDS, AblationConfig, ordering_holds, run_ablation
from .data import DataError, Sample, list_ids
from .gradsuite import CHECKS, run_suite
from .synth import SynthConfig, gen_boundaries, gen_dataset
from .tensor import NumericalError, ShapeError
from .training import TrainConfig, load_model, predict_dir, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _merge(args, base: dict, mapping: dict) -> dict:
    """Overlay command-line values (those not None) on the config file."""
    out = dict(base)
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def _build(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(d)
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    d = _merge(
        args,
        _read_config(args.config),
        {"n": "n_samples", "size": "image_size", "delta": "contrast_delta", "shape": "shape",
         "octaves": "octaves", "base_frequency": "base_frequency"},
    )
    cfg = _build(SynthConfig, d)
    manifest = gen_dataset(cfg, args.out)
    print(f"wrote {len(manifest['ids'])} samples to {args.out}")
    return EXIT_OK


def cmd_gen_boundary(args) -> int:
    ids = gen_boundaries(args.masks, args.out)
    print(f"wrote {len(ids)} boundary maps to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    d = _merge(
        args,
        _read_config(args.config),
        {"preset": "preset", "epochs": "epochs", "steps": "max_steps", "lr": "lr", "batch_size": "batch_size",
         "variant": "decoder_variant", "boundary_variant": "boundary_variant", "data": "data_dir", "out": "out_dir"},
    )
    if args.no_augment:
        d["augment"] = False
    if "image_size" not in d and os.path.isdir(d.get("data_dir", "")):
        # follow the dataset's resolution unless configured explicitly
        first = list_ids(d["data_dir"])[0]
        d["image_size"] = pnm.load_image(os.path.join(d["data_dir"], "img", f"{first}.ppm")).shape[-1]
    cfg = _build(TrainConfig, d)

    def log(step, report):
        if step % args.log_every == 0:
            print(f"step {step:5d}  loss {report.total:.4f}", flush=True)

    result = train(cfg, log=log)
    print(f"trained {result.steps} steps; checkpoint in {os.path.join(cfg.out_dir, 'checkpoint')}")
    return EXIT_OK


def _input_samples(path: str) -> List[Sample]:
    """Images from a dataset directory, a directory of .ppm files or one .ppm."""
    if os.path.isfile(path):
        files = [path]
    elif os.path.isdir(os.path.join(path, "img")):
        files = [os.path.join(path, "img", f"{i}.ppm") for i in list_ids(path)]
    else:
        files = sorted(glob.glob(os.path.join(path, "*.ppm")))
    if not files:
        raise DataError(f"no .ppm images found at {path}")
    out = []
    for f in files:
        img = pnm.load_image(f)
        if img.shape[0] != 3:
            raise DataError(f"{f}: expected an RGB (P6) image")
        sid = os.path.splitext(os.path.basename(f))[0]
        h, w = img.shape[1:]
        out.append(Sample(img, np.zeros((1, h, w)), np.zeros((1, h, w)), sid))
    return out


def cmd_predict(args) -> int:
    try:
        model = load_model(args.checkpoint)
    except (OSError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    samples = _input_samples(args.input)
    size = model.cfg.image_size
    for s in samples:
        if s.image.shape[1:] != (size, size):
            raise DataError(f"{s.id}: image is {s.image.shape[2]}x{s.image.shape[1]}, model expects {size}x{size}")
    written = predict_dir(model, samples, args.out)
    print(f"wrote {len(written)} maps to {args.out}")
    return EXIT_OK


def _gt_path(gt_dir: str, sid: str) -> str:
    for cand in (os.path.join(gt_dir, "gt", f"{sid}.pgm"), os.path.join(gt_dir, f"{sid}.pgm")):
        if os.path.exists(cand):
            return cand
    raise DataError(f"no ground truth for {sid} under {gt_dir}")


def cmd_eval(args) -> int:
    files = sorted(glob.glob(os.path.join(args.pred, "*.pgm")))
    preds = [f for f in files if f.endswith("_obj.pgm")] or [f for f in files if not f.endswith("_bnd.pgm")]
    if not preds:
        raise DataError(f"no prediction maps in {args.pred}")
    reports = []
    for f in preds:
        stem = os.path.splitext(os.path.basename(f))[0]
        sid = stem[: -len("_obj")] if stem.endswith("_obj") else stem
        S = pnm.load_image(f)[0]
        G = pnm.load_image(_gt_path(args.gt, sid))[0] >= 0.5
        if S.shape != G.shape:
            raise DataError(f"{sid}: prediction {S.shape} and ground truth {G.shape} differ in size")
        reports.append(metrics.evaluate(S, G, sid))
    report = metrics.aggregate(reports)
    metrics.emit(report, args.out)
    means = report.mean
    print("  ".join(f"{k}={means[k]:.4f}" for k in metrics.METRIC_NAMES))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    # desk samples coordinates per input; paper perturbs every coordinate
    max_coords = args.max_coords if args.max_coords is not None else (24 if args.preset == "desk" else None)
    seeds = args.seeds if args.seed is None else [args.seed]
    if args.checks:
        unknown = sorted(set(args.checks) - set(CHECKS))
        if unknown:
            raise UsageError(f"unknown checks {unknown}; available: {', '.join(CHECKS)}")
    results = run_suite(seeds=seeds, names=args.checks, max_coords=max_coords)
    for r in results:
        print(r)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def cmd_ablate(args) -> int:
    d = _merge(args, _read_config(args.config), {"kind": "kind", "steps": "steps", "n_train": "n_train",
                                                 "n_test": "n_test", "seeds": "seeds"})
    d.pop("seed", None)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    cfg = _build(AblationConfig, d)
    rows = run_ablation(cfg, args.data, args.out, log=lambda r: print(r.csv(), flush=True))
    if cfg.kind == "decoder":
        held = ordering_holds(rows, "DTIT", "LateFuse")
        print("DTIT MAE <= LateFuse MAE per seed: " + ", ".join(f"{s}:{v}" for s, v in held.items()))
    print(f"wrote {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with settings for this command")
    common.add_argument("--seed", type=int, help="override the configured seed")

    p = _Parser(prog="ditcod", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--delta", type=float)
    g.add_argument("--shape", choices=["ellipse", "blob"])
    g.add_argument("--octaves", type=int)
    g.add_argument("--base-frequency", type=int)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gen-boundary", parents=[common], help="edge maps for a directory of masks")
    g.add_argument("--masks", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_boundary)

    g = sub.add_parser("train", parents=[common], help="train a model")
    g.add_argument("--data")
    g.add_argument("--out")
    g.add_argument("--preset", choices=["desk", "paper"])
    g.add_argument("--epochs", type=int)
    g.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--variant", choices=list(KINDS["decoder"]))
    g.add_argument("--boundary-variant", choices=list(KINDS["boundary"]))
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--log-every", type=int, default=10)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("predict", parents=[common], help="write object and boundary maps")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--input", required=True, help="dataset dir, dir of .ppm files, or one .ppm")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_predict)

    g = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    g.add_argument("--pred", required=True)
    g.add_argument("--gt", required=True, help="dataset dir or dir of .pgm masks")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")
    g.add_argument("--preset", choices=["desk", "paper"], default="desk")
    g.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    g.add_argument("--max-coords", type=int)
    g.add_argument("--checks", nargs="+", help="run only these checks (default: all)")
    g.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("ablate", parents=[common], help="compare decoder or boundary variants")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=sorted(KINDS))
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--steps", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ditcod {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ditcod {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, pnm.PNMError, ShapeError, OSError, ValueError) as exc:
        print(f"ditcod {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
