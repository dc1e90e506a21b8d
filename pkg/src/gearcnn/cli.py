"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import model as M
from . import ndcore as nd
from .data import CsvLayout, SynthConfig, generate_synthetic, import_csv, read_dataset, write_dataset
from .exceptions import ConfigurationError, FormatError, NumericalError, ParseError, ShapeError, UsageError
from .report import load_report, render_report
from .trainer import TrainConfig, crossval, crossval_splits, evaluate, load_config, scenario_subset, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _require_file(path, flag):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file {path!r}")


def _require_parent(path, flag):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"{flag}: directory {parent!r} does not exist")


def _train_config(args):
    config = load_config(args.config) if args.config else TrainConfig()
    config = replace(config, seed=args.seed)
    if getattr(args, "max_epochs", None):
        config = config.capped(args.max_epochs)
    return config


def cmd_synth(args):
    _require_parent(args.out, "--out")
    cfg = SynthConfig(
        frames_per_class=args.frames_per_class,
        oc=args.oc,
        rotational_speed_hz=args.speed_hz,
        load_scale=args.load_scale,
        noise_floor=args.noise_floor,
        seed=args.seed,
    )
    ds = generate_synthetic(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames to {args.out}")


def cmd_import(args):
    _require_file(args.csv, "--csv")
    _require_parent(args.out, "--out")
    has_oc = {"auto": None, "yes": True, "no": False}[args.oc_column]
    ds = import_csv(args.csv, CsvLayout(has_oc=has_oc, default_oc=args.default_oc, delimiter=args.delimiter))
    write_dataset(ds, args.out)
    print(f"imported {len(ds)} frames into {args.out}")


def cmd_train(args):
    _require_file(args.data, "--data")
    _require_parent(args.checkpoint, "--checkpoint")
    if args.config:
        _require_file(args.config, "--config")
    config = _train_config(args)
    ds = scenario_subset(read_dataset(args.data), args.scenario)
    splits = crossval_splits(ds, 5, config.seed, by_oc=args.scenario == "model3")
    if not 1 <= args.fold <= len(splits):
        raise UsageError(f"--fold must lie in 1..{len(splits)}")
    _, report = train(ds, splits[args.fold - 1], config, checkpoint_path=args.checkpoint, n_workers=args.workers)
    print(json.dumps(report.to_dict(), indent=2))


def cmd_crossval(args):
    _require_file(args.data, "--data")
    _require_parent(args.report, "--report")
    if args.config:
        _require_file(args.config, "--config")
    config = _train_config(args)
    report = crossval(read_dataset(args.data), args.scenario, config,
                      checkpoint_dir=args.checkpoint_dir, n_workers=args.workers)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(f"{args.scenario}: mean accuracy {report.mean_accuracy:.2f}% over {len(report.folds)} folds")


def _load_params(path):
    params, _ = M.load_checkpoint(path)
    missing = set(M.DEFAULT_ARCH.param_shapes()) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)}")
    return params


def cmd_eval(args):
    _require_file(args.data, "--data")
    _require_file(args.checkpoint, "--checkpoint")
    params = _load_params(args.checkpoint)
    ds = read_dataset(args.data)
    acc, cm = evaluate(params, ds.frames, ds.labels)
    print(json.dumps({
        "accuracy": round(acc, 2),
        "confusion_counts": cm.counts.tolist(),
        "confusion_row_pct": np.round(cm.row_percentages(), 2).tolist(),
    }, indent=2))


def cmd_predict(args):
    _require_file(args.data, "--data")
    _require_file(args.checkpoint, "--checkpoint")
    if args.out:
        _require_parent(args.out, "--out")
    params = _load_params(args.checkpoint)
    ds = read_dataset(args.data)
    labels, probs = M.predict(params, ds.frames)
    lines = ["index,label," + ",".join(f"p{c}" for c in range(probs.shape[1]))]
    for i, (lab, row) in enumerate(zip(labels, probs)):
        lines.append(f"{i},{lab}," + ",".join(f"{p:.6f}" for p in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_gradcheck(args):
    ok = True
    for kernel in nd.KERNELS:
        err = max(nd.grad_check(kernel, seed) for seed in range(args.seeds))
        passed = err < KERNEL_TOL
        ok &= passed
        print(f"{kernel:<16} max rel err {err:.3e}  {'ok' if passed else 'FAIL'} (< {KERNEL_TOL:g})")
    err = max(M.grad_check_model(seed) for seed in range(args.seeds))
    passed = err < MODEL_TOL
    ok &= passed
    print(f"{'tiny model':<16} max rel err {err:.3e}  {'ok' if passed else 'FAIL'} (< {MODEL_TOL:g})")
    if not ok:
        raise NumericalError("gradient check failed")


def cmd_report(args):
    _require_file(args.report, "--report")
    sys.stdout.write(render_report(load_report(args.report), fold=args.fold))


def build_parser():
    parser = _Parser(prog="gearcnn", description="Residual 1-D CNN for gearbox fault frames")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic VBF1 dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames-per-class", type=int, required=True)
    p.add_argument("--oc", type=int, choices=(1, 2), default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise-floor", type=float, default=0.05)
    p.add_argument("--load-scale", type=float)
    p.add_argument("--speed-hz", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="convert a CSV export to VBF1")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oc-column", choices=("auto", "yes", "no"), default="auto")
    p.add_argument("--default-oc", type=int, choices=(1, 2), default=1)
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_import)

    for name, func, help_ in (("train", cmd_train, "train on one cross-validation fold"),
                              ("crossval", cmd_crossval, "run 5-fold cross-validation")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--scenario", choices=("model1", "model2", "model3"), default="model1")
        p.add_argument("--config")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--max-epochs", type=int, help="cap the epoch budget")
        p.add_argument("--workers", type=int, default=1, help="augmentation worker threads")
        if name == "train":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--fold", type=int, default=1)
        else:
            p.add_argument("--report", required=True)
            p.add_argument("--checkpoint-dir")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-frame labels and class probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference self test")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render a report JSON as text tables")
    p.add_argument("--report", required=True)
    p.add_argument("--fold", type=int, default=1)
    p.set_defaults(func=cmd_report)
    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"gearcnn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"gearcnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ParseError, ShapeError, ConfigurationError, OSError) as exc:
        print(f"gearcnn: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
