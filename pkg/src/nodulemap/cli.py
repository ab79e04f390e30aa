"""Command-line interface.

Subcommands: phantom, train, eval, map, ablate, stats, gradcheck.
Every run prints its resolved configuration and seed first, then
key=value result lines. Exit codes: 0 success, 2 bad usage or
configuration, 3 unreadable or malformed data, 4 failed numeric
verification (non-finite values, gradient checks, graph misuse).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint, phantom, reports, saliency, stats, training
from .errors import ConfigError, FormatError, GraphError, NumericError, ShapeError
from .gradcheck import default_op_checks, model_spot_check
from .layers import SgdConfig
from .model import VALID_CHANNELS, ModelConfig, build_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_VERIFY = 4


def _print_config(command: str, mapping: dict) -> None:
    print(f"{command} config: {json.dumps(mapping, sort_keys=True)}")


def _model_config_from_args(args) -> ModelConfig:
    return ModelConfig(
        in_channels=args.channels,
        head=args.head,
        hf_pool=args.hf_pool,
        fcf_pool=args.fcf_pool,
        fusion=args.fusion,
        use_residual_stack=not args.no_residual_stack,
        use_hf_branch=not args.no_hf_branch,
        unet_batchnorm=args.unet_batchnorm,
    ).validate()


def _add_model_args(sub) -> None:
    sub.add_argument("--channels", type=int, default=11, choices=VALID_CHANNELS)
    sub.add_argument("--head", default="hesam", choices=("cam", "sam", "hesam"))
    sub.add_argument("--hf-pool", default="gmp", choices=("gap", "gmp"))
    sub.add_argument("--fcf-pool", default="gap", choices=("gap", "gmp"))
    sub.add_argument("--fusion", default="sum", choices=("sum", "concat"))
    sub.add_argument("--no-residual-stack", action="store_true")
    sub.add_argument("--no-hf-branch", action="store_true")
    sub.add_argument("--unet-batchnorm", action="store_true")


def _add_sgd_args(sub) -> None:
    sub.add_argument("--lr", type=float, default=SgdConfig.lr)
    sub.add_argument("--batch-size", type=int, default=SgdConfig.batch_size)
    sub.add_argument("--weight-decay", type=float, default=SgdConfig.weight_decay)
    sub.add_argument("--decay-period", type=int, default=SgdConfig.decay_period)


def _sgd_from_args(args) -> SgdConfig:
    return SgdConfig(lr=args.lr, batch_size=args.batch_size,
                     weight_decay=args.weight_decay, decay_period=args.decay_period)


def _load_or_generate(path, count, channels, seed, offset):
    if path is not None:
        return phantom.read_dataset(path)
    return phantom.generate_dataset(count, channels, seed, offset=offset)


# ---------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------


def cmd_phantom(args) -> int:
    _print_config("phantom", {"count": args.count, "channels": args.channels,
                              "seed": args.seed, "offset": args.offset, "out": args.out})
    ds = phantom.generate_dataset(args.count, args.channels, args.seed, offset=args.offset)
    phantom.write_dataset(args.out, ds)
    print(f"path={args.out}")
    print(f"count={len(ds)}")
    print(f"malignant={int(ds.labels.sum())}")
    print(f"benign={int((ds.labels == 0).sum())}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _model_config_from_args(args)
    sgd = _sgd_from_args(args)
    resolved = dict(config.to_dict(), seed=args.seed, epochs=args.epochs,
                    data_seed=args.data_seed, **vars(sgd))
    _print_config("train", resolved)
    train_ds = _load_or_generate(args.train_data, args.train_count, args.channels,
                                 args.data_seed, 0)
    test_ds = _load_or_generate(args.test_data, args.test_count, args.channels,
                                args.data_seed, args.train_count)
    if train_ds.samples.shape[1] != config.in_channels:
        raise ConfigError(
            f"dataset has {train_ds.samples.shape[1]} channels, model expects {config.in_channels}")
    model = build_model(config, seed=args.seed)

    def log(rec):
        print("epoch={epoch} lr={lr:.6g} train_loss={train_loss:.4f} train_acc={train_acc:.4f} "
              "test_loss={test_loss:.4f} test_acc={test_acc:.4f}".format(**rec.to_dict()))

    result = training.train(model, train_ds, test_ds, args.epochs, sgd,
                            seed=args.seed, log=log)
    os.makedirs(args.out_dir, exist_ok=True)
    checkpoint.save_model(os.path.join(args.out_dir, "model.nmdl"), model)
    reports.write_jsonl(os.path.join(args.out_dir, "records.jsonl"),
                        [r.to_dict() for r in result.records])
    summary = {
        "accuracy": result.final.accuracy,
        "sensitivity": result.final.sensitivity,
        "specificity": result.final.specificity,
        "train_seconds": result.wall_seconds,
    }
    reports.write_kv(os.path.join(args.out_dir, "metrics.kv"), summary)
    reports.training_curve_figure(result.records, os.path.join(args.out_dir, "curves.png"))
    for key, value in summary.items():
        print(f"{key}={reports.format_value(value)}")
    print(f"model={os.path.join(args.out_dir, 'model.nmdl')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = checkpoint.load_model(args.model)
    _print_config("eval", dict(model.config.to_dict(), model=args.model, data=args.data))
    ds = phantom.read_dataset(args.data)
    loss, metrics = training.evaluate(model, ds)
    print(f"loss={reports.format_value(loss)}")
    print(f"accuracy={reports.format_value(metrics.accuracy)}")
    print(f"sensitivity={reports.format_value(metrics.sensitivity)}")
    print(f"specificity={reports.format_value(metrics.specificity)}")
    return EXIT_OK


def cmd_map(args) -> int:
    model = checkpoint.load_model(args.model)
    _print_config("map", dict(model.config.to_dict(), model=args.model, data=args.data,
                              sample=args.sample, method=args.method))
    ds = phantom.read_dataset(args.data)
    if not 0 <= args.sample < len(ds):
        raise ConfigError(f"sample index {args.sample} outside dataset of {len(ds)}")
    if args.method == "all":
        # every method the model's head defines
        weighted = "cam" if model.config.head == "cam" else "sam"
        methods = (weighted, "gradcam")
    else:
        methods = (args.method,)
    classes = (0, 1) if args.class_id == "both" else (int(args.class_id),)
    os.makedirs(args.out_dir, exist_ok=True)
    x = ds.samples[args.sample]
    mid_slice = x[x.shape[0] // 2].astype(np.float64)
    for method in methods:
        for cls in classes:
            amap = saliency.compute_map(model, x, method, cls)
            name = saliency.map_filename(args.sample, method, cls)
            saliency.write_pgm(os.path.join(args.out_dir, name), amap.upsampled)
            panel = saliency.composite(mid_slice, amap)
            reports.composite_figure(panel, os.path.join(args.out_dir, name[:-4] + ".png"),
                                     title=f"sample {args.sample} {method} class {cls}")
            print(f"map={os.path.join(args.out_dir, name)}")
    print(f"label={int(ds.labels[args.sample])}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = ModelConfig(in_channels=args.channels)
    grids = {
        "table3": training.table3_cells,
        "table4": training.table4_cells,
        "channels": training.channel_sweep_cells,
    }
    cells = grids[args.grid](base)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    spec = training.RunSpec(train_count=args.train_count, test_count=args.test_count,
                            epochs=args.epochs, data_seed=args.data_seed,
                            sgd=_sgd_from_args(args))
    _print_config("ablate", {"grid": args.grid, "cells": [c.name for c in cells],
                             "seeds": list(seeds), "train_count": args.train_count,
                             "test_count": args.test_count, "epochs": args.epochs,
                             "jobs": args.jobs, "data_seed": args.data_seed})
    rows = training.run_ablation_grid(cells, spec, seeds=seeds, jobs=args.jobs)
    os.makedirs(args.out_dir, exist_ok=True)
    reports.write_jsonl(os.path.join(args.out_dir, "rows.jsonl"), rows)
    reports.ablation_bar_figure(rows, os.path.join(args.out_dir, "accuracy.png"))
    for row in rows:
        print("cell={cell} seed={seed} accuracy={accuracy:.4f} sensitivity={sensitivity:.4f} "
              "specificity={specificity:.4f}".format(**row))
    return EXIT_OK


def _read_numbers(path):
    with open(path, "r", encoding="ascii") as fp:
        lines = [ln.strip() for ln in fp if ln.strip()]
    try:
        return np.array([float(v) for v in lines])
    except ValueError as exc:
        raise FormatError(f"{path} must hold one number per line") from exc


def cmd_stats(args) -> int:
    _print_config("stats", {"a": args.file_a, "b": args.file_b,
                            "alternative": args.alternative, "method": args.method})
    a = _read_numbers(args.file_a)
    b = _read_numbers(args.file_b)
    if a.shape != b.shape:
        raise FormatError(f"paired files differ in length: {a.size} vs {b.size}")
    result = stats.wilcoxon(a, b, alternative=args.alternative, method=args.method)
    print(f"w_plus={reports.format_value(result.statistic)}")
    print(f"w_minus={reports.format_value(result.w_minus)}")
    print(f"n_used={result.n_used}")
    p = "undefined" if result.p_value is None else reports.format_value(result.p_value)
    print(f"p_value={p}")
    print(f"method={result.method}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "skip_model": args.skip_model})
    results = default_op_checks(seed=args.seed)
    if not args.skip_model:
        results.append(model_spot_check(seed=args.seed))
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name} rel_err={res.max_rel_err:.3e} tol={res.tol:g} "
              f"n={res.n_checked}")
        failed += 0 if res.passed else 1
    print(f"checks={len(results)}")
    print(f"failed={failed}")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodulemap",
        description="Nodule-patch classifier with attention-map rendering")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("phantom", help="generate a synthetic dataset file")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--channels", type=int, default=11, choices=VALID_CHANNELS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_phantom)

    p = subs.add_parser("train", help="train a model and write run artifacts")
    _add_model_args(p)
    _add_sgd_args(p)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=20260101)
    p.add_argument("--train-data", help="NODV1 file; omitting it generates data")
    p.add_argument("--test-data")
    p.add_argument("--train-count", type=int, default=916)
    p.add_argument("--test-count", type=int, default=229)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_train)

    p = subs.add_parser("eval", help="evaluate a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(handler=cmd_eval)

    p = subs.add_parser("map", help="render attention maps for one sample")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--method", default="all", choices=("all", "cam", "sam", "gradcam"))
    p.add_argument("--class-id", default="both", choices=("0", "1", "both"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_map)

    p = subs.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True, choices=("table3", "table4", "channels"))
    p.add_argument("--channels", type=int, default=11, choices=VALID_CHANNELS)
    _add_sgd_args(p)
    p.add_argument("--train-count", type=int, default=916)
    p.add_argument("--test-count", type=int, default=229)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seeds", default="0")
    p.add_argument("--data-seed", type=int, default=20260101)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_ablate)

    p = subs.add_parser("stats", help="paired signed-rank test of two metric files")
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--alternative", default="two-sided",
                   choices=("two-sided", "greater", "less"))
    p.add_argument("--method", default="auto", choices=("auto", "exact", "approx"))
    p.set_defaults(handler=cmd_stats)

    p = subs.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true",
                   help="skip the whole-model spot check")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
