"""Command-line entry point: ``qat4 train|eval|export|inspect|report``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 training divergence.
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import checkpoint, telemetry
from .config import ConfigError, RunConfig, format_config, resolve
from .data import load_dataset
from .errors import CorruptDataError, CorruptionError, DivergenceError, FormatError
from .quantize import level_histogram

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("qat4")


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_run_options(p):
    p.add_argument("--config", help="key = value config file (flags override it)")
    for f in dataclasses.fields(RunConfig):
        if f.type is bool:
            p.add_argument(_flag(f.name), dest=f.name, default=None,
                           action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(_flag(f.name), dest=f.name, type=f.type, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="qat4", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    _add_run_options(p)
    p.add_argument("--resume", help="continue from a .nibm master checkpoint")

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", default="cifar10", choices=("cifar10", "cifar100"))
    p.add_argument("--data-dir", default="data")
    p.add_argument("--limit-test", type=int, default=0)
    p.add_argument("--eval-batch-size", type=int, default=500)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--norm-mean", default="", help="per-channel mean used in training")
    p.add_argument("--norm-std", default="", help="per-channel std used in training")

    p = sub.add_parser("export", help="write the nibble-packed INT4 model")
    p.add_argument("checkpoint", help=".nibm master checkpoint")
    p.add_argument("out")

    p = sub.add_parser("inspect", help="per-layer scale / level table")
    p.add_argument("checkpoint")

    p = sub.add_parser("report", help="summarize a training log")
    p.add_argument("log")
    p.add_argument("--csv", help="write per-epoch curves as CSV")
    p.add_argument("--clip-curve", help="write the tanh-vs-hard clip comparison as CSV")
    return parser


def _limit_threads(n):
    if n and n > 0:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)


def _load_data(name, data_dir, limit_train=0, limit_test=0):
    train, test = load_dataset(name, data_dir)
    if limit_train:
        train = train.subset(limit_train)
    if limit_test:
        test = test.subset(limit_test)
    return train, test


def cmd_train(args):
    from .train import fit

    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    cfg = resolve(overrides, args.config)
    _limit_threads(cfg.threads)
    train_ds, test_ds = _load_data(cfg.dataset, cfg.data_dir, cfg.limit_train, cfg.limit_test)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    state = None
    if args.resume:
        state = checkpoint.load_master(args.resume, expected_classes=cfg.num_classes)
    try:
        records = fit(cfg, train_ds, test_ds, cfg.out_dir, state=state,
                      on_epoch=lambda r, s: print(
                          f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}  "
                          f"train {r.train_acc:.4f}  test {r.test_acc:.4f}  "
                          f"lr {r.lr:.2e}  levels {r.unique_min}-{r.unique_max} "
                          f"(mean {r.unique_mean:.2f})", flush=True))
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if records:
        best = max(r.test_acc for r in records)
        print(f"best test accuracy {best:.4f}; artifacts in {cfg.out_dir}")
    return EXIT_OK


def _load_for_eval(path, num_classes):
    if checkpoint.read_kind(path) == "int4":
        return checkpoint.load_int4(path, expected_classes=num_classes)
    return checkpoint.load_master(path, expected_classes=num_classes).net


def cmd_eval(args):
    _limit_threads(args.threads)
    num_classes = 100 if args.dataset == "cifar100" else 10
    net = _load_for_eval(args.checkpoint, num_classes)
    _, test = _load_data(args.dataset, args.data_dir, limit_test=args.limit_test)
    norm = RunConfig(dataset=args.dataset, norm_mean=args.norm_mean,
                     norm_std=args.norm_std).validate().augment_config()
    acc, loss = telemetry.evaluate(net, test, norm, args.eval_batch_size)
    lo, hi, mean = telemetry.unique_level_summary(net)
    print(f"accuracy {acc:.4f}  loss {loss:.4f}  ({len(test)} images)")
    print(f"unique levels  min {lo}  max {hi}  mean {mean:.2f}")
    for name, count in net.unique_levels().items():
        print(f"  {name:<14} {count:2d}")
    return EXIT_OK


def cmd_export(args):
    state = checkpoint.load_master(args.checkpoint)
    report = checkpoint.export_int4(state.net, args.out)
    print(f"wrote {args.out}")
    for line in report.lines():
        print(line)
    return EXIT_OK


def inspect_rows(net):
    rows = []
    for p in net.quantized_params():
        q = p.last_quant if p.frozen and p.last_quant is not None else p.quantize()
        hist = level_histogram(q.w_int)
        rows.append((p.name, tuple(p.value.shape), q.scale.c, q.scale.s,
                     int(np.count_nonzero(hist)), hist))
    return rows


def cmd_inspect(args):
    kind = checkpoint.read_kind(args.checkpoint)
    if kind == "int4":
        net = checkpoint.load_int4(args.checkpoint)
    else:
        net = checkpoint.load_master(args.checkpoint).net
    print(f"{args.checkpoint}: {kind} checkpoint, {net.config.num_classes} classes, "
          f"{net.num_parameters():,} parameters")
    print(f"{'layer':<14} {'shape':<18} {'c':>10} {'s':>11} {'levels':>6}  histogram -7..7")
    for name, shape, c, s, uniq, hist in inspect_rows(net):
        print(f"{name:<14} {str(shape):<18} {c:10.6f} {s:11.3e} {uniq:6d}  "
              + " ".join(str(int(h)) for h in hist))
    if kind == "master":
        for line in checkpoint.size_report(net).lines()[:4]:
            print(line)
    return EXIT_OK


def cmd_report(args):
    records = telemetry.read_log(args.log)
    for r in records:
        flag = "  NaN" if r.nan_flag else ""
        print(f"epoch {r.epoch:3d}  train {r.train_acc:.4f}  test {r.test_acc:.4f}  "
              f"lr {r.lr:.2e}  levels {r.unique_min}-{r.unique_max}{flag}")
    finite = [r for r in records if not r.nan_flag]
    if finite:
        best = max(finite, key=lambda r: r.test_acc)
        print(f"best test accuracy {best.test_acc:.4f} at epoch {best.epoch}")
    if args.csv:
        telemetry.export_csv(records, args.csv)
        print(f"wrote {args.csv}")
    if args.clip_curve:
        telemetry.clip_curve_csv(args.clip_curve)
        print(f"wrote {args.clip_curve}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export,
            "inspect": cmd_inspect, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptDataError, FormatError, CorruptionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
