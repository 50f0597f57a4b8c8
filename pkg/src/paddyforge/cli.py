"""Command-line entry point.

Subcommands: ``train``, ``lr-find``, ``eval``, ``ensemble``, ``gen-synth``.
Exit codes: 0 success, 1 usage/configuration, 2 data or file format, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .augment import AugPolicy
from .data import gen_synthetic_dataset, load_image_dataset, stratified_split
from .errors import (ConfigError, FormatError, LoadError, NoValleyError, NumericError, SplitError)
from .evaluation import EnsembleMember, EnsembleSpec, TTAConfig, ensemble_evaluate, evaluate
from .nn import ARCH_ALIASES, build_network, set_trainable
from .optim import ResizeSchedule, TrainConfig, fit, lr_sweep, suggest_lr_valley
from .tensor import Shape2D

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _size(text):
    try:
        return Shape2D.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _resize(text):
    try:
        return ResizeSchedule.parse(text)
    except (ValueError, ConfigError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _member(text):
    path, sep, weight = text.rpartition(":")
    if not sep:
        return text, 1.0
    try:
        return path, float(weight)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad member {text!r}, expected CKPT:WEIGHT") from None


def _add_data_args(p, split=True):
    p.add_argument("--data", required=True, type=Path, help="dataset root laid out as <class>/*.ppm")
    p.add_argument("--seed", type=int, default=0)
    if split:
        p.add_argument("--val-fraction", type=float, default=0.2)


def build_parser():
    parser = _Parser(prog="paddyforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network")
    _add_data_args(t)
    t.add_argument("--arch", choices=sorted(ARCH_ALIASES))
    t.add_argument("--epochs", type=_positive_int, required=True)
    t.add_argument("--batch", type=_positive_int, default=64)
    t.add_argument("--lr", default="auto", help="learning rate or 'auto' to run the LR finder first")
    t.add_argument("--accum", type=_positive_int, default=1)
    t.add_argument("--precision", choices=["fp32", "mixed"], default="fp32")
    t.add_argument("--loss-scale", type=float, default=1.0)
    t.add_argument("--aug", choices=[p.value for p in AugPolicy], default="minimal")
    t.add_argument("--mixup", type=float, nargs="?", const=0.4, default=None, metavar="ALPHA")
    t.add_argument("--resize", type=_resize, default=None, metavar="SMALL:EPOCH:LARGE")
    t.add_argument("--init", nargs="+", default=["random"], metavar="random|checkpoint PATH")
    t.add_argument("--freeze", choices=["none", "body"], default="none")
    t.add_argument("--size", type=_size, default=None, help="input size HxW (default: native image size)")
    t.add_argument("--lr-min", type=float, default=1e-7)
    t.add_argument("--lr-max", type=float, default=10.0)
    t.add_argument("--steps", type=int, default=100)
    t.add_argument("--out", type=Path, default=Path("out"))

    f = sub.add_parser("lr-find", help="learning-rate range test")
    _add_data_args(f)
    f.add_argument("--arch", choices=sorted(ARCH_ALIASES), required=True)
    f.add_argument("--lr-min", type=float, default=1e-7)
    f.add_argument("--lr-max", type=float, default=10.0)
    f.add_argument("--steps", type=int, default=100)
    f.add_argument("--beta", type=float, default=0.98)
    f.add_argument("--batch", type=_positive_int, default=64)
    f.add_argument("--size", type=_size, default=None)
    f.add_argument("--out", type=Path, default=None, help="directory for lr_find.csv")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_args(e)
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--tta", type=int, default=0, metavar="K")
    e.add_argument("--aug", choices=[p.value for p in AugPolicy], default=None,
                   help="TTA policy (default: the policy the model was trained with)")
    e.add_argument("--subset", choices=["all", "val"], default="all")
    e.add_argument("--out", type=Path, default=Path("."))

    n = sub.add_parser("ensemble", help="evaluate a weighted ensemble of checkpoints")
    _add_data_args(n)
    n.add_argument("--member", action="append", type=_member, required=True, metavar="CKPT:WEIGHT")
    n.add_argument("--tta", type=int, default=0, metavar="K")
    n.add_argument("--aug", choices=[p.value for p in AugPolicy], default="minimal")
    n.add_argument("--subset", choices=["all", "val"], default="all")
    n.add_argument("--out", type=Path, default=Path("."))

    g = sub.add_parser("gen-synth", help="write a synthetic PPM dataset")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=_positive_int, default=250)
    g.add_argument("--size", type=_size, default=Shape2D(32, 32))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    return parser


def _emit(title, payload):
    print(f"{title}: {json.dumps(payload, sort_keys=True)}")


def _select(ds, args):
    if getattr(args, "subset", "all") == "val":
        return stratified_split(ds, args.val_fraction, args.seed).val
    return ds


def _tta(args, default_policy):
    if args.tta < 0:
        raise UsageError("--tta must be >= 0")
    if args.tta == 0:
        return None
    return TTAConfig(AugPolicy(args.aug or default_policy), args.tta, args.seed)


# ---------------------------------------------------------------------------


def run_train(args) -> int:
    init = args.init
    if init[0] == "random" and len(init) == 1:
        init_path = None
    elif init[0] == "checkpoint" and len(init) == 2:
        init_path = Path(init[1])
    else:
        raise UsageError("--init expects 'random' or 'checkpoint PATH'")
    if init_path is None and args.arch is None:
        raise UsageError("--arch is required unless initialising from a checkpoint")
    if not 0 < args.val_fraction < 1:
        raise UsageError("--val-fraction must be in (0, 1)")
    auto_lr = args.lr == "auto"
    try:
        lr = 0.0 if auto_lr else float(args.lr)
    except ValueError:
        raise UsageError(f"--lr must be a number or 'auto', got {args.lr!r}") from None
    if auto_lr and (args.steps < 10 or not 0 < args.lr_min < args.lr_max):
        raise UsageError("LR finder needs --steps >= 10 and 0 < --lr-min < --lr-max")
    arch = ARCH_ALIASES[args.arch] if args.arch else None
    if args.resize is not None and arch == "convnet":
        raise UsageError("--resize needs a globally pooled architecture (mini-resnet)")
    config = TrainConfig(lr=lr, batch_size=args.batch, accum_factor=args.accum,
                         precision="mixed" if args.precision == "mixed" else "full",
                         epochs=args.epochs, seed=args.seed, mixup=args.mixup,
                         aug_policy=AugPolicy(args.aug), resize_schedule=args.resize,
                         loss_scale=args.loss_scale)

    ds = load_image_dataset(args.data)
    split = stratified_split(ds, args.val_fraction, args.seed)
    if init_path is not None:
        net = ckpt.load_checkpoint(init_path)
        if arch is not None and net.arch != arch:
            raise UsageError(f"checkpoint holds a {net.arch}, not a {arch}")
        if net.num_classes != ds.num_classes:
            raise ConfigError(f"checkpoint predicts {net.num_classes} classes, dataset has {ds.num_classes}")
        if args.size is not None:
            net.set_input_size(args.size)
    else:
        if args.resize is not None:
            size = args.resize.small
        elif args.size is not None:
            size = args.size
        else:
            size = Shape2D(*ds.image(0).shape[1:])
        net = build_network(arch, size, ds.num_classes, seed=args.seed, classes=ds.classes)
    if args.resize is not None and not net.global_pooled:
        raise UsageError("--resize needs a globally pooled architecture (mini-resnet)")
    net.classes = ds.classes
    if args.freeze == "body":
        set_trainable(net, "body")

    _emit("config", {**config.to_dict(), "arch": net.arch, "input_size": str(net.input_size),
                     "init": str(init_path or "random"), "freeze": args.freeze})
    print(f"seed: {args.seed}")
    print(f"micro-batch size: {config.micro_batch_size} (batch {config.batch_size} / accumulation {config.accum_factor})")
    args.out.mkdir(parents=True, exist_ok=True)

    if auto_lr:
        record = lr_sweep(net, split.train, args.lr_min, args.lr_max, args.steps, batch_size=args.batch, seed=args.seed)
        ckpt.write_sweep_csv(record, args.out / "lr_find.csv")
        config.lr = suggest_lr_valley(record)
        print(f"lr finder chose {config.lr:.6g}")

    def report(m):
        print(f"epoch {m.epoch}: train_loss {m.train_loss:.4f} val_loss {m.val_loss:.4f} "
              f"val_accuracy {m.val_accuracy:.4f}" + (f" skipped {m.skipped_steps}" if m.skipped_steps else ""))

    history = fit(net, split.train, split.val, config, on_epoch=report)
    ckpt.write_metrics_csv(history, args.out / "metrics.csv")
    meta = {"epochs": config.epochs, "config_hash": config.digest(), "seed": args.seed,
            "lr": config.lr, "aug_policy": config.aug_policy.value}
    set_trainable(net, "all")
    ckpt.save_checkpoint(net, args.out / "model.ckpt", meta)
    print(f"wrote {args.out / 'metrics.csv'} and {args.out / 'model.ckpt'}")
    return EXIT_OK


def run_lr_find(args) -> int:
    if args.steps < 10:
        raise UsageError("--steps must be >= 10")
    if not 0 < args.lr_min < args.lr_max:
        raise UsageError("need 0 < --lr-min < --lr-max")
    if not 0 <= args.beta < 1:
        raise UsageError("--beta must be in [0, 1)")
    arch = ARCH_ALIASES[args.arch]
    _emit("config", {"arch": arch, "lr_min": args.lr_min, "lr_max": args.lr_max, "steps": args.steps,
                     "beta": args.beta, "batch": args.batch})
    print(f"seed: {args.seed}")
    ds = load_image_dataset(args.data)
    train = stratified_split(ds, args.val_fraction, args.seed).train
    size = args.size or Shape2D(*ds.image(0).shape[1:])
    net = build_network(arch, size, ds.num_classes, seed=args.seed, classes=ds.classes)
    record = lr_sweep(net, train, args.lr_min, args.lr_max, args.steps, args.beta, args.batch, args.seed)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        ckpt.write_sweep_csv(record, args.out / "lr_find.csv")
    lr = suggest_lr_valley(record)
    print(f"suggested lr: {lr:.6g}")
    return EXIT_OK


def run_eval(args) -> int:
    tta_k = args.tta
    if tta_k < 0:
        raise UsageError("--tta must be >= 0")
    net = ckpt.load_checkpoint(args.model)
    tta = _tta(args, getattr(net, "meta", {}).get("aug_policy", "minimal"))
    _emit("config", {"model": str(args.model), "tta": tta_k, "subset": args.subset,
                     "policy": tta.policy.value if tta else "none"})
    print(f"seed: {args.seed}")
    ds = _select(load_image_dataset(args.data), args)
    rep = evaluate(net, ds, tta)
    print(f"accuracy: {rep.accuracy:.6f}")
    print(f"error_rate: {rep.error_rate:.6f}")
    print(f"loss: {rep.loss:.6f}")
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.write_confusion_csv(rep, net.classes or [str(i) for i in range(net.num_classes)], args.out / "confusion.csv")
    return EXIT_OK


def run_ensemble(args) -> int:
    for _, w in args.member:
        if not (np.isfinite(w) and w > 0):
            raise UsageError(f"member weights must be positive, got {w}")
    tta = _tta(args, "minimal")
    _emit("config", {"members": [f"{p}:{w:g}" for p, w in args.member], "tta": args.tta, "subset": args.subset})
    print(f"seed: {args.seed}")
    cache = {}
    members = []
    for path, w in args.member:
        if path not in cache:
            cache[path] = ckpt.load_checkpoint(path)
        members.append(EnsembleMember(cache[path], w, path))
    spec = EnsembleSpec(members)
    ds = _select(load_image_dataset(args.data), args)
    res = ensemble_evaluate(spec, ds, tta=tta)
    for m, r in zip(members, res.member_reports):
        print(f"member {m.name} (weight {m.weight:g}): accuracy {r.accuracy:.6f} error_rate {r.error_rate:.6f}")
    d = res.decomposition
    print(f"accuracy: {res.report.accuracy:.6f}")
    print(f"error_rate: {res.report.error_rate:.6f}")
    print(f"brier: ensemble {d.ensemble_brier:.6f} = mean member {d.mean_member_brier:.6f} - ambiguity {d.ambiguity:.6f}")
    args.out.mkdir(parents=True, exist_ok=True)
    classes = members[0].net.classes or [str(i) for i in range(spec.num_classes)]
    ckpt.write_confusion_csv(res.report, classes, args.out / "confusion.csv")
    return EXIT_OK


def run_gen_synth(args) -> int:
    if not 2 <= args.classes <= 10:
        raise UsageError("--classes must be in [2, 10]")
    _emit("config", {"classes": args.classes, "per_class": args.per_class, "size": str(args.size)})
    print(f"seed: {args.seed}")
    gen_synthetic_dataset(args.out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {args.classes * args.per_class} images to {args.out}")
    return EXIT_OK


COMMANDS = {"train": run_train, "lr-find": run_lr_find, "eval": run_eval,
            "ensemble": run_ensemble, "gen-synth": run_gen_synth}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, FormatError, SplitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NoValleyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
