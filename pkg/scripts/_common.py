"""Shared setup for the experiment scripts: argparse flags and the synthetic split."""
import argparse
from pathlib import Path

from paddyforge.data import gen_synthetic_dataset, load_image_dataset, stratified_split
from paddyforge.tensor import Shape2D


def base_parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--data", type=Path, default=Path("runs/synth"),
                   help="dataset root; a synthetic 4-class set is generated here if missing")
    p.add_argument("--size", type=Shape2D.parse, default=Shape2D(32, 32))
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=64)
    return p


def load_split(args):
    if not args.data.exists():
        gen_synthetic_dataset(args.data, classes=4, per_class=args.per_class, size=args.size, seed=args.seed)
        print(f"generated synthetic data in {args.data}")
    return stratified_split(load_image_dataset(args.data), 0.2, seed=args.seed)
