"""Full vs. mixed precision, and large batch vs. accumulated micro-batches.

The accumulated update is the large-batch update up to summation order, so
the two runs agree to rounding; in float32 a one-ulp difference can flip a
ReLU or max-pool choice and grow over an epoch. Mixed precision should track
full precision in accuracy.
"""
import time

import numpy as np

from paddyforge.nn import build_network
from paddyforge.optim import TrainConfig, fit

from _common import base_parser, load_split


def main():
    p = base_parser(__doc__)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--accum", type=int, default=4)
    args = p.parse_args()

    split = load_split(args)
    k = len(split.train.classes)
    runs = {}
    for label, kw in [("full", {}), ("mixed", {"precision": "mixed"}), (f"accum x{args.accum}", {"accum_factor": args.accum})]:
        net = build_network("convnet", args.size, k, seed=args.seed)
        cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed, **kw)
        t0 = time.perf_counter()
        hist = fit(net, split.train, split.val, cfg)
        runs[label] = net
        skipped = sum(m.skipped_steps for m in hist)
        print(f"{label:>10}: {time.perf_counter() - t0:6.1f}s  val acc {hist[-1].val_accuracy:.3f}  "
              f"val loss {hist[-1].val_loss:.4f}  skipped {skipped}")
    diff = max(float(np.max(np.abs(a.master - b.master)))
               for a, b in zip(runs["full"].parameters(), runs[f"accum x{args.accum}"].parameters()))
    print(f"max |w_full - w_accum| = {diff:.2e}")


if __name__ == "__main__":
    main()
