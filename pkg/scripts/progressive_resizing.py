"""Progressive resizing: train small-then-large vs. large throughout on MiniResNet.

Reports wall time, total multiply-accumulates and final validation accuracy.
"""
import time

from paddyforge.nn import build_network
from paddyforge.optim import ResizeSchedule, TrainConfig, fit, progressive_schedule
from paddyforge.tensor import Shape2D

from _common import base_parser, load_split


def main():
    p = base_parser(__doc__)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--small", type=Shape2D.parse, default=Shape2D(16, 16))
    p.add_argument("--switch", type=int, default=3, help="epoch at which to switch to full size")
    args = p.parse_args()

    split = load_split(args)
    n = len(split.train)
    for label, schedule in [("fixed", None), ("progressive", ResizeSchedule(args.small, args.switch, args.size))]:
        net = build_network("mini-resnet", args.size, len(split.train.classes), seed=args.seed)
        cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                          aug_policy="minimal", resize_schedule=schedule)
        macs = sum(net.macs(progressive_schedule(cfg, e, args.size)[0]) for e in range(args.epochs)) * n
        t0 = time.perf_counter()
        hist = fit(net, split.train, split.val, cfg)
        print(f"{label:>12}: {time.perf_counter() - t0:6.1f}s  {macs / 1e9:7.2f} GMAC (forward)  "
              f"val acc {hist[-1].val_accuracy:.3f}")


if __name__ == "__main__":
    main()
