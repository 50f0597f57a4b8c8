"""Compare augmentation policies, mixup and test-time augmentation on one split."""
from paddyforge.evaluation import TTAConfig, evaluate
from paddyforge.nn import build_network
from paddyforge.optim import TrainConfig, fit

from _common import base_parser, load_split

SETTINGS = [("none", None), ("minimal", None), ("full", None), ("minimal", 0.4), ("full", 0.4)]


def main():
    p = base_parser(__doc__)
    p.add_argument("--arch", default="mini-resnet", choices=["convnet", "mini-resnet"])
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--tta", type=int, default=4, help="augmented copies per image at test time")
    args = p.parse_args()

    split = load_split(args)
    print(f"{'policy':>8} {'mixup':>6} {'val_acc':>8} {'tta_acc':>8} {'val_loss':>9}")
    for policy, alpha in SETTINGS:
        net = build_network(args.arch, args.size, len(split.train.classes), seed=args.seed)
        cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                          aug_policy=policy, mixup=alpha)
        fit(net, split.train, None, cfg)
        plain = evaluate(net, split.val)
        tta = evaluate(net, split.val, TTAConfig("minimal", args.tta, seed=args.seed))
        print(f"{policy:>8} {alpha or '-':>6} {plain.accuracy:8.3f} {tta.accuracy:8.3f} {plain.loss:9.4f}")


if __name__ == "__main__":
    main()
