"""Train several seeds of one architecture and evaluate them as an ensemble.

Prints each member's accuracy, the ensemble's, and the Brier-score split into
mean member error and ambiguity.
"""
from paddyforge.evaluation import EnsembleMember, EnsembleSpec, ensemble_evaluate
from paddyforge.nn import build_network
from paddyforge.optim import TrainConfig, fit, lr_sweep, suggest_lr_valley

from _common import base_parser, load_split


def main():
    p = base_parser(__doc__)
    p.add_argument("--arch", default="mini-resnet", choices=["convnet", "mini-resnet"])
    p.add_argument("--members", type=int, default=3)
    args = p.parse_args()

    split = load_split(args)
    members = []
    for s in range(args.seed, args.seed + args.members):
        net = build_network(args.arch, args.size, len(split.train.classes), seed=s)
        lr = suggest_lr_valley(lr_sweep(net, split.train, 1e-5, 10.0, 40, batch_size=args.batch, seed=s))
        fit(net, split.train, None, TrainConfig(lr=lr, batch_size=args.batch, epochs=args.epochs, seed=s,
                                                aug_policy="minimal"))
        members.append(EnsembleMember(net, name=f"seed{s}"))
        print(f"seed {s}: lr {lr:.3g}")
    res = ensemble_evaluate(EnsembleSpec(members), split.val)
    for m, rep in zip(members, res.member_reports):
        print(f"{m.name:>8}: acc {rep.accuracy:.3f}")
    d = res.decomposition
    print(f"ensemble: acc {res.report.accuracy:.3f}")
    print(f"brier {d.ensemble_brier:.4f} = member mean {d.mean_member_brier:.4f} - ambiguity {d.ambiguity:.4f}")


if __name__ == "__main__":
    main()
