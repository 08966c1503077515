"""Command-line entry point (``edgecil`` / ``python -m edgecil``).

Errors are reported on stderr as one JSON object ``{"error": ..., "message": ...}``
with exit status 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bundle as bundle_mod
from . import data, harness, losses, memory, trainer
from .errors import EdgeCILError

log = logging.getLogger("edgecil")


def _dump(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _label(text):
    try:
        return int(text)
    except ValueError:
        return text


def _train_config(args, **extra):
    loss = losses.LossConfig(
        margin=args.margin, alpha=args.alpha, pair_strategy=args.pair_strategy, max_pairs=args.max_pairs
    )
    return trainer.TrainConfig(
        initial_lr=args.lr,
        lr_halving=not args.no_lr_halving,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        validation_fraction=args.validation_fraction,
        loss=loss,
        seed=args.seed,
        dims=tuple(args.dims),
        update_bn_stats=args.update_bn_stats,
        **extra,
    )


def _add_train_flags(p, dims=harness.DESK_DIMS):
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate")
    p.add_argument("--no-lr-halving", action="store_true")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--validation-fraction", type=float, default=0.2)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--pair-strategy", choices=losses.PAIR_STRATEGIES, default=losses.UNION)
    p.add_argument("--max-pairs", type=int, default=4096)
    p.add_argument("--dims", type=int, nargs="+", default=list(dims), help="hidden widths then embedding size")
    p.add_argument("--update-bn-stats", action="store_true",
                   help="use batch statistics (and update running stats) during edge updates")


def _add_synth_flags(p):
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--separability", type=float, default=0.7)
    p.add_argument("--jitter", type=float, default=0.7)


# -- commands --------------------------------------------------------------

def cmd_synth(args):
    spec = data.SyntheticSpec(num_classes=args.classes, per_class=args.per_class,
                              separability=args.separability, seed=args.seed, jitter=args.jitter)
    windows = data.generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X, y = data.extract_feature_matrix(windows, spec.layout)
    (Xtr, ytr), (Xte, yte) = data.split_dataset(X, y, args.test_fraction, args.seed)
    data.write_feature_csv(out / "train.csv", Xtr, ytr)
    data.write_feature_csv(out / "test.csv", Xte, yte)
    files = ["train.csv", "test.csv"]
    if args.raw:
        data.write_raw_csv(out / "raw.csv", windows, spec.layout)
        files.append("raw.csv")
    _dump({"files": files, "train_rows": len(ytr), "test_rows": len(yte)})


def _read_features(path):
    X, y = data.load_csv(path, "features")
    if len(y) == 0:
        raise EdgeCILError(f"{path} holds no samples")
    return X, y


def cmd_pretrain(args):
    X, y = _read_features(args.data)
    keep = ~np.isin(y, [_label(v) for v in args.exclude])
    X, y = X[keep], y[keep]
    norm = data.Normalizer.fit(X)
    cfg = _train_config(args)
    net, report = trainer.pretrain(norm(X), y, cfg)
    bundle_mod.save_bundle(bundle_mod.TransferBundle(net, memory.SupportSet(), norm, config=cfg), args.out)
    _dump(report.to_dict(), args.report)


def cmd_package(args):
    b = bundle_mod.load_bundle(args.model)
    X, y = _read_features(args.data)
    keep = ~np.isin(y, [_label(v) for v in args.exclude])
    Xn = b.normalizer(X[keep])
    b.support = memory.build_support(b.network, Xn, y[keep], args.budget, args.selection, args.seed)
    bundle_mod.save_bundle(b, args.out)
    _dump({"classes": [str(c) for c in b.support.labels],
           "exemplars": {str(c): len(s) for c, s in b.support.exemplars.items()}})


def cmd_edge_update(args):
    b = bundle_mod.load_bundle(args.bundle)
    X, y = _read_features(args.data)
    new = ~np.isin(y, b.support.labels)
    if not new.any():
        raise EdgeCILError("no samples with labels outside the support set")
    new_X, new_y = b.normalizer(X[new]), y[new]
    if args.max_new is not None:
        pick = np.sort(np.random.default_rng(args.seed).permutation(len(new_y))[: args.max_new])
        new_X, new_y = new_X[pick], new_y[pick]
    cfg = _train_config(args)
    test = None
    if args.test:
        Xt, yt = _read_features(args.test)
        known = np.isin(yt, [*b.support.labels, *np.unique(new_y).tolist()])
        test = (b.normalizer(Xt[known]), yt[known])
    if args.strategy == "pretrained":
        support, report = trainer.baseline_pretrained(b.network, b.support, new_X, new_y, cfg, test_set=test)
        net = b.network
    elif args.strategy == "retrained":
        net, support, report = trainer.baseline_retrained(b.network, b.support, new_X, new_y, cfg, test_set=test)
    else:
        net, support, report = trainer.edge_update(b.network, b.support, new_X, new_y, cfg, test_set=test)
    bundle_mod.save_bundle(dataclasses.replace(b, network=net, support=support, config=cfg), args.out)
    _dump(report.to_dict(), args.report)


def cmd_evaluate(args):
    b = bundle_mod.load_bundle(args.bundle)
    X, y = _read_features(args.data)
    report = trainer.evaluate(b.network, b.support, b.normalizer(X), y, strategy="evaluate")
    _dump(report.to_dict(), args.report)


def cmd_emit_embeddings(args):
    b = bundle_mod.load_bundle(args.bundle)
    X, y = _read_features(args.data)
    harness.emit_embeddings(b.network, b.normalizer(X), y, args.out)
    _dump({"rows": len(y), "path": args.out})


def _scenario(args, experiment):
    cfg = _train_config(args)
    over = dict(
        seeds=tuple(range(args.seed, args.seed + args.n_seeds)),
        output_dir=args.out_dir,
        strategies=tuple(args.strategies),
        train=cfg,
        pretrain_batch_size=args.pretrain_batch_size,
        synthetic=data.SyntheticSpec(num_classes=args.classes, per_class=args.per_class,
                                     separability=args.separability, seed=args.data_seed, jitter=args.jitter),
        csv_path=args.data,
    )
    if args.held_out:
        over["held_out"] = tuple(_label(v) for v in args.held_out)
    if args.support_sizes:
        over["support_sizes"] = tuple(args.support_sizes)
    if args.new_counts:
        over["new_counts"] = tuple(args.new_counts)
    if args.selections:
        over["selections"] = tuple(args.selections)
    return harness.default_scenario(experiment, **over)


def _cmd_experiment(experiment):
    def run(args):
        rows, written = harness.run_experiment(_scenario(args, experiment), experiment)
        _dump({"aggregate": rows, "files": len(written)})
    return run


def build_parser():
    parser = argparse.ArgumentParser(prog="edgecil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic activity dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--raw", action="store_true", help="also write the raw sensor stream")
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train an embedding network (writes a bundle without exemplars)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", nargs="*", default=[], help="labels left out of pretraining")
    p.add_argument("--report")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain, batch_size=16)

    p = sub.add_parser("package", help="select exemplars and write the transfer bundle")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--model", required=True, help="bundle written by pretrain")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=200, help="exemplars per class")
    p.add_argument("--selection", choices=("herding", "random"), default="herding")
    p.add_argument("--exclude", nargs="*", default=[])
    p.set_defaults(func=cmd_package)

    p = sub.add_parser("edge-update", help="learn new classes on the edge")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True, help="feature CSV; rows with unseen labels are the new samples")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=harness.STRATEGIES, default="pilote")
    p.add_argument("--max-new", type=int)
    p.add_argument("--test")
    p.add_argument("--report")
    _add_train_flags(p)
    p.set_defaults(func=cmd_edge_update)

    p = sub.add_parser("evaluate", help="NCM accuracy and confusion matrix of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("emit-embeddings", help="dump embeddings as CSV for external plotting")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_embeddings)

    for name, experiment, helptext in (
        ("loo", "loo", "leave-one-class-out comparison"),
        ("sweep-k", "sweep_k", "accuracy vs exemplars per class"),
        ("sweep-n", "sweep_n", "accuracy vs number of new-class samples"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--seed", type=int, required=True, help="first run seed")
        p.add_argument("--n-seeds", type=int, default=5)
        p.add_argument("--out-dir", default="reports")
        p.add_argument("--data", help="feature CSV (default: synthetic data)")
        p.add_argument("--data-seed", type=int, default=0)
        p.add_argument("--held-out", nargs="+")
        p.add_argument("--support-sizes", type=int, nargs="+")
        p.add_argument("--new-counts", type=int, nargs="+")
        p.add_argument("--selections", nargs="+", choices=("herding", "random"))
        p.add_argument("--strategies", nargs="+", choices=harness.STRATEGIES, default=list(harness.STRATEGIES))
        p.add_argument("--pretrain-batch-size", type=int, default=16)
        _add_synth_flags(p)
        _add_train_flags(p)
        p.set_defaults(func=_cmd_experiment(experiment))
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (EdgeCILError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
