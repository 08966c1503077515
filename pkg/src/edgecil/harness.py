"""Leave-one-class-out experiments and the support-size / new-sample sweeps.

Each run pretrains on every class but the held-out one, builds the exemplar
memory, hands a few held-out samples to each strategy and evaluates NCM on
the full test split. Per-run reports go to ``<out>/<experiment>/runs/*.json``
(timing-free, so they regenerate byte-identically from the scenario and
seed); wall-clock times go to sibling ``*.timing.json`` files; the sweep
aggregate is ``<out>/<experiment>/aggregate.csv``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, memory, nn, trainer
from .errors import ConfigError

log = logging.getLogger(__name__)

STRATEGIES = ("pretrained", "retrained", "pilote")
DESK_DIMS = (128, 64, 32)

AGGREGATE_FIELDS = [
    "experiment", "held_out", "selection", "support_size", "new_count", "strategy", "runs",
    "accuracy_mean", "accuracy_std", "old_accuracy_mean", "old_accuracy_std",
    "new_accuracy_mean", "new_accuracy_std", "forgetting_mean", "forgetting_std",
]


@dataclass
class Scenario:
    synthetic: data.SyntheticSpec | None = field(default_factory=lambda: data.SyntheticSpec(separability=0.7))
    csv_path: str | None = None  # feature CSV; overrides `synthetic` when set
    held_out: tuple = (4,)
    support_sizes: tuple = (200,)  # exemplars per old class
    new_counts: tuple = (30,)
    strategies: tuple = STRATEGIES
    selections: tuple = ("herding",)
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "reports"
    train: trainer.TrainConfig = field(default_factory=lambda: trainer.TrainConfig(dims=DESK_DIMS))
    pretrain_batch_size: int = 16
    test_fraction: float = 0.3
    confusion_counts: tuple = (30,)


def load_dataset(scenario):
    if scenario.csv_path:
        return data.load_csv(scenario.csv_path, "features")
    if scenario.synthetic is None:
        raise ConfigError("scenario has neither a CSV path nor a synthetic spec")
    return data.extract_feature_matrix(data.generate_synthetic(scenario.synthetic), scenario.synthetic.layout)


def validate(scenario, y):
    labels = set(np.asarray(y).tolist())
    for grid in ("held_out", "support_sizes", "new_counts", "strategies", "selections", "seeds"):
        if not getattr(scenario, grid):
            raise ConfigError(f"scenario grid {grid!r} is empty")
    missing = [h for h in scenario.held_out if h not in labels]
    if missing:
        raise ConfigError(f"held-out classes {missing} not in dataset labels {sorted(labels, key=str)}")
    bad = set(scenario.strategies) - set(STRATEGIES)
    if bad:
        raise ConfigError(f"unknown strategies {sorted(bad)}")
    if set(scenario.selections) - {"herding", "random"}:
        raise ConfigError(f"unknown selections {scenario.selections}")
    if any(k < 1 for k in scenario.support_sizes) or any(n < 1 for n in scenario.new_counts):
        raise ConfigError("grid values must be positive")
    if len(labels) < 3:
        raise ConfigError("need at least three classes (two old, one new)")


@dataclass
class Prepared:
    """Normalised split and pretrained network for one (held-out class, seed)."""

    net: nn.EmbeddingNetwork
    normalizer: data.Normalizer
    X_old: np.ndarray
    y_old: np.ndarray
    X_held: np.ndarray
    held_label: object
    X_test: np.ndarray
    y_test: np.ndarray
    cfg: trainer.TrainConfig
    pretrain_report: trainer.SessionReport


def prepare(scenario, X, y, held_out, seed):
    (Xtr, ytr), (Xte, yte) = data.split_dataset(X, y, scenario.test_fraction, seed)
    old = ytr != held_out
    norm = data.Normalizer.fit(Xtr[old])
    Xtr, Xte = norm(Xtr), norm(Xte)
    cfg = scenario.train.replace(seed=seed)
    net, report = trainer.pretrain(Xtr[old], ytr[old], cfg.replace(batch_size=scenario.pretrain_batch_size))
    return Prepared(net, norm, Xtr[old], ytr[old], Xtr[~old], held_out, Xte, yte, cfg, report)


def run_strategies(prep, support, n_new, strategies, seed):
    """Run each strategy on the same support set and the same new samples."""
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(prep.X_held), size=min(n_new, len(prep.X_held)), replace=False)
    new_X = prep.X_held[np.sort(pick)]
    new_y = np.full(len(new_X), prep.held_label, dtype=np.asarray(prep.y_old).dtype)
    test = (prep.X_test, prep.y_test)
    out = {}
    for name in strategies:
        if name == "pretrained":
            _, report = trainer.baseline_pretrained(prep.net, support, new_X, new_y, prep.cfg, test_set=test)
        elif name == "retrained":
            _, _, report = trainer.baseline_retrained(prep.net, support, new_X, new_y, prep.cfg, test_set=test)
        else:
            _, _, report = trainer.edge_update(prep.net, support, new_X, new_y, prep.cfg, test_set=test)
        out[name] = report
    return out


def _std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(records):
    """Group per-run records by cell and strategy; mean and sample std per metric."""
    groups = {}
    for rec in records:
        key = (rec["experiment"], rec["held_out"], rec["selection"], rec["support_size"], rec["new_count"], rec["strategy"])
        groups.setdefault(key, []).append(rec["report"])
    rows = []
    for key, reports in groups.items():
        row = dict(zip(AGGREGATE_FIELDS[:6], key), runs=len(reports))
        for metric, src in (("accuracy", "accuracy"), ("old_accuracy", "old_class_accuracy"),
                            ("new_accuracy", "new_class_accuracy"), ("forgetting", "forgetting_delta")):
            vals = [r[src] for r in reports if r[src] is not None]
            row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{metric}_std"] = _std(vals) if vals else None
        rows.append(row)
    return rows


def write_aggregate(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in AGGREGATE_FIELDS})
    return path


def read_aggregate(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_confusion(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred", *report.labels])
        for label, row in zip(report.labels, report.confusion):
            w.writerow([label, *row])
    return path


def run_experiment(scenario, experiment):
    """Run every (held-out, seed, K, selection, n, strategy) cell and write reports.

    Returns ``(aggregate_rows, written_paths)``.
    """
    X, y = load_dataset(scenario)
    validate(scenario, y)
    root = Path(scenario.output_dir) / experiment
    written, records = [], []
    for held in scenario.held_out:
        for seed in scenario.seeds:
            prep = prepare(scenario, X, y, held, seed)
            for selection in scenario.selections:
                for K in scenario.support_sizes:
                    support = memory.build_support(prep.net, prep.X_old, prep.y_old, K, selection, seed)
                    for n_new in scenario.new_counts:
                        reports = run_strategies(prep, support, n_new, scenario.strategies, seed)
                        for name, report in reports.items():
                            stem = f"held{held}_K{K}_n{n_new}_{selection}_{name}_seed{seed}"
                            body = report.to_dict(include_timing=False)
                            rec = dict(experiment=experiment, held_out=held, selection=selection,
                                       support_size=K, new_count=n_new, strategy=name, seed=seed)
                            _write_json(root / "runs" / f"{stem}.json", {**rec, "report": body})
                            _write_json(root / "runs" / f"{stem}.timing.json",
                                        {"epoch_seconds": report.epoch_seconds,
                                         "pretrain_epoch_seconds": prep.pretrain_report.epoch_seconds})
                            written.append(root / "runs" / f"{stem}.json")
                            if experiment == "sweep_n" and n_new in scenario.confusion_counts and name != "pretrained":
                                written.append(write_confusion(root / "confusion" / f"{stem}.csv", report))
                            records.append({**rec, "report": body})
                        log.info("%s held=%s seed=%s K=%s n=%s done", experiment, held, seed, K, n_new)
    rows = aggregate(records)
    written.append(write_aggregate(root / "aggregate.csv", rows))
    return rows, written


def run_leave_one_out(scenario):
    return run_experiment(scenario, "loo")


def sweep_support_size(scenario):
    return run_experiment(scenario, "sweep_k")


def sweep_new_class_count(scenario):
    return run_experiment(scenario, "sweep_n")


def default_scenario(experiment, **overrides):
    """Desk-scale grids shaped after the support-size and new-sample sweeps."""
    grids = {
        "loo": dict(held_out=(0, 1, 2, 3, 4)),
        "sweep_k": dict(support_sizes=(10, 50, 100, 200, 400), selections=("herding", "random")),
        "sweep_n": dict(new_counts=(10, 30, 50, 100, 200), support_sizes=(200,)),
    }[experiment]
    return dataclasses.replace(Scenario(), **{**grids, **overrides})


def emit_embeddings(net, X, y, path):
    """Write eval-mode embeddings as CSV rows ``e0..e{d-1},label``."""
    E = nn.embed_eval(net, np.asarray(X, dtype=np.float64))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*(f"e{i}" for i in range(E.shape[1])), "label"])
        for row, label in zip(E, np.asarray(y).tolist()):
            w.writerow([*(repr(float(v)) for v in row), label])
    return path
