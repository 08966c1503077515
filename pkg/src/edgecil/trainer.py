"""Cloud pretraining, the edge incremental update and the two baselines."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, memory, nn
from .errors import ConfigError, DataError, SupportError

log = logging.getLogger(__name__)

DEFAULT_DIMS = (1024, 512, 128, 64, 128)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_halving: bool = True
    max_epochs: int = 20
    early_stop_delta: float = 1e-4
    early_stop_patience: int = 5
    batch_size: int = 64
    validation_fraction: float = 0.2
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    seed: int = 0
    dims: tuple = DEFAULT_DIMS
    # Edge-side knobs. With update_bn_stats off, batch norm runs on the
    # pretraining running statistics during the edge update.
    update_bn_stats: bool = False
    new_class_selection: str = "herding"
    new_class_budget: int | None = None  # None keeps every new sample
    edge_batching: str = "pairs"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if not self.early_stop_delta > 0 or self.early_stop_patience < 1:
            raise ConfigError("early stopping needs delta > 0 and patience >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if not self.dims:
            raise ConfigError("dims must list at least the embedding size")
        if self.edge_batching not in ("pairs", "exemplars"):
            raise ConfigError(f"unknown edge batching {self.edge_batching!r}")
        if self.new_class_selection not in ("herding", "random"):
            raise ConfigError(f"unknown selection {self.new_class_selection!r}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_alpha(self, alpha):
        return self.replace(loss=dataclasses.replace(self.loss, alpha=alpha))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = losses.LossConfig(**d.get("loss", {}))
        d["dims"] = tuple(d.get("dims", DEFAULT_DIMS))
        return cls(**d)


@dataclass
class SessionReport:
    strategy: str = ""
    labels: list = field(default_factory=list)
    old_labels: list = field(default_factory=list)
    new_labels: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    epochs_run: int = 0
    accuracy: float | None = None
    per_class_accuracy: dict = field(default_factory=dict)
    old_class_accuracy: float | None = None
    new_class_accuracy: float | None = None
    confusion: list = field(default_factory=list)  # rows = truth, cols = prediction, in `labels` order
    # Old-class test accuracy under the network before the update minus after
    # it, both against the updated support set.
    forgetting_delta: float | None = None
    reference_old_accuracy: float | None = None

    def to_dict(self, include_timing=True):
        d = dataclasses.asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        if not include_timing:
            d.pop("epoch_seconds")
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- schedule --------------------------------------------------------------

def lr_at_epoch(cfg, epoch):
    if cfg.lr_halving:
        return cfg.initial_lr * 0.5**epoch
    return cfg.initial_lr


def should_stop(validation_losses, delta, patience):
    """True once the last ``patience`` epoch-to-epoch changes are all below ``delta``."""
    if len(validation_losses) < patience + 1:
        return False
    tail = np.asarray(validation_losses[-(patience + 1) :], dtype=np.float64)
    return bool(np.all(np.abs(np.diff(tail)) < delta))


# -- helpers ---------------------------------------------------------------

def _holdout(y, fraction, rng):
    """Stratified (train_idx, val_idx); every class keeps at least one training row."""
    train, val = [], []
    for label in sorted(set(np.asarray(y).tolist())):
        rows = np.flatnonzero(y == label)
        rows = rows[rng.permutation(len(rows))]
        n_val = min(int(np.floor(len(rows) * fraction)), len(rows) - 1)
        val.append(rows[:n_val])
        train.append(rows[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _batches(n, batch_size, rng):
    """Shuffled index batches; a trailing singleton is folded into the previous batch."""
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _accuracy(pred, truth):
    return float(np.mean(pred == truth)) if len(truth) else None


# -- evaluation ------------------------------------------------------------

def evaluate(net, support, X, y, *, old_labels=None, new_labels=None, strategy=""):
    """NCM-classify a test set and fill accuracy fields and the confusion matrix."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    labels = support.labels
    unknown = set(y.tolist()) - set(labels)
    if unknown:
        raise SupportError(f"test labels {sorted(unknown, key=str)} are not in the support set")
    pred = memory.ncm_predict(net, X, support) if len(X) else np.asarray([])
    pos = {lab: i for i, lab in enumerate(labels)}
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y.tolist(), pred.tolist()):
        confusion[pos[t], pos[p]] += 1
    report = SessionReport(strategy=strategy, labels=list(labels))
    report.confusion = confusion.tolist()
    report.accuracy = _accuracy(pred, y)
    report.per_class_accuracy = {
        lab: float(confusion[i, i] / confusion[i].sum()) for i, lab in enumerate(labels) if confusion[i].sum()
    }
    if old_labels is not None:
        report.old_labels = list(old_labels)
        mask = np.isin(y, list(old_labels))
        report.old_class_accuracy = _accuracy(pred[mask], y[mask])
    if new_labels is not None:
        report.new_labels = list(new_labels)
        mask = np.isin(y, list(new_labels))
        report.new_class_accuracy = _accuracy(pred[mask], y[mask])
    return report


def _old_accuracy(net, support, X, y, old_labels):
    mask = np.isin(y, list(old_labels))
    if not mask.any():
        return None
    return _accuracy(memory.ncm_predict(net, X[mask], support), y[mask])


def _session_report(strategy, net_old, support_old, net_new, support_new, test_set, new_labels):
    old_labels = support_old.labels
    if test_set is None:
        return SessionReport(strategy=strategy, labels=support_new.labels, old_labels=old_labels,
                             new_labels=list(new_labels))
    X, y = np.asarray(test_set[0], dtype=np.float64), np.asarray(test_set[1])
    # Both sides classify against the same (updated) support set so the delta
    # isolates the change of network; prototypes are recomputed per network.
    before = _old_accuracy(net_old, support_new, X, y, old_labels)
    report = evaluate(net_new, support_new, X, y, old_labels=old_labels, new_labels=new_labels, strategy=strategy)
    report.reference_old_accuracy = before
    if before is not None and report.old_class_accuracy is not None:
        report.forgetting_delta = before - report.old_class_accuracy
    return report


# -- cloud pretraining -----------------------------------------------------

def pretrain(X, y, cfg=TrainConfig()):
    """Train an embedding network from scratch with the contrastive loss only."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise DataError("pretraining needs at least two classes")
    if counts.min() < 2:
        raise DataError("every class needs at least two samples")
    rng = np.random.default_rng(cfg.seed)
    tr, va = _holdout(y, cfg.validation_fraction, rng)
    if len(tr) < 2:
        raise DataError("validation split leaves fewer than two training samples")
    specs = nn.mlp_specs(X.shape[1], cfg.dims)
    net = nn.new_network(specs, cfg.dims[-1], cfg.seed)
    state = nn.AdamState.for_network(net)
    con_cfg = dataclasses.replace(cfg.loss, alpha=0.0)
    Xv, yv = X[va], y[va]
    val_pairs = losses.all_pairs(yv, seed=cfg.seed, max_pairs=cfg.loss.max_pairs) if len(va) >= 2 else None

    report = SessionReport(strategy="pretrain", labels=classes.tolist())
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        net.train()
        batch_losses = []
        for idx in _batches(len(tr), cfg.batch_size, rng):
            rows = tr[idx]
            pairs = losses.all_pairs(y[rows], seed=int(rng.integers(2**31)), max_pairs=cfg.loss.max_pairs)
            loss, grads = losses.contrastive_loss_and_grads(net, X[rows], pairs, con_cfg)
            nn.adam_step(net, grads, state, lr)
            batch_losses.append(loss)
        report.train_losses.append(float(np.mean(batch_losses)))
        if val_pairs is not None:
            report.val_losses.append(losses.joint_loss_value(net, None, 0, val_pairs, Xv, con_cfg))
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.epochs_run = epoch + 1
        log.debug("pretrain epoch %d lr=%g train=%.5f", epoch, lr, report.train_losses[-1])
        if should_stop(report.val_losses, cfg.early_stop_delta, cfg.early_stop_patience):
            break
    net.eval()
    return net, report


# -- edge update -----------------------------------------------------------

def _check_new(support, new_y):
    if len(new_y) == 0:
        raise SupportError("no new samples")
    if len(support) == 0:
        raise SupportError("support set is empty")
    clash = set(np.asarray(new_y).tolist()) & set(support.labels)
    if clash:
        raise SupportError(f"new labels {sorted(clash, key=str)} already present in the support set")


def _exemplar_steps(X0, y0, Xn, yn, cfg, rng):
    for idx in _batches(len(X0), cfg.batch_size, rng):
        pairs = losses.build_pairs(
            y0[idx], yn, cfg.loss.pair_strategy, seed=int(rng.integers(2**31)), max_pairs=cfg.loss.max_pairs
        )
        yield X0[idx], pairs, np.vstack([X0[idx], Xn])


def _pair_steps(X0, y0, Xn, yn, cfg, rng):
    n0 = len(X0)
    epoch_pairs = losses.build_pairs(
        y0, yn, cfg.loss.pair_strategy, seed=int(rng.integers(2**31)), max_pairs=cfg.loss.max_pairs
    )
    order = rng.permutation(len(epoch_pairs))
    X = np.vstack([X0, Xn])
    for start in range(0, len(order), cfg.batch_size):
        sel = order[start : start + cfg.batch_size]
        left, right = epoch_pairs.left[sel], epoch_pairs.right[sel]
        rows = np.unique(np.concatenate([left, right]))
        remap = np.full(len(X), -1, dtype=np.int64)
        remap[rows] = np.arange(len(rows))
        pb = losses.PairBatch(remap[left], remap[right], epoch_pairs.similar[sel], epoch_pairs.strategy)
        k = int(np.sum(rows < n0))
        yield X[rows[:k]], pb, X[rows]


def edge_update(net_old, support, new_X, new_y, cfg=TrainConfig(), *, test_set=None, strategy="pilote"):
    """Incremental update on the edge.

    ``net_old`` is cloned and left untouched; the clone is trained on the
    support exemplars plus the new samples with the blended
    distillation/contrastive objective. With ``edge_batching="pairs"`` each
    epoch draws one pair set (capped at ``loss.max_pairs``) and steps on
    ``batch_size`` pairs at a time; ``"exemplars"`` instead pairs every new
    training sample with one ``batch_size`` chunk of exemplars per step.

    Returns ``(net_new, support_new, report)``; the report carries
    accuracies and the forgetting delta when ``test_set=(X, y)`` is given.
    """
    new_X = np.asarray(new_X, dtype=np.float64)
    new_y = np.asarray(new_y)
    _check_new(support, new_y)
    rng = np.random.default_rng(cfg.seed)
    X0, y0 = support.stacked()
    tr0, va0 = _holdout(y0, cfg.validation_fraction, rng)
    trn, van = _holdout(new_y, cfg.validation_fraction, rng)
    if len(van) == 0:
        va0, van = tr0, trn  # too few new samples to hold any out
    Xn_tr, yn_tr = new_X[trn], new_y[trn]
    val_inputs = np.vstack([X0[va0], new_X[van]])
    val_pairs = losses.build_pairs(
        y0[va0], new_y[van], cfg.loss.pair_strategy, seed=cfg.seed, max_pairs=cfg.loss.max_pairs
    )

    net_new = net_old.clone().train()
    net_new.bn_frozen = not cfg.update_bn_stats
    state = nn.AdamState.for_network(net_new)
    report = SessionReport(strategy=strategy)
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        net_new.train()
        batch_losses = []
        if cfg.edge_batching == "pairs":
            steps = _pair_steps(X0[tr0], y0[tr0], Xn_tr, yn_tr, cfg, rng)
        else:
            steps = _exemplar_steps(X0[tr0], y0[tr0], Xn_tr, yn_tr, cfg, rng)
        for ex_inputs, pairs, combined in steps:
            loss, grads = losses.joint_loss_and_grads(
                net_new, net_old, ex_inputs, pairs, combined, cfg.loss
            )
            nn.adam_step(net_new, grads, state, lr)
            batch_losses.append(loss)
        report.train_losses.append(float(np.mean(batch_losses)))
        report.val_losses.append(
            losses.joint_loss_value(net_new, net_old, len(va0), val_pairs, val_inputs, cfg.loss)
        )
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.epochs_run = epoch + 1
        if should_stop(report.val_losses, cfg.early_stop_delta, cfg.early_stop_patience):
            break
    net_new.bn_frozen = False
    net_new.eval()

    support_new = support
    for label in sorted(set(new_y.tolist()), key=str):
        rows = new_y == label
        support_new = memory.add_new_class(
            support_new, net_new, new_X[rows], label,
            cfg.new_class_budget or int(rows.sum()),
            selection=cfg.new_class_selection, seed=cfg.seed,
        )
    final = _session_report(strategy, net_old, support, net_new, support_new, test_set, sorted(set(new_y.tolist()), key=str))
    final.train_losses, final.val_losses = report.train_losses, report.val_losses
    final.epoch_seconds, final.epochs_run = report.epoch_seconds, report.epochs_run
    return net_new, support_new, final


def baseline_retrained(net_old, support, new_X, new_y, cfg=TrainConfig(), *, test_set=None):
    """Edge update without distillation (alpha forced to 0)."""
    return edge_update(net_old, support, new_X, new_y, cfg.with_alpha(0.0), test_set=test_set, strategy="retrained")


def baseline_pretrained(net_old, support, new_X, new_y, cfg=TrainConfig(), *, test_set=None):
    """No training: randomly chosen new-class exemplars give the new prototype under the old network."""
    new_X = np.asarray(new_X, dtype=np.float64)
    new_y = np.asarray(new_y)
    _check_new(support, new_y)
    support_new = support
    new_labels = sorted(set(new_y.tolist()), key=str)
    for label in new_labels:
        rows = new_y == label
        support_new = memory.add_new_class(
            support_new, net_old, new_X[rows], label,
            cfg.new_class_budget or int(rows.sum()), selection="random", seed=cfg.seed,
        )
    return support_new, _session_report("pretrained", net_old, support, net_old, support_new, test_set, new_labels)
