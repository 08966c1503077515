"""Margin contrastive loss, embedding distillation and their blended objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, PairError

NEW_ONLY = "new_only"
CROSS_OLD_NEW = "cross_old_new"
UNION = "union"
PAIR_STRATEGIES = (NEW_ONLY, CROSS_OLD_NEW, UNION)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    alpha: float = 0.5
    pair_strategy: str = UNION
    max_pairs: int | None = 4096
    # "mean": each term is averaged before blending; "sum": raw sums.
    reduction: str = "mean"

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ConfigError(f"unknown pair strategy {self.pair_strategy!r}")
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ConfigError("max_pairs must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


@dataclass
class PairBatch:
    """Index pairs into a combined ``[old; new]`` sample matrix."""

    left: np.ndarray
    right: np.ndarray
    similar: np.ndarray  # 1 when both samples share a label
    strategy: str
    degraded: bool = False  # Union requested but no old samples were available

    def __len__(self):
        return len(self.left)


def contrastive_pair_loss(e_i, e_j, similar, margin):
    """Squared distance for similar pairs, ``max(0, margin^2 - d^2)`` otherwise."""
    e_i = np.asarray(e_i, dtype=np.float64)
    e_j = np.asarray(e_j, dtype=np.float64)
    if e_i.shape != e_j.shape:
        raise DimensionError(f"embedding shapes differ: {e_i.shape} vs {e_j.shape}")
    d2 = float(np.sum((e_i - e_j) ** 2))
    if similar:
        return d2
    return max(0.0, margin * margin - d2)


def contrastive_terms(emb, pairs, margin):
    """Per-pair losses and their gradient w.r.t. the embedding matrix."""
    diff = emb[pairs.left] - emb[pairs.right]
    d2 = np.einsum("ij,ij->i", diff, diff)
    sim = pairs.similar.astype(bool)
    active = ~sim & (d2 < margin * margin)
    losses = np.where(sim, d2, np.where(active, margin * margin - d2, 0.0))
    coef = np.where(sim, 2.0, np.where(active, -2.0, 0.0))
    g_pair = coef[:, None] * diff
    grad = np.zeros_like(emb)
    np.add.at(grad, pairs.left, g_pair)
    np.add.at(grad, pairs.right, -g_pair)
    return losses, grad


def distillation_loss(new_embs, old_embs):
    """Sum over rows of the squared Euclidean displacement."""
    new_embs = np.asarray(new_embs, dtype=np.float64)
    old_embs = np.asarray(old_embs, dtype=np.float64)
    if new_embs.shape != old_embs.shape:
        raise DimensionError(f"shape mismatch: {new_embs.shape} vs {old_embs.shape}")
    return float(np.sum((new_embs - old_embs) ** 2))


def build_pairs(old_labels, new_labels, strategy=UNION, seed=0, max_pairs=None):
    """Build training pairs over ``[old samples; new samples]``.

    Old samples occupy indices ``0..len(old_labels)-1``, new samples follow.
    ``new_only`` gives every unordered pair among the new samples,
    ``cross_old_new`` every (old, new) pair, ``union`` both. With
    ``max_pairs`` set, a seeded uniform subsample (order preserved) is kept.
    """
    old_labels = np.asarray(old_labels)
    new_labels = np.asarray(new_labels)
    if strategy not in PAIR_STRATEGIES:
        raise PairError(f"unknown pair strategy {strategy!r}")
    n_old, n_new = len(old_labels), len(new_labels)
    if n_new == 0:
        raise PairError("new sample set is empty")
    degraded = strategy == UNION and n_old == 0
    lefts, rights = [], []
    if strategy in (NEW_ONLY, UNION):
        i, j = np.triu_indices(n_new, k=1)
        lefts.append(i + n_old)
        rights.append(j + n_old)
    if strategy in (CROSS_OLD_NEW, UNION) and n_old:
        i, j = np.meshgrid(np.arange(n_old), np.arange(n_new), indexing="ij")
        lefts.append(i.ravel())
        rights.append(j.ravel() + n_old)
    left = np.concatenate(lefts) if lefts else np.zeros(0, dtype=np.int64)
    right = np.concatenate(rights) if rights else np.zeros(0, dtype=np.int64)
    if max_pairs is not None and len(left) > max_pairs:
        keep = np.sort(np.random.default_rng(seed).choice(len(left), size=max_pairs, replace=False))
        left, right = left[keep], right[keep]
    labels = np.concatenate([old_labels, new_labels]) if n_old else new_labels
    similar = (labels[left] == labels[right]).astype(np.int8)
    return PairBatch(left.astype(np.int64), right.astype(np.int64), similar, strategy, degraded)


def all_pairs(labels, seed=0, max_pairs=None):
    """Every unordered pair within one labelled batch."""
    return build_pairs([], labels, NEW_ONLY, seed=seed, max_pairs=max_pairs)


def n_choose_2(n):
    return math.comb(n, 2)


def contrastive_loss_and_grads(net, inputs, pairs, cfg):
    """Contrastive-only objective (used for cloud pretraining)."""
    return joint_loss_and_grads(net, None, inputs[:0], pairs, inputs, cfg)


def joint_loss_and_grads(net_new, net_old_frozen, exemplar_inputs, pair_batch, combined_inputs, cfg):
    """Blend of exemplar distillation and pair contrastive loss.

    ``exemplar_inputs`` must be the leading rows of ``combined_inputs``; a
    single train-mode forward of ``net_new`` over ``combined_inputs`` serves
    both terms. The frozen teacher normalises exactly like the student (batch
    statistics of the same batch, or running statistics when the student's
    batch norm is frozen) and is never mutated.
    """
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    combined_inputs = np.asarray(combined_inputs, dtype=np.float64)
    exemplar_inputs = np.asarray(exemplar_inputs, dtype=np.float64)
    k = len(exemplar_inputs)
    if k and not np.array_equal(combined_inputs[:k], exemplar_inputs):
        raise PairError("exemplar rows must lead the combined input matrix")
    n = len(combined_inputs)
    if len(pair_batch) and (
        pair_batch.left.min() < 0 or pair_batch.right.max() >= n or pair_batch.left.max() >= n
    ):
        raise PairError("pair index out of range for combined inputs")

    emb = nn.embed_batch(net_new, combined_inputs)
    upstream = np.zeros_like(emb)
    loss = 0.0

    w_dist = cfg.alpha
    if k and w_dist > 0:
        if net_old_frozen is None:
            raise ConfigError("distillation requires a frozen teacher network")
        if net_new.bn_frozen:
            teacher = nn.embed_eval(net_old_frozen, combined_inputs[:k])
        else:
            teacher = nn.embed_with_batch_stats(net_old_frozen, combined_inputs)[:k]
        scale = 1.0 / k if cfg.reduction == "mean" else 1.0
        diff = emb[:k] - teacher
        loss += w_dist * scale * float(np.sum(diff * diff))
        upstream[:k] += w_dist * scale * 2.0 * diff

    w_con = 1.0 - cfg.alpha
    if len(pair_batch) and w_con > 0:
        losses, grad = contrastive_terms(emb, pair_batch, cfg.margin)
        scale = 1.0 / len(pair_batch) if cfg.reduction == "mean" else 1.0
        loss += w_con * scale * float(losses.sum())
        upstream += w_con * scale * grad

    return loss, nn.gradients(net_new, combined_inputs, upstream)


def joint_loss_value(net_new, net_old_frozen, exemplar_count, pair_batch, combined_inputs, cfg):
    """Eval-mode value of the blended objective (no gradients, no mutation)."""
    emb = nn.embed_eval(net_new, combined_inputs)
    loss = 0.0
    k = exemplar_count
    if k and cfg.alpha > 0:
        teacher = nn.embed_eval(net_old_frozen, combined_inputs[:k])
        scale = 1.0 / k if cfg.reduction == "mean" else 1.0
        loss += cfg.alpha * scale * distillation_loss(emb[:k], teacher)
    if len(pair_batch) and cfg.alpha < 1:
        losses, _ = contrastive_terms(emb, pair_batch, cfg.margin)
        scale = 1.0 / len(pair_batch) if cfg.reduction == "mean" else 1.0
        loss += (1.0 - cfg.alpha) * scale * float(losses.sum())
    return loss
