"""Exemplar memory: herding selection, class prototypes and NCM classification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import SupportError


@dataclass
class ExemplarSet:
    """Exemplars of one class, stored as raw feature vectors in selection order.

    ``indices`` point back into the sample array the exemplars were drawn
    from (``-1`` when unknown, e.g. after loading from a bundle).
    """

    label: object
    samples: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        self.indices = np.asarray(self.indices, dtype=np.int64)
        known = self.indices[self.indices >= 0]
        if len(np.unique(known)) != len(known):
            raise SupportError(f"duplicate sample indices in exemplar set {self.label!r}")

    def __len__(self):
        return len(self.samples)

    def truncated(self, k):
        return ExemplarSet(self.label, self.samples[:k].copy(), self.indices[:k].copy())


@dataclass
class Prediction:
    label: object
    distances: dict  # label -> squared Euclidean distance to the prototype


@dataclass
class SupportSet:
    exemplars: dict = field(default_factory=dict)  # label -> ExemplarSet
    _prototypes: dict = field(default_factory=dict, repr=False)
    _stamp: int | None = field(default=None, repr=False)

    @property
    def labels(self):
        return sorted(self.exemplars)

    def __len__(self):
        return len(self.exemplars)

    def total_exemplars(self):
        return sum(len(s) for s in self.exemplars.values())

    def copy(self):
        return SupportSet({y: s.truncated(len(s)) for y, s in self.exemplars.items()})

    def invalidate(self):
        self._prototypes = {}
        self._stamp = None

    def cache_valid_for(self, net):
        return self._stamp == net.version and set(self._prototypes) == set(self.exemplars)

    def prototypes(self, net):
        """Prototype per label, recomputed whenever ``net`` has changed."""
        if not self.cache_valid_for(net):
            self._prototypes = {y: class_prototype(net, s) for y, s in self.exemplars.items()}
            self._stamp = net.version
        return self._prototypes

    def stacked(self):
        """All exemplars as ``(X, y)`` in label order, selection order within a label."""
        if not self.exemplars:
            return np.zeros((0, 0)), np.zeros(0)
        xs, ys = [], []
        for y in self.labels:
            s = self.exemplars[y]
            xs.append(s.samples)
            ys.extend([y] * len(s))
        return np.vstack(xs), np.asarray(ys)


def per_class_budget(total, num_classes):
    """Exemplars per class for a total memory of ``total`` samples."""
    if num_classes < 1:
        raise SupportError("need at least one class")
    if total < num_classes:
        raise SupportError(f"budget {total} < {num_classes} classes leaves zero exemplars per class")
    return total // num_classes


def class_prototype(net, exemplars):
    """Mean eval-mode embedding of an exemplar set."""
    samples = exemplars.samples if isinstance(exemplars, ExemplarSet) else np.asarray(exemplars)
    if len(samples) == 0:
        raise SupportError("cannot compute the prototype of an empty exemplar set")
    return nn.embed_eval(net, samples).mean(axis=0)


def herding_order(embeddings, m_budget):
    """Greedy herding on precomputed embeddings; returns selected row indices.

    At step ``k`` the unchosen row minimising
    ``|| mean - (chosen_sum + e) / k ||`` is taken; ties go to the lowest index.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n = len(emb)
    if m_budget > n:
        raise SupportError(f"budget {m_budget} exceeds the {n} available samples")
    target = emb.mean(axis=0)
    running = np.zeros_like(target)
    taken = np.zeros(n, dtype=bool)
    order = []
    for k in range(1, m_budget + 1):
        gap = target - (running + emb) / k
        dist = np.sqrt(np.sum(gap * gap, axis=1))
        dist[taken] = np.inf
        i = int(np.argmin(dist))
        order.append(i)
        taken[i] = True
        running += emb[i]
    return np.asarray(order, dtype=np.int64)


def select_exemplars_herding(net, samples, m_budget, label=None):
    samples = np.asarray(samples, dtype=np.float64)
    if m_budget < 1:
        raise SupportError("budget must be positive")
    if m_budget > len(samples):
        raise SupportError(f"budget {m_budget} exceeds the {len(samples)} available samples")
    order = herding_order(nn.embed_eval(net, samples), m_budget)
    return ExemplarSet(label, samples[order], order)


def select_exemplars_random(samples, m_budget, seed, label=None):
    samples = np.asarray(samples, dtype=np.float64)
    if m_budget > len(samples):
        raise SupportError(f"budget {m_budget} exceeds the {len(samples)} available samples")
    order = np.random.default_rng(seed).permutation(len(samples))[:m_budget]
    return ExemplarSet(label, samples[order], order)


def build_support(net, X, y, m_budget, selection="herding", seed=0):
    """One exemplar set per label in ``y``; budgets larger than a class are clamped."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    support = SupportSet()
    for i, label in enumerate(sorted(set(y.tolist()))):
        rows = np.flatnonzero(y == label)
        budget = min(m_budget, len(rows))
        if selection == "herding":
            ex = select_exemplars_herding(net, X[rows], budget, label)
        elif selection == "random":
            ex = select_exemplars_random(X[rows], budget, seed + i, label)
        else:
            raise SupportError(f"unknown selection mode {selection!r}")
        ex.indices = rows[ex.indices]
        support.exemplars[label] = ex
    return support


def ncm_distances(net, X, support):
    """Squared distances of every row of ``X`` to every prototype (label order)."""
    if not support.exemplars:
        raise SupportError("support set is empty")
    protos = support.prototypes(net)
    labels = support.labels
    P = np.vstack([protos[y] for y in labels])
    E = nn.embed_eval(net, np.atleast_2d(X))
    diff = E[:, None, :] - P[None, :, :]
    return labels, np.einsum("ijk,ijk->ij", diff, diff)


def ncm_predict(net, X, support):
    """Vectorised NCM labels; ties resolve to the smallest label."""
    labels, d = ncm_distances(net, X, support)
    return np.asarray(labels)[np.argmin(d, axis=1)]


def ncm_classify(net, x, support):
    labels, d = ncm_distances(net, np.asarray(x, dtype=np.float64).reshape(1, -1), support)
    row = d[0]
    return Prediction(labels[int(np.argmin(row))], dict(zip(labels, row.tolist())))


def add_new_class(
    support,
    net,
    new_samples,
    label,
    m_budget_new,
    *,
    rebalance=False,
    total_budget=None,
    selection="herding",
    seed=0,
):
    """Return a new support set with ``label`` added.

    New-class exemplars are chosen by herding (or seeded random choice); all
    samples are kept when there are fewer than ``m_budget_new``. With
    ``rebalance`` every old set is cut to ``per_class_budget(total_budget,
    classes)`` by keeping its selection-order prefix.
    """
    if label in support.exemplars:
        raise SupportError(f"label {label!r} is already in the support set")
    new_samples = np.asarray(new_samples, dtype=np.float64)
    if len(new_samples) == 0:
        raise SupportError("no samples for the new class")
    budget = min(m_budget_new, len(new_samples))
    if selection == "herding":
        ex = select_exemplars_herding(net, new_samples, budget, label)
    elif selection == "random":
        ex = select_exemplars_random(new_samples, budget, seed, label)
    else:
        raise SupportError(f"unknown selection mode {selection!r}")
    out = support.copy()
    if rebalance:
        if total_budget is None:
            raise SupportError("rebalance requires total_budget")
        per = per_class_budget(total_budget, len(support) + 1)
        out.exemplars = {y: s.truncated(per) for y, s in out.exemplars.items()}
        ex = ex.truncated(per)
    out.exemplars[label] = ex
    out.invalidate()
    return out
