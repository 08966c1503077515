"""Fully connected embedding network with batch norm, exact backprop and Adam.

Parameters are held in float64 so analytic gradients can be checked against
finite differences. Layer ``k`` owns the parameters ``"k.weight"`` (in x out),
``"k.bias"`` and, when batch-normalised, ``"k.gamma"``/``"k.beta"`` plus the
running-statistics buffers ``"k.running_mean"``/``"k.running_var"``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    BatchTooSmallError,
    DimensionError,
    InputError,
    NonFiniteGradientError,
    ProtocolError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Every network mutation draws a fresh stamp, so stamps are unique across
# instances and clones; prototype caches key on them.
_versions = itertools.count(1)

GradientSet = dict  # parameter name -> gradient array, same shape as the parameter


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    has_batchnorm: bool = True
    has_relu: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")


def mlp_specs(input_dim, dims):
    """Chain ``input_dim -> dims[0] -> ... -> dims[-1]``.

    Every layer but the last gets batch norm and ReLU; the last one is a plain
    linear projection into the embedding space.
    """
    sizes = [int(input_dim), *map(int, dims)]
    last = len(sizes) - 2
    return [
        LayerSpec(sizes[i], sizes[i + 1], has_batchnorm=i < last, has_relu=i < last)
        for i in range(len(sizes) - 1)
    ]


def _check_chain(specs):
    if not specs:
        raise DimensionError("network needs at least one layer")
    for k in range(len(specs) - 1):
        if specs[k].output_dim != specs[k + 1].input_dim:
            raise DimensionError(
                f"layers {k + 1}/{k + 2} do not chain: layer {k + 1} outputs "
                f"{specs[k].output_dim}, layer {k + 2} expects {specs[k + 1].input_dim}"
            )


class EmbeddingNetwork:
    """Stack of dense layers mapping feature vectors to embeddings."""

    def __init__(self, specs, params, buffers, *, eps=BN_EPS, momentum=BN_MOMENTUM):
        _check_chain(specs)
        self.specs = list(specs)
        self.params = params
        self.buffers = buffers
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.training = True
        # When set, train mode normalises with the running statistics and
        # leaves them untouched (batch norm acts as a fixed affine map).
        self.bn_frozen = False
        self._cache = None
        self.version = next(_versions)

    # -- bookkeeping -------------------------------------------------------
    @property
    def input_dim(self):
        return self.specs[0].input_dim

    @property
    def embedding_dim(self):
        return self.specs[-1].output_dim

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        self._cache = None
        return self

    def touch(self):
        """Mark the network as changed (invalidates prototype caches)."""
        self.version = next(_versions)

    def clone(self):
        other = EmbeddingNetwork(
            self.specs,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            eps=self.eps,
            momentum=self.momentum,
        )
        other.training = self.training
        other.bn_frozen = self.bn_frozen
        return other

    def param_names(self):
        return list(self.params)

    def state_equal(self, other):
        """Bit-exact equality of parameters and buffers."""
        if self.specs != other.specs:
            return False
        return all(
            np.array_equal(a[k], b[k])
            for a, b in ((self.params, other.params), (self.buffers, other.buffers))
            for k in a
        )

    # -- forward -----------------------------------------------------------
    def _forward(self, x, batch_stats, keep_cache):
        cache = [] if keep_cache else None
        stats = [] if batch_stats else None
        h = x
        for k, spec in enumerate(self.specs):
            z = h @ self.params[f"{k}.weight"] + self.params[f"{k}.bias"]
            entry = {"input": h}
            if spec.has_batchnorm:
                if batch_stats:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    stats.append((k, mu, var))
                else:
                    mu = self.buffers[f"{k}.running_mean"]
                    var = self.buffers[f"{k}.running_var"]
                inv_std = 1.0 / np.sqrt(var + self.eps)
                xhat = (z - mu) * inv_std
                y = self.params[f"{k}.gamma"] * xhat + self.params[f"{k}.beta"]
                entry.update(xhat=xhat, inv_std=inv_std, batch_stats=batch_stats)
            else:
                y = z
            if spec.has_relu:
                entry["mask"] = y > 0
                y = np.where(entry["mask"], y, 0.0)
            if cache is not None:
                cache.append(entry)
            h = y
        return h, cache, stats

    def _validate_batch(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected batch of shape (n, {self.input_dim}), got {batch.shape}"
            )
        if not np.all(np.isfinite(batch)):
            raise InputError("batch contains non-finite values")
        return batch


def new_network(specs, embedding_dim, seed, *, eps=BN_EPS, momentum=BN_MOMENTUM):
    """He-uniform weights, zero biases, unit/zero batch-norm affine and stats."""
    specs = list(specs)
    _check_chain(specs)
    if specs[-1].output_dim != embedding_dim:
        raise DimensionError(
            f"embedding_dim {embedding_dim} != final layer output {specs[-1].output_dim}"
        )
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for k, spec in enumerate(specs):
        limit = np.sqrt(6.0 / spec.input_dim)
        params[f"{k}.weight"] = rng.uniform(-limit, limit, size=(spec.input_dim, spec.output_dim))
        params[f"{k}.bias"] = np.zeros(spec.output_dim)
        if spec.has_batchnorm:
            params[f"{k}.gamma"] = np.ones(spec.output_dim)
            params[f"{k}.beta"] = np.zeros(spec.output_dim)
            buffers[f"{k}.running_mean"] = np.zeros(spec.output_dim)
            buffers[f"{k}.running_var"] = np.ones(spec.output_dim)
    return EmbeddingNetwork(specs, params, buffers, eps=eps, momentum=momentum)


def _needs_pair(net):
    return any(s.has_batchnorm for s in net.specs)


def embed_batch(net, batch, *, update_stats=True):
    """Embed an ``n x input_dim`` batch.

    In train mode batch statistics are used, activations are cached for
    :func:`gradients` and (unless ``update_stats`` is false) the running
    statistics move towards the batch statistics. Eval mode is pure.
    """
    batch = net._validate_batch(batch)
    if not net.training:
        out, _, _ = net._forward(batch, batch_stats=False, keep_cache=False)
        return out
    use_batch = not net.bn_frozen
    if use_batch and _needs_pair(net) and batch.shape[0] < 2:
        raise BatchTooSmallError("batch norm in train mode needs at least 2 samples")
    out, cache, stats = net._forward(batch, batch_stats=use_batch, keep_cache=True)
    net._cache = (batch, cache)
    if update_stats and stats:
        n = batch.shape[0]
        m = net.momentum
        for k, mu, var in stats:
            rm = net.buffers[f"{k}.running_mean"]
            rv = net.buffers[f"{k}.running_var"]
            rm *= 1.0 - m
            rm += m * mu
            rv *= 1.0 - m
            rv += m * var * n / (n - 1)
        net.touch()
    return out


def embed_with_batch_stats(net, batch):
    """Train-mode forward (batch statistics) without touching any state."""
    batch = net._validate_batch(batch)
    if _needs_pair(net) and batch.shape[0] < 2:
        raise BatchTooSmallError("batch norm with batch statistics needs at least 2 samples")
    out, _, _ = net._forward(batch, batch_stats=True, keep_cache=False)
    return out


def embed_eval(net, batch):
    """Running-statistics forward regardless of the network's mode; pure."""
    batch = net._validate_batch(batch)
    out, _, _ = net._forward(batch, batch_stats=False, keep_cache=False)
    return out


def gradients(net, batch, upstream):
    """Gradients of ``sum(upstream * embed_batch(net, batch))`` for all parameters."""
    if net._cache is None:
        raise ProtocolError("no cached train-mode forward pass; call embed_batch first")
    cached_batch, cache = net._cache
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape != cached_batch.shape or not np.array_equal(batch, cached_batch):
        raise ProtocolError("batch differs from the one used in the cached forward pass")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (batch.shape[0], net.embedding_dim):
        raise DimensionError(
            f"upstream shape {upstream.shape} != {(batch.shape[0], net.embedding_dim)}"
        )
    grads = {}
    delta = upstream
    n = batch.shape[0]
    for k in range(len(net.specs) - 1, -1, -1):
        spec, entry = net.specs[k], cache[k]
        if spec.has_relu:
            delta = np.where(entry["mask"], delta, 0.0)
        if spec.has_batchnorm:
            xhat = entry["xhat"]
            grads[f"{k}.gamma"] = (delta * xhat).sum(axis=0)
            grads[f"{k}.beta"] = delta.sum(axis=0)
            dxhat = delta * net.params[f"{k}.gamma"]
            if entry["batch_stats"]:
                delta = (entry["inv_std"] / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                delta = dxhat * entry["inv_std"]
        grads[f"{k}.weight"] = entry["input"].T @ delta
        grads[f"{k}.bias"] = delta.sum(axis=0)
        if k:
            delta = delta @ net.params[f"{k}.weight"].T
    return {name: grads[name] for name in net.params}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net, **kw):
        return cls(
            m={k: np.zeros_like(p) for k, p in net.params.items()},
            v={k: np.zeros_like(p) for k, p in net.params.items()},
            **kw,
        )


def adam_step(net, grads, state, lr):
    """Bias-corrected Adam update applied to ``net.params`` in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(net.params) or set(state.m) != set(net.params):
        raise DimensionError("gradient/state keys do not match network parameters")
    for name, p in net.params.items():
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"shape mismatch for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; update rejected")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in net.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    net.touch()


def zero_gradients(net):
    return {k: np.zeros_like(p) for k, p in net.params.items()}


def add_gradients(total, part, scale=1.0):
    for k, g in part.items():
        total[k] += scale * g
    return total
