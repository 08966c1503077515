import time

import numpy as np
import pytest

from edgecil import harness, memory, nn

SEEDS = (0, 1, 2, 3, 4)


def numeric_grads(net, loss_fn, h=1e-5, entries=None, rng=None):
    """Central differences of ``loss_fn()`` w.r.t. ``net.params``.

    With ``entries`` set, only that many randomly chosen entries per tensor are
    probed; the returned dict maps name -> (flat indices, numeric values).
    """
    out = {}
    for name, p in net.params.items():
        flat = p.reshape(-1)
        if entries is None or entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=entries, replace=False)
        vals = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            vals[j] = (up - down) / (2 * h)
        out[name] = (idx, vals)
    return out


def max_relative_error(analytic, numeric, floor=1e-5):
    """Largest |a - n| / max(|a|, |n|, floor) over all probed entries.

    The floor keeps finite-difference roundoff (~1e-10) on gradients that are
    exactly zero, such as biases feeding batch norm, from dominating.
    """
    worst = 0.0
    for name, (idx, vals) in numeric.items():
        a = analytic[name].reshape(-1)[idx]
        rel = np.abs(a - vals) / np.maximum(np.maximum(np.abs(a), np.abs(vals)), floor)
        worst = max(worst, float(rel.max()) if len(rel) else 0.0)
    return worst


def random_net(rng, dims, batchnorm=True, seed=0):
    specs = nn.mlp_specs(dims[0], dims[1:])
    if not batchnorm:
        specs = [nn.LayerSpec(s.input_dim, s.output_dim, False, s.has_relu) for s in specs]
    net = nn.new_network(specs, dims[-1], seed)
    # move batch-norm affine parameters off their trivial init
    for name, p in net.params.items():
        if name.endswith(("gamma", "beta", "bias")):
            p += rng.normal(0, 0.3, p.shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_runs():
    """Desk scenario: hold out class 4, 30 new samples, 5 seeds, K=200 and K=10.

    Returns ``({K: [ {strategy: SessionReport} per seed ]}, seconds)``.
    """
    scenario = harness.Scenario()
    X, y = harness.load_dataset(scenario)
    t0 = time.perf_counter()
    out = {200: [], 10: []}
    for seed in SEEDS:
        prep = harness.prepare(scenario, X, y, 4, seed)
        for K in out:
            support = memory.build_support(prep.net, prep.X_old, prep.y_old, K, "herding", seed)
            out[K].append(harness.run_strategies(prep, support, 30, harness.STRATEGIES, seed))
    return out, time.perf_counter() - t0
