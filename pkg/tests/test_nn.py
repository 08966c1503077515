import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from edgecil import nn
from edgecil.errors import (
    BatchTooSmallError,
    DimensionError,
    InputError,
    NonFiniteGradientError,
    ProtocolError,
)

from conftest import max_relative_error, numeric_grads, random_net


def test_default_network_shape():
    specs = nn.mlp_specs(80, nn_dims := (1024, 512, 128, 64, 128))
    net = nn.new_network(specs, 128, seed=0)
    assert [(s.input_dim, s.output_dim) for s in net.specs] == [
        (80, 1024), (1024, 512), (512, 128), (128, 64), (64, 128)
    ]
    assert [s.has_batchnorm for s in net.specs] == [True] * 4 + [False]
    assert [s.has_relu for s in net.specs] == [True] * 4 + [False]
    assert net.embedding_dim == nn_dims[-1]
    assert net.training


def test_initialisation_is_deterministic():
    specs = [nn.LayerSpec(4, 2, False, False)]
    a = nn.new_network(specs, 2, seed=7)
    b = nn.new_network(specs, 2, seed=7)
    assert a.state_equal(b)
    assert a.params["0.weight"].tobytes() == b.params["0.weight"].tobytes()
    c = nn.new_network(specs, 2, seed=8)
    assert not a.state_equal(c)


def test_initial_values():
    net = nn.new_network(nn.mlp_specs(10, (6, 3)), 3, seed=1)
    limit = np.sqrt(6 / 10)
    assert np.all(np.abs(net.params["0.weight"]) <= limit)
    assert np.all(net.params["0.bias"] == 0)
    assert np.all(net.params["0.gamma"] == 1) and np.all(net.params["0.beta"] == 0)
    assert np.all(net.buffers["0.running_mean"] == 0) and np.all(net.buffers["0.running_var"] == 1)


def test_dimension_mismatch_names_layers():
    specs = [nn.LayerSpec(80, 64), nn.LayerSpec(32, 16, False, False)]
    with pytest.raises(DimensionError, match="layers 1/2"):
        nn.new_network(specs, 16, seed=0)


def test_embedding_dim_must_match():
    with pytest.raises(DimensionError):
        nn.new_network([nn.LayerSpec(4, 2, False, False)], 3, seed=0)


def test_identity_network():
    net = nn.new_network([nn.LayerSpec(3, 3, False, False)], 3, seed=0)
    net.params["0.weight"][:] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]])
    np.testing.assert_array_equal(nn.embed_batch(net, x), x)


def test_hand_computed_two_layer_forward():
    specs = [nn.LayerSpec(2, 2, False, True), nn.LayerSpec(2, 1, False, False)]
    net = nn.new_network(specs, 1, seed=0)
    net.params["0.weight"][:] = [[1.0, -1.0], [2.0, 0.5]]
    net.params["0.bias"][:] = [0.5, -3.0]
    net.params["1.weight"][:] = [[2.0], [-1.0]]
    net.params["1.bias"][:] = [0.25]
    x = np.array([[1.0, 2.0]])
    # hidden = relu([1 + 4 + 0.5, -1 + 1 - 3]) = [5.5, 0]; out = 2*5.5 - 0 + 0.25
    assert nn.embed_batch(net, x)[0, 0] == pytest.approx(11.25)


def test_eval_mode_is_pure(rng):
    net = random_net(rng, [5, 7, 3])
    nn.embed_batch(net, rng.normal(size=(6, 5)))  # move running stats
    net.eval()
    x = rng.normal(size=(4, 5))
    before = {k: v.copy() for k, v in net.buffers.items()}
    version = net.version
    a = nn.embed_batch(net, x)
    b = nn.embed_batch(net, x)
    np.testing.assert_array_equal(a, b)
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    assert net.version == version


def test_train_mode_updates_running_stats(rng):
    net = random_net(rng, [4, 6, 2])
    x = rng.normal(2.0, 3.0, size=(10, 4))
    nn.embed_batch(net, x)
    z = x @ net.params["0.weight"] + net.params["0.bias"]
    np.testing.assert_allclose(net.buffers["0.running_mean"], 0.1 * z.mean(0))
    np.testing.assert_allclose(net.buffers["0.running_var"], 0.9 + 0.1 * z.var(0, ddof=1))


def test_batchnorm_normalises_batch(rng):
    specs = [nn.LayerSpec(6, 5, True, False), nn.LayerSpec(5, 2, False, False)]
    net = nn.new_network(specs, 2, seed=3)
    x = rng.normal(4.0, 2.0, size=(32, 6))
    out, cache, _ = net._forward(x, batch_stats=True, keep_cache=True)
    h = cache[1]["input"]  # batch-norm output feeding the last layer
    np.testing.assert_allclose(h.mean(0), net.params["0.beta"], atol=1e-12)
    np.testing.assert_allclose(h.var(0), 1.0, atol=1e-3)


def test_last_layer_can_be_negative(rng):
    net = nn.new_network(nn.mlp_specs(4, (8, 3)), 3, seed=0)
    out = nn.embed_batch(net, rng.normal(size=(16, 4)))
    assert (out < 0).any()


def test_batch_too_small_in_train_mode(rng):
    net = nn.new_network(nn.mlp_specs(4, (8, 3)), 3, seed=0)
    with pytest.raises(BatchTooSmallError):
        nn.embed_batch(net, rng.normal(size=(1, 4)))
    net.eval()
    assert nn.embed_batch(net, rng.normal(size=(1, 4))).shape == (1, 3)


def test_non_finite_input_rejected():
    net = nn.new_network(nn.mlp_specs(2, (3,)), 3, seed=0)
    with pytest.raises(InputError):
        nn.embed_batch(net, np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_wrong_input_width():
    net = nn.new_network(nn.mlp_specs(2, (3,)), 3, seed=0)
    with pytest.raises(DimensionError):
        nn.embed_batch(net, np.ones((2, 5)))


def test_gradients_require_forward(rng):
    net = random_net(rng, [3, 4, 2])
    x = rng.normal(size=(5, 3))
    with pytest.raises(ProtocolError):
        nn.gradients(net, x, np.ones((5, 2)))
    nn.embed_batch(net, x)
    with pytest.raises(ProtocolError):
        nn.gradients(net, x + 1.0, np.ones((5, 2)))


def test_zero_upstream_gives_zero_gradients(rng):
    net = random_net(rng, [3, 4, 2])
    x = rng.normal(size=(5, 3))
    nn.embed_batch(net, x)
    grads = nn.gradients(net, x, np.zeros((5, 2)))
    assert set(grads) == set(net.params)
    assert all(not g.any() for g in grads.values())


def test_single_linear_layer_closed_form(rng):
    net = nn.new_network([nn.LayerSpec(4, 3, False, False)], 3, seed=0)
    x = rng.normal(size=(1, 4))
    u = rng.normal(size=(1, 3))
    nn.embed_batch(net, x)
    grads = nn.gradients(net, x, u)
    # weights are stored input x output, so the gradient is x^T u
    np.testing.assert_allclose(grads["0.weight"], x.T @ u)
    np.testing.assert_allclose(grads["0.bias"], u[0])


def _fd_check(net, x, u, entries=None, rng=None, floor=1e-5):
    def loss():
        return float(np.sum(u * nn.embed_batch(net, x)))

    nn.embed_batch(net, x)
    analytic = nn.gradients(net, x, u)
    numeric = numeric_grads(net, loss, h=1e-5, entries=entries, rng=rng)
    return max_relative_error(analytic, numeric, floor)


def test_gradients_match_finite_differences_small(rng):
    net = random_net(rng, [5, 7, 6, 3])
    x = rng.normal(size=(8, 5))
    u = rng.normal(size=(8, 3))
    assert _fd_check(net, x, u) < 1e-4


def test_gradients_match_finite_differences_default_net(rng):
    net = nn.new_network(nn.mlp_specs(80, (1024, 512, 128, 64, 128)), 128, seed=5)
    for name, p in net.params.items():
        if name.endswith(("gamma", "beta")):
            p += rng.normal(0, 0.2, p.shape)
    x = rng.normal(size=(8, 80))
    u = rng.normal(size=(8, 128))
    # biases feeding batch norm have exactly zero gradient; finite differences
    # on this larger loss leave ~2e-9 of roundoff there, hence the wider floor
    assert _fd_check(net, x, u, entries=12, rng=rng, floor=1e-4) < 1e-4


def test_frozen_batchnorm_gradients(rng):
    net = random_net(rng, [4, 6, 5, 2])
    nn.embed_batch(net, rng.normal(size=(16, 4)))
    net.bn_frozen = True
    x = rng.normal(size=(3, 4))
    u = rng.normal(size=(3, 2))
    before = {k: v.copy() for k, v in net.buffers.items()}
    assert _fd_check(net, x, u) < 1e-4
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    np.testing.assert_array_equal(nn.embed_batch(net, x), nn.embed_eval(net, x))


@settings(max_examples=15, deadline=None)
@given(
    dims=st.lists(st.integers(1, 16), min_size=2, max_size=4),
    n=st.integers(2, 8),
    bn=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_gradient_property_random_small_nets(dims, n, bn, seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, dims, batchnorm=bn, seed=seed)
    x = rng.normal(size=(n, dims[0]))
    u = rng.normal(size=(n, dims[-1]))
    # near-zero batch variance makes batch norm so curved that central
    # differences at h=1e-5 stop being a trustworthy oracle
    _, cache, _ = net._forward(x, batch_stats=True, keep_cache=True)
    for entry in cache:
        if entry.get("inv_std") is not None:
            assume(np.min(1.0 / entry["inv_std"] ** 2 - net.eps) > 0.05)
    assert _fd_check(net, x, u) < 1e-4


def _single_param_net(w):
    net = nn.new_network([nn.LayerSpec(1, 1, False, False)], 1, seed=0)
    net.params["0.weight"][:] = w
    return net


def test_adam_first_step_moves_by_lr():
    net = _single_param_net(0.0)
    state = nn.AdamState.for_network(net)
    grads = {"0.weight": np.array([[1.0]]), "0.bias": np.array([0.0])}
    nn.adam_step(net, grads, state, lr=0.1)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert net.params["0.weight"][0, 0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_two_steps_hand_recurrence():
    net = _single_param_net(0.0)
    state = nn.AdamState.for_network(net)
    w, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate([1.0, -0.5], start=1):
        nn.adam_step(net, {"0.weight": np.array([[g]]), "0.bias": np.zeros(1)}, state, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert net.params["0.weight"][0, 0] == pytest.approx(w, abs=1e-15)


def test_adam_zero_gradients_leave_parameters(rng):
    net = random_net(rng, [3, 4, 2])
    before = {k: v.copy() for k, v in net.params.items()}
    state = nn.AdamState.for_network(net)
    nn.adam_step(net, nn.zero_gradients(net), state, lr=0.01)
    assert all(np.array_equal(before[k], net.params[k]) for k in before)
    assert state.step == 1


def test_adam_rejects_non_finite_gradients(rng):
    net = random_net(rng, [3, 4, 2])
    before = {k: v.copy() for k, v in net.params.items()}
    state = nn.AdamState.for_network(net)
    grads = nn.zero_gradients(net)
    grads["0.weight"][0, 0] = np.inf
    with pytest.raises(NonFiniteGradientError):
        nn.adam_step(net, grads, state, lr=0.01)
    assert state.step == 0
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


def test_adam_deterministic(rng):
    a = random_net(rng, [3, 4, 2], seed=3)
    b = a.clone()
    grads = {k: rng.normal(size=p.shape) for k, p in a.params.items()}
    sa, sb = nn.AdamState.for_network(a), nn.AdamState.for_network(b)
    nn.adam_step(a, grads, sa, 0.01)
    nn.adam_step(b, grads, sb, 0.01)
    assert a.state_equal(b)


def test_clone_is_independent(rng):
    a = random_net(rng, [3, 4, 2])
    b = a.clone()
    b.params["0.weight"] += 1.0
    assert not a.state_equal(b)
    assert a.version != b.version
