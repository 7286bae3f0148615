import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from formlab import nets
from formlab.common import StructuralError

from oracles import central_diff, rel_err, straight_line_mlp


def make_net(sizes, acts, seed=0, ln=None):
    return nets.init_dense(sizes, acts, np.random.default_rng(seed), layer_norm_flags=ln)


def test_forward_identity_case():
    net = nets.DenseNet(
        [np.eye(3)], [np.zeros(3)], ["identity"], [False]
    )
    v = np.array([0.3, -1.2, 8.0])
    out, _ = nets.forward(net, v)
    assert np.array_equal(out, v)


def test_forward_zero_weights_tanh():
    net = nets.DenseNet([np.zeros((4, 2))], [np.zeros(4)], ["tanh"], [False])
    out, _ = nets.forward(net, np.array([1.0, 2.0]))
    assert np.array_equal(out, np.zeros(4))


def test_forward_matches_straight_line_reeval():
    rng = np.random.default_rng(7)
    net = make_net([5, 8, 8, 3], ["tanh", "elu", "identity"], seed=7)
    x = rng.normal(size=5)
    out, _ = nets.forward(net, x)
    ref = straight_line_mlp(net.weights, net.biases, net.activations, x)
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-12


def test_forward_is_pure():
    net = make_net([4, 6, 2], ["tanh", "identity"], seed=3)
    x = np.random.default_rng(1).normal(size=4)
    a, _ = nets.forward(net, x)
    b, _ = nets.forward(net, x)
    assert np.array_equal(a, b)


def test_forward_dim_mismatch():
    net = make_net([4, 2], ["tanh"], seed=0)
    with pytest.raises(StructuralError):
        nets.forward(net, np.zeros(5))


def test_backward_scalar_tanh_at_zero():
    # f(x) = tanh(w x), w = 0, x = 1: df/dw = tanh'(0) * x = 1
    net = nets.DenseNet([np.zeros((1, 1))], [np.zeros(1)], ["tanh"], [False])
    out, cache = nets.forward(net, np.array([1.0]))
    grads, _ = nets.backward(net, cache, np.array([1.0]))
    assert grads[0][0, 0] == pytest.approx(1.0, abs=1e-15)


def test_backward_zero_output_grad():
    net = make_net([3, 5, 2], ["elu", "tanh"], seed=2)
    x = np.random.default_rng(0).normal(size=3)
    _, cache = nets.forward(net, x)
    grads, gin = nets.backward(net, cache, np.zeros(2))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(gin == 0.0)


@pytest.mark.parametrize("ln", [None, [True, False, False]])
def test_backward_matches_finite_differences(ln):
    rng = np.random.default_rng(11)
    net = make_net([4, 7, 6, 3], ["tanh", "elu", "identity"], seed=11, ln=ln)
    x = rng.normal(size=(5, 4))
    w_out = rng.normal(size=(5, 3))  # random linear functional of the output

    def loss(params):
        trial = net.with_params(params)
        out, _ = nets.forward(trial, x)
        return float((w_out * out).sum())

    out, cache = nets.forward(net, x)
    grads, _ = nets.backward(net, cache, w_out)
    fd = central_diff(loss, net.params(), eps=1e-5)
    for g, f in zip(grads, fd):
        err = np.abs(g - f) / np.maximum(np.maximum(np.abs(g), np.abs(f)), 1e-6)
        assert err.max() < 1e-4


def test_backward_input_grad_matches_fd():
    rng = np.random.default_rng(5)
    net = make_net([3, 6, 2], ["elu", "tanh"], seed=5, ln=[True, False])
    x = rng.normal(size=3)
    w_out = rng.normal(size=2)
    _, cache = nets.forward(net, x)
    _, gin = nets.backward(net, cache, w_out)
    for d in range(3):
        e = np.zeros(3)
        e[d] = 1e-6
        hi, _ = nets.forward(net, x + e)
        lo, _ = nets.forward(net, x - e)
        fd = float(w_out @ (hi - lo)) / 2e-6
        assert rel_err(gin[d], fd) < 1e-4


def test_backward_stale_cache_rejected():
    net = make_net([3, 4, 2], ["tanh", "identity"], seed=1)
    other = make_net([3, 4], ["tanh"], seed=1)
    _, cache = nets.forward(other, np.zeros(3))
    with pytest.raises(StructuralError):
        nets.backward(net, cache, np.zeros(2))


def test_layer_norm_constant_vector_maps_to_zero():
    assert np.allclose(nets.layer_norm(np.ones(4)), np.zeros(4))


def test_layer_norm_already_normalized():
    x = np.array([1.0, -1.0])
    out = nets.layer_norm(x)
    assert np.allclose(out, x, atol=1e-2)  # eps floor shrinks slightly


def test_layer_norm_statistics():
    x = np.random.default_rng(0).normal(2.0, 3.0, size=64)
    y = nets.layer_norm(x)
    assert abs(y.mean()) < 1e-10
    assert abs(y.var() - 1.0) < 1e-4


def test_adam_zero_grads_is_identity():
    net = make_net([3, 4], ["tanh"], seed=0)
    params = net.params()
    state = nets.init_adam(params, lr=0.1)
    new_params, state2 = nets.adam_step(state, params, [np.zeros_like(p) for p in params])
    for p, q in zip(params, new_params):
        assert np.array_equal(p, q)
    assert state2.step == 1


def test_adam_descends_quadratic():
    w = [np.array([1.0])]
    state = nets.init_adam(w, lr=0.1)
    new_w, _ = nets.adam_step(state, w, [2.0 * w[0]])
    assert new_w[0][0] < 1.0


def test_adam_converges_on_convex_quadratic():
    rng = np.random.default_rng(0)
    w = [rng.normal(size=8)]
    state = nets.init_adam(w, lr=0.05)
    for _ in range(2000):
        grads = [2.0 * w[0]]
        w, state = nets.adam_step(state, w, grads)
    assert float(w[0] @ w[0]) < 1e-6


def test_adam_rejects_nonfinite_grads():
    w = [np.array([1.0])]
    state = nets.init_adam(w, lr=0.1)
    with pytest.raises(FloatingPointError):
        nets.adam_step(state, w, [np.array([np.nan])])


def test_adam_l2_pulls_toward_zero():
    w = [np.array([1.0])]
    state = nets.init_adam(w, lr=0.01, l2_weight=0.1)
    for _ in range(3000):
        w, state = nets.adam_step(state, w, [np.zeros(1)])
    assert abs(w[0][0]) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=32), st.integers(min_value=0, max_value=10**6))
def test_layer_norm_property(dim, seed):
    x = np.random.default_rng(seed).normal(size=dim) * 10.0
    y = nets.layer_norm(x)
    assert abs(y.mean()) < 1e-9
    assert y.var() <= 1.0 + 1e-9


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    net_a = make_net([4, 8, 2], ["tanh", "identity"], seed=9, ln=[True, False])
    net_b = make_net([3, 5], ["elu"], seed=10)
    arrays = {"mu": rng.normal(size=6), "var": rng.uniform(0.5, 2.0, size=6)}
    path = tmp_path / "model.ckpt"
    nets.save_checkpoint(path, {"a": net_a, "b": net_b}, arrays, meta={"note": "x"})
    loaded, arrs, meta = nets.load_checkpoint(path)
    for name, orig in (("a", net_a), ("b", net_b)):
        got = loaded[name]
        assert got.activations == orig.activations
        assert got.layer_norm_flags == orig.layer_norm_flags
        for p, q in zip(orig.params(), got.params()):
            assert np.array_equal(p, q)
    assert np.array_equal(arrs["mu"], arrays["mu"])
    assert meta == {"note": "x"}
    # byte-stable: saving the loaded state reproduces the file exactly
    path2 = tmp_path / "model2.ckpt"
    nets.save_checkpoint(path2, loaded, arrs, meta=meta)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_header_line(tmp_path):
    net = make_net([2, 2], ["identity"], seed=0)
    path = tmp_path / "m.ckpt"
    nets.save_checkpoint(path, {"net": net})
    with open(path, "rb") as f:
        assert f.readline() == b"FORMNET v1\n"
