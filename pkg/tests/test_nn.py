import numpy as np
import pytest
from hypothesis import given, strategies as st
from oracles import direct_conv2d, direct_maxpool

from latentcnn.errors import ConfigError, NumericError, UsageError, VersionError
from latentcnn.nn import (Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool, Network, ReLU, Softmax,
                          gradcheck, kink_margin, load_network, network_from_bytes,
                          network_to_bytes, save_network, sgd_param_update, softmax_cross_entropy,
                          squared_error)


def small_cnn(seed=0):
    return Network((6, 6, 1), [Conv2D(3, 3, 1, 2), ReLU(), MaxPool(2, 2), Dense(8, 3)], seed=seed)


# ---------------------------------------------------------------- forward


def test_identity_dense():
    net = Network((1,), [Dense(1, 1)], params=[{"W": np.ones((1, 1)), "b": np.zeros(1)}])
    x = np.array([[0.37]])
    out, _ = net.forward(x)
    assert np.array_equal(out, x)


def test_zero_input_conv_zero_output():
    net = Network((5, 5, 2), [Conv2D(3, 3, 2, 4, padding=1)], seed=3)
    out, _ = net.forward(np.zeros((2, 5, 5, 2)))
    assert out.shape == (2, 5, 5, 4)
    assert not out.any()


def test_conv_relu_pool_matches_direct_evaluation():
    rng = np.random.default_rng(11)
    net = Network((8, 8, 1), [Conv2D(3, 3, 1, 2), ReLU(), MaxPool(2, 2)], seed=5)
    net.params[0]["b"] = rng.normal(size=2)
    x = rng.normal(size=(2, 8, 8, 1))
    out, _ = net.forward(x)
    conv = direct_conv2d(x, net.params[0]["W"], net.params[0]["b"])
    expected = direct_maxpool(np.maximum(conv, 0), 2, 2)
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0), (1, 2)])
def test_conv_stride_padding_matches_direct(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    layer = Conv2D(3, 2, 2, 3, stride=stride, padding=padding)
    net = Network((7, 6, 2), [layer], seed=1)
    net.params[0]["b"] = rng.normal(size=3)
    x = rng.normal(size=(1, 7, 6, 2))
    out, _ = net.forward(x)
    np.testing.assert_allclose(out, direct_conv2d(x, net.params[0]["W"], net.params[0]["b"], stride, padding),
                               atol=1e-12)


def test_shape_mismatch_names_layer():
    with pytest.raises(ConfigError, match="layer 1"):
        Network((6, 6, 1), [Conv2D(3, 3, 1, 2), Dense(10, 2)])
    net = small_cnn()
    with pytest.raises(ConfigError, match="layer 0"):
        net.forward(np.zeros((1, 5, 5, 1)))


def test_dropout_modes():
    net = Network((10,), [Dropout(0.5)], seed=0)
    x = np.ones((4, 10))
    out, trace = net.forward(x, "eval")
    assert np.array_equal(out, x)
    assert trace.dropout_masks == {0: None}
    out, trace = net.forward(x, "train", rng=np.random.default_rng(0))
    mask = trace.dropout_masks[0]
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert np.array_equal(out, x * mask)


def test_dropout_rate_validated():
    with pytest.raises(ConfigError):
        Dropout(1.0)


def test_forward_deterministic_and_trace_replays():
    net = Network((6,), [Dense(6, 5), ReLU(), Dropout(0.3), Dense(5, 2)], seed=2)
    x = np.random.default_rng(0).normal(size=(3, 6))
    a, ta = net.forward(x, "train", rng=np.random.default_rng(9))
    b, _ = net.forward(x, "train", rng=np.random.default_rng(9))
    assert np.array_equal(a, b)
    # replaying the recorded masks and inputs reproduces the output
    y = ta.inputs[0]
    for k, layer in enumerate(net.layers):
        y = layer.forward(y, net.params[k], False, None)[0] if layer.kind != "dropout" else y * ta.caches[k]
    assert np.array_equal(y, ta.output)


def test_pool_ties_go_to_lowest_index():
    net = Network((2, 2, 1), [MaxPool(2, 2)])
    _, trace = net.forward(np.ones((1, 2, 2, 1)), "train")
    assert trace.pool_argmax[0].ravel().tolist() == [0]
    grads, dx = net.backward(trace, np.ones((1, 1, 1, 1)))
    assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


# ---------------------------------------------------------------- backward


def test_backward_rejects_eval_trace():
    net = small_cnn()
    _, trace = net.forward(np.zeros((1, 6, 6, 1)), "eval")
    with pytest.raises(UsageError):
        net.backward(trace, np.zeros((1, 3)))


def test_zero_output_grad_gives_zero_gradients():
    net = small_cnn()
    x = np.random.default_rng(1).normal(size=(2, 6, 6, 1))
    out, trace = net.forward(x, "train")
    grads, dx = net.backward(trace, np.zeros_like(out))
    assert not dx.any()
    assert all(not a.any() for g in grads for a in g.values())


def test_dense_weight_grad_is_input():
    net = Network((4,), [Dense(4, 1)], seed=0)
    x = np.arange(4.0)[None]
    _, trace = net.forward(x, "train")
    grads, _ = net.backward(trace, np.ones((1, 1)))
    assert np.array_equal(grads[0]["W"][:, 0], x[0])


def test_backward_shapes():
    net = small_cnn()
    x = np.random.default_rng(2).normal(size=(3, 6, 6, 1))
    out, trace = net.forward(x, "train")
    grads, dx = net.backward(trace, np.ones_like(out))
    assert dx.shape == x.shape
    for g, p in zip(grads, net.params):
        assert {n: a.shape for n, a in g.items()} == {n: a.shape for n, a in p.items()}


@given(st.integers(0, 2**31 - 1))
def test_maxpool_routes_gradient_to_argmax(seed):
    rng = np.random.default_rng(seed)
    net = Network((6, 6, 2), [MaxPool(2, 2)])
    x = rng.normal(size=(2, 6, 6, 2))
    out, trace = net.forward(x, "train")
    dy = rng.normal(size=out.shape)
    _, dx = net.backward(trace, dy)
    np.testing.assert_allclose(dx.sum(), dy.sum(), rtol=1e-12, atol=1e-12)
    # non-zero entries sit exactly where x equals its window max
    assert np.all((dx != 0) <= (x == np.repeat(np.repeat(out, 2, 1), 2, 2)))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_global_avg_pool_uniform_gradient(h, w, c):
    net = Network((h, w, c), [GlobalAvgPool()])
    _, trace = net.forward(np.random.default_rng(0).normal(size=(2, h, w, c)), "train")
    _, dx = net.backward(trace, np.ones((2, c)))
    np.testing.assert_allclose(dx, 1.0 / (h * w))


# ---------------------------------------------------------------- sgd update


def test_sgd_zero_grads_leave_params():
    net = small_cnn()
    before = [{n: a.copy() for n, a in p.items()} for p in net.params]
    sgd_param_update(net, [{n: np.zeros_like(a) for n, a in p.items()} for p in net.params], 0.1)
    assert all(np.array_equal(before[k][n], net.params[k][n]) for k in range(len(before)) for n in before[k])
    assert net.step == 1


def test_sgd_scalar_arithmetic():
    net = Network((1,), [Dense(1, 1)], params=[{"W": np.ones((1, 1)), "b": np.zeros(1)}])
    sgd_param_update(net, [{"W": np.full((1, 1), 0.5), "b": np.zeros(1)}], 0.1)
    assert net.params[0]["W"][0, 0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_two_updates_equal_summed_update():
    rng = np.random.default_rng(3)
    a, b = small_cnn(), small_cnn()
    g1 = [{n: rng.normal(size=x.shape) for n, x in p.items()} for p in a.params]
    g2 = [{n: rng.normal(size=x.shape) for n, x in p.items()} for p in a.params]
    a.sgd_step(g1, 0.1).sgd_step(g2, 0.1)
    b.sgd_step([{n: g1[k][n] + g2[k][n] for n in g1[k]} for k in range(len(g1))], 0.1)
    for pa, pb in zip(a.params, b.params):
        for n in pa:
            np.testing.assert_allclose(pa[n], pb[n], rtol=0, atol=1e-14)


def test_sgd_errors():
    net = small_cnn()
    grads = [{n: np.zeros_like(a) for n, a in p.items()} for p in net.params]
    with pytest.raises(UsageError):
        net.sgd_step(grads, 0.0)
    grads[3]["W"][0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        net.sgd_step(grads, 0.1)
    assert info.value.context["layer"] == 3


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_linear_quadratic_exact():
    rng = np.random.default_rng(0)
    net = Network((5,), [Dense(5, 3)], seed=1)
    rep = gradcheck(net, rng.normal(size=(2, 5)), squared_error(rng.normal(size=(2, 3))))
    assert rep.max_error < 1e-8


def test_gradcheck_conv_relu_dense_softmax_ce():
    rng = np.random.default_rng(4)
    net = Network((5, 5, 1), [Conv2D(3, 3, 1, 2), ReLU(), Dense(18, 3), Softmax()], seed=4)
    x = rng.normal(size=(2, 5, 5, 1))
    while kink_margin(net, x) < 1e-2:
        x = rng.normal(size=(2, 5, 5, 1))
    labels = np.array([0, 2])

    def head(p):
        n = len(p)
        return -np.log(p[np.arange(n), labels]).mean(), _ce_grad(p, labels)

    rep = gradcheck(net, x, head, h=1e-3, tol=1e-4)
    assert rep.passed, rep.worst()


def _ce_grad(p, labels):
    g = np.zeros_like(p)
    g[np.arange(len(p)), labels] = -1.0 / (len(p) * p[np.arange(len(p)), labels])
    return g


def test_gradcheck_detects_sign_flip():
    class Flipped(Conv2D):
        def backward(self, dy, params, cache):
            dx, g = super().backward(dy, params, cache)
            return -dx, {n: -a for n, a in g.items()}

    rng = np.random.default_rng(0)
    net = Network((4, 4, 1), [Flipped(3, 3, 1, 2), Dense(8, 2)], seed=0)
    rep = gradcheck(net, rng.normal(size=(1, 4, 4, 1)), squared_error(rng.normal(size=(1, 2))))
    assert not rep.passed
    assert rep.worst(1)[0][1][1] in ("conv2d", "input")


@given(st.integers(0, 10_000))
def test_gradcheck_random_small_networks(seed):
    rng = np.random.default_rng(seed)
    net = Network((5, 5, 1), [Conv2D(2, 2, 1, 2), ReLU(), MaxPool(2, 2), Dropout(0.25), Dense(8, 3)], seed=seed)
    assert net.n_params <= 200
    x = rng.normal(size=(2, 5, 5, 1))
    while kink_margin(net, x) < 1e-2:
        x = rng.normal(size=(2, 5, 5, 1))
    rep = gradcheck(net, x, squared_error(rng.normal(size=(2, 3))), h=1e-3, mask_seed=seed)
    assert rep.passed, rep.worst()


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 1, 2, 1])
    loss, g = softmax_cross_entropy(logits, labels)
    num = np.zeros_like(logits)
    for i in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[i] += 1e-6
        lm[i] -= 1e-6
        num[i] = (softmax_cross_entropy(lp, labels)[0] - softmax_cross_entropy(lm, labels)[0]) / 2e-6
    np.testing.assert_allclose(g, num, atol=1e-8)


# ---------------------------------------------------------------- persistence


def test_network_roundtrip_bitwise(tmp_path):
    net = Network((6, 6, 1), [Conv2D(3, 3, 1, 2, padding=1), ReLU(), MaxPool(2, 2), Dropout(0.2),
                              GlobalAvgPool(), Dense(2, 3), Softmax()], seed=7)
    net.step = 12
    save_network(net, tmp_path / "net.lnn")
    back = load_network(tmp_path / "net.lnn")
    assert back.layers == net.layers and back.step == 12 and back.seed == 7
    for pa, pb in zip(net.params, back.params):
        for n in pa:
            assert pa[n].tobytes() == pb[n].tobytes()
    probe = np.random.default_rng(0).normal(size=(16, 6, 6, 1))
    assert np.array_equal(net.forward(probe)[0], back.forward(probe)[0])


def test_network_file_layout():
    net = Network((2,), [Dense(2, 1)], params=[{"W": np.array([[1.5], [-2.0]]), "b": np.array([0.25])}])
    buf = network_to_bytes(net)
    assert buf[:4] == b"LNN1"
    assert int.from_bytes(buf[4:8], "little") == 1
    hlen = int.from_bytes(buf[8:12], "little")
    # parameters in sorted-name order: W then b
    assert np.frombuffer(buf[12 + hlen:], "<f8").tolist() == [1.5, -2.0, 0.25]


def test_network_bad_magic_and_version():
    buf = network_to_bytes(small_cnn())
    with pytest.raises(VersionError):
        network_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(VersionError):
        network_from_bytes(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
