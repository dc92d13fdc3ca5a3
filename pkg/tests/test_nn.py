import numpy as np
import pytest
from scipy import signal

from scenegen.nn import Adam, AdamState, ModelParams, Tensor, adam_step, load_weights, no_grad, save_weights
from scenegen.nn import autograd as ag
from scenegen.nn import layers
from scenegen.nn.params import WeightFormatError


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def grad_check(build, arrays, eps=1e-6, seed=0):
    """Compare autograd gradients of a random projection of ``build(*tensors)`` with central differences."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = rng.normal(size=out.shape)
    (out * Tensor(proj)).sum().backward()
    errs = []
    for t in tensors:
        num = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = t.data[idx]
            t.data[idx] = old + eps
            with no_grad():
                hi = float((build(*tensors).data * proj).sum())
            t.data[idx] = old - eps
            with no_grad():
                lo = float((build(*tensors).data * proj).sum())
            t.data[idx] = old
            num[idx] = (hi - lo) / (2 * eps)
        errs.append(rel_err(t.grad, num))
    return max(errs)


# --- forward values against independent references -----------------------------------------

def reference_conv(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, h, wd))
    for i in range(n):
        for j in range(o):
            acc = sum(signal.correlate2d(x[i, ci], w[j, ci], mode="same", boundary="fill") for ci in range(c))
            out[i, j] = acc + (0 if b is None else b[j])
    return out


@pytest.mark.parametrize("n,c,o,k", [(2, 5, 3, 3), (1, 3, 7, 3), (2, 4, 4, 5), (3, 2, 6, 1), (1, 6, 2, 1)])
def test_conv2d_matches_scipy(n, c, o, k):
    rng = np.random.default_rng(n * 100 + c * 10 + o)
    x, w, b = rng.normal(size=(n, c, 7, 6)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
    got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, reference_conv(x, w, b), rtol=1e-10, atol=1e-12)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 3, 3, 3))))
    with pytest.raises(ValueError):
        ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 2, 2))))


def test_group_norm_matches_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 4, 5))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    got = ag.group_norm(Tensor(x), 3, Tensor(gamma), Tensor(beta)).data
    exp = np.empty_like(x)
    for n in range(2):
        for g in range(3):
            blk = x[n, 2 * g:2 * g + 2]
            exp[n, 2 * g:2 * g + 2] = (blk - blk.mean()) / np.sqrt(blk.var() + 1e-5)
    exp = exp * gamma[None, :, None, None] + beta[None, :, None, None]
    np.testing.assert_allclose(got, exp, rtol=1e-12)
    with pytest.raises(ValueError):
        ag.group_norm(Tensor(x), 4, Tensor(gamma), Tensor(beta))


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def reference_conv_lstm(xs, params):
    """Plain numpy two-layer ConvLSTM over a sequence, zero initial state."""
    w0 = np.concatenate([params["lstm0.w_map"], params["lstm0.w_actor"]], axis=1)
    state = [(None, None), (None, None)]
    outs = []
    for x in xs:
        inp = x
        for layer, (wx, b, wh) in enumerate([(w0, params["lstm0.b"], params["lstm0.w_h"]),
                                             (params["lstm1.w_x"], params["lstm1.b"], params["lstm1.w_h"])]):
            h, c = state[layer]
            g = reference_conv(inp, wx, b)
            if h is not None:
                g = g + reference_conv(h, wh, None)
            i, f, o, gg = np.split(g, 4, axis=1)
            c_new = sigmoid(i) * np.tanh(gg) + (0 if c is None else sigmoid(f) * c)
            h_new = sigmoid(o) * np.tanh(c_new)
            state[layer] = (h_new, c_new)
            inp = h_new
        outs.append(inp)
    return outs


def lstm_params(rng, cin_map=3, cin_act=2, hid=2, k=3):
    return {
        "lstm0.w_map": rng.normal(0, 0.4, (4 * hid, cin_map, k, k)),
        "lstm0.w_actor": rng.normal(0, 0.4, (4 * hid, cin_act, k, k)),
        "lstm0.w_h": rng.normal(0, 0.4, (4 * hid, hid, k, k)),
        "lstm0.b": rng.normal(0, 0.1, 4 * hid),
        "lstm1.w_x": rng.normal(0, 0.4, (4 * hid, hid, k, k)),
        "lstm1.w_h": rng.normal(0, 0.4, (4 * hid, hid, k, k)),
        "lstm1.b": rng.normal(0, 0.1, 4 * hid),
    }


def test_conv_lstm_matches_numpy_reference():
    rng = np.random.default_rng(2)
    params = lstm_params(rng)
    xs = [rng.normal(size=(1, 5, 6, 6)) for _ in range(3)]
    p = ModelParams(params)
    state = [(None, None), (None, None)]
    for x, ref in zip(xs, reference_conv_lstm(xs, params)):
        h, state = layers.conv_lstm_step(Tensor(x), state, p)
        np.testing.assert_allclose(h.data, ref, rtol=1e-10, atol=1e-12)


# --- gradients --------------------------------------------------------------------------------

@pytest.mark.parametrize("c,o,k", [(4, 3, 3), (2, 5, 3), (3, 3, 5), (3, 4, 1)])
def test_conv2d_gradient(c, o, k):
    rng = np.random.default_rng(c + o + k)
    arrs = [rng.normal(size=(2, c, 5, 4)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)]
    assert grad_check(lambda x, w, b: ag.conv2d(x, w, b), arrs) < 1e-6


def test_group_norm_gradient():
    rng = np.random.default_rng(3)
    arrs = [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)]
    assert grad_check(lambda x, g, b: ag.group_norm(x, 2, g, b), arrs) < 1e-6


def test_conv_gn_relu_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 3, 5, 5))
    w, b, g, be = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)

    def build(x, w, b, g, be):
        p = ModelParams()
        p._t.update({"c.w": w, "c.b": b, "c.gamma": g, "c.beta": be})
        return layers.conv_gn_relu(x, p, "c", 2)
    assert grad_check(build, [x, w, b, g, be]) < 1e-4


def test_conv_lstm_bptt_gradient():
    rng = np.random.default_rng(5)
    params = lstm_params(rng, 2, 1, 2, 3)
    names = list(params)
    xs = rng.normal(size=(3, 1, 3, 4, 4))

    def build(xseq, *ws):
        p = ModelParams()
        p._t.update(dict(zip(names, ws)))
        state = [(None, None), (None, None)]
        outs = []
        for t in range(3):
            h, state = layers.conv_lstm_step(xseq[t], state, p)
            outs.append(h)
        return ag.concat(outs, axis=0)
    assert grad_check(build, [xs] + [params[n] for n in names]) < 1e-4


@pytest.mark.parametrize("activation", [None, "softmax", "log_softmax", "tanh", "biternion"])
def test_mlp3_gradient(activation):
    rng = np.random.default_rng(6)
    shapes = {"m.0.w": (5, 6), "m.0.b": (6,), "m.1.w": (6, 6), "m.1.b": (6,), "m.2.w": (6, 4), "m.2.b": (4,)}
    arrs = [rng.normal(size=(3, 5))] + [rng.normal(size=s) for s in shapes.values()]

    def build(x, *ws):
        p = ModelParams()
        p._t.update(dict(zip(shapes, ws)))
        return layers.mlp3(x, p, "m", activation)
    assert grad_check(build, arrs) < 1e-4


def test_biternion_output_is_unit():
    rng = np.random.default_rng(7)
    p = ModelParams({"m.0.w": rng.normal(size=(3, 4)), "m.0.b": np.zeros(4), "m.1.w": rng.normal(size=(4, 4)),
                     "m.1.b": np.zeros(4), "m.2.w": rng.normal(size=(4, 6)), "m.2.b": rng.normal(size=6)})
    out = layers.mlp3(Tensor(rng.normal(size=(5, 3))), p, "m", "biternion").data.reshape(5, 3, 2)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0)


def test_elementwise_and_structural_gradients():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2, size=(3, 4))
    assert grad_check(lambda x, y: ag.exp(x) * ag.log(y) - x / y + ag.sigmoid(x) * ag.tanh(y), [a, b]) < 1e-6
    assert grad_check(lambda x: ag.relu(x) + 0.0, [a + 0.01]) < 1e-6
    assert grad_check(lambda x, y: x @ y.transpose(), [a, b]) < 1e-6
    assert grad_check(lambda x: ag.log_softmax(x, axis=-1), [a]) < 1e-6
    assert grad_check(lambda x: x[1:, ::2].sum(axis=0, keepdims=True) + x.mean(), [a]) < 1e-6
    assert grad_check(lambda x, y: ag.concat(ag.split(ag.concat([x, y], 1), 2, axis=1)[::-1], 0), [a, b]) < 1e-6
    assert grad_check(lambda x: x.reshape(4, 3) * Tensor(np.arange(12.0).reshape(4, 3)), [a]) < 1e-6


def test_broadcast_gradient():
    rng = np.random.default_rng(9)
    assert grad_check(lambda x, b: x + b, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))]) < 1e-8


def test_spatial_index_pool_and_rows():
    rng = np.random.default_rng(10)
    f = rng.normal(size=(2, 3, 4, 5))
    out = layers.index_spatial(Tensor(f), [1, 3], [0, 4], [0, 1])
    np.testing.assert_array_equal(out.data, np.stack([f[0, :, 1, 0], f[1, :, 3, 4]]))
    assert grad_check(lambda x: layers.index_spatial(x, [1, 3, 2], [0, 4, 4], [0, 1, 1]), [f]) < 1e-8
    assert grad_check(lambda x: layers.avg_pool_spatial(x), [f]) < 1e-8
    assert grad_check(lambda x: layers.take_rows(x, [1, 0]), [f]) < 1e-8
    with pytest.raises(ValueError):
        layers.index_spatial(Tensor(f), [4], [0])


def test_one_hot_feature_map_indexing():
    f = np.zeros((1, 3, 4, 4))
    f[0, :, 2, 1] = [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(layers.index_spatial(Tensor(f), 2, 1).data, [[1.0, 2.0, 3.0]])


def test_unbind_gathers_gradients():
    rng = np.random.default_rng(11)
    assert grad_check(lambda x: ag.concat([p * (i + 1.0) for i, p in enumerate(layers.unbind(x))][::-1], 0),
                      [rng.normal(size=(3, 2))]) < 1e-8


def test_function_wrapper_uses_supplied_jacobian():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    y = ag.function(x, lambda a: ((a ** 2).sum(-1), 2 * a))
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_gradients_accumulate_and_no_grad_builds_no_graph():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.backward()


def test_shared_subexpression_gradient():
    x = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    y = x * x
    (y + y * y).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 4 * x.data ** 3)


# --- optimizer --------------------------------------------------------------------------------

def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(12)
    grads = rng.normal(size=(6, 3))
    p = {"w": np.array([0.5, -1.0, 2.0])}
    st = AdamState()
    for g in grads:
        adam_step(p, {"w": g}, st, lr=0.01)
    np.testing.assert_allclose(p["w"], reference_adam(np.array([0.5, -1.0, 2.0]), grads, 0.01), rtol=1e-12)


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([3.0, -0.2, 0.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"], [-0.1, 0.1, 0.0], atol=1e-7)


def test_adam_minimizes_quadratic_and_clips():
    params = ModelParams({"w": np.array([3.0, -2.0])})
    opt = Adam(params, lr=0.1, grad_clip=1.0)
    for _ in range(300):
        opt.zero_grad()
        w = params["w"]
        ((w - Tensor(np.array([1.0, 1.0]))) * (w - Tensor(np.array([1.0, 1.0])))).sum().backward()
        norm = opt.step()
    assert norm < 1e-2
    np.testing.assert_allclose(params["w"].data, [1.0, 1.0], atol=1e-2)


# --- parameters and weight files ---------------------------------------------------------------

def test_registry_is_closed():
    p = ModelParams({"a": np.zeros(2)})
    with pytest.raises(KeyError):
        p.add("b", np.zeros(1))
    with pytest.raises(KeyError):
        p["missing"]


def test_weights_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    p = ModelParams({"x": rng.normal(size=(3, 4)).astype(np.float32), "y": rng.normal(size=5).astype(np.float32)})
    save_weights(tmp_path / "w.bin", p, {"k": 4})
    q, cfg = load_weights(tmp_path / "w.bin")
    assert cfg == {"k": 4}
    assert q.names() == p.names()
    for n in p:
        np.testing.assert_array_equal(q[n].data, p[n].data)


def test_weights_reject_corruption(tmp_path):
    p = ModelParams({"x": np.ones(4, dtype=np.float32)})
    save_weights(tmp_path / "w.bin", p)
    blob = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(blob[:-4])
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "short.bin")
