import numpy as np
import pytest

from dpcap.nncore import (
    GELU,
    CheckpointError,
    Embedding,
    LayerNorm,
    Linear,
    MissingTraceError,
    MultiHeadAttention,
    ParamStore,
    PositionalEmbedding,
    Runtime,
    TokenMLP,
    backward,
    grad_norm,
    load_checkpoint,
    per_sample_grads,
    save_checkpoint,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
    to_half_grid,
)

from conftest import tiny_batch, tiny_captioner
from oracles import fd_failures

H = 1e-4
RTOL = 1e-4


def assert_fd(f, arr, analytic, max_coords=None, rng=None, scale=None):
    coords = None
    if max_coords is not None and arr.size > max_coords:
        flat = list(np.ndindex(arr.shape))
        coords = [flat[i] for i in rng.choice(len(flat), max_coords, replace=False)]
    bad = fd_failures(f, arr, analytic, coords=coords, scale=scale, h=H, rtol=RTOL)
    assert not bad, bad[:5]


def make_rt():
    store = ParamStore()
    return store, Runtime(store)


# -- forward sanity ------------------------------------------------------------


def test_zero_weight_linear_gives_zero():
    store, rt = make_rt()
    lin = Linear(rt, "l", 5, 3, np.random.default_rng(0))
    store["l.W"][...] = 0
    assert np.all(lin.forward(np.random.default_rng(1).normal(size=(2, 4, 5))) == 0)


def test_layernorm_identity_on_standardised_input():
    store, rt = make_rt()
    ln = LayerNorm(rt, "ln", 16)
    x = np.random.default_rng(0).normal(size=(3, 16))
    x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    np.testing.assert_allclose(ln.forward(x), x, rtol=1e-5)


def test_token_mlp_matches_naive_loops():
    net = TokenMLP(3, 5, 2, seed=4)
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    W1, b1, W2, b2 = (net.store[k] for k in ("fc1.W", "fc1.b", "fc2.W", "fc2.b"))
    g, beta = net.store["ln.g"], net.store["ln.b"]
    want = np.zeros((2, 3, 2))
    for b in range(2):
        for t in range(3):
            h = [sum(x[b, t, i] * W1[i, j] for i in range(3)) + b1[j] for j in range(5)]
            h = [0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v**3))) for v in h]
            mu = sum(h) / 5
            var = sum((v - mu) ** 2 for v in h) / 5
            h = [(v - mu) / np.sqrt(var + 1e-5) * g[j] + beta[j] for j, v in enumerate(h)]
            for o in range(2):
                want[b, t, o] = sum(h[j] * W2[j, o] for j in range(5)) + b2[o]
    np.testing.assert_allclose(net.predict(x), want, rtol=1e-12, atol=1e-14)


def test_scalar_linear_gradient():
    store, rt = make_rt()
    lin = Linear(rt, "l", 1, 1, np.random.default_rng(0), bias=False)
    lin.forward(np.array([[3.0]]))
    store.zero_grad()
    lin.backward(np.array([[1.0]]))
    assert store.grads["l.W"][0, 0] == 3.0


def test_backward_before_forward_raises():
    store, rt = make_rt()
    with pytest.raises(MissingTraceError):
        Linear(rt, "l", 2, 2, np.random.default_rng(0)).backward(np.ones((1, 2)))
    with pytest.raises(MissingTraceError):
        LayerNorm(rt, "n", 2).backward(np.ones((1, 2)))
    lin = Linear(rt, "m", 2, 2, np.random.default_rng(0))
    lin.forward(np.ones((1, 1, 2)))
    with pytest.raises(MissingTraceError):
        lin.trace


def test_shape_mismatch_raises():
    store, rt = make_rt()
    with pytest.raises(ValueError):
        Linear(rt, "l", 3, 2, np.random.default_rng(0)).forward(np.ones((1, 4)))
    with pytest.raises(ValueError):
        Embedding(rt, "e", 5, 2, np.random.default_rng(0)).forward(np.array([[7]]))


# -- finite differences, layer by layer -----------------------------------------


def _gmax(store):
    return max(float(np.max(np.abs(g))) for g in store.grads.values())


def _layer_case(build, x, rng, n_out_shape=None):
    """Scalar objective sum(w * layer(x)) with gradient checks on params and input."""
    store, rt = make_rt()
    layer = build(rt, rng)
    y = layer.forward(x)
    w = rng.normal(size=y.shape)

    def f():
        return float(np.sum(w * layer.forward(x)))

    layer.forward(x)
    store.zero_grad()
    dx = layer.backward(w)
    for name in store.names():
        assert_fd(f, store[name], store.grads[name].copy(), scale=_gmax(store))
    return f, dx


def test_fd_linear():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4))
    f, dx = _layer_case(lambda rt, r: Linear(rt, "l", 4, 5, r, std=0.5), x, rng)
    assert_fd(f, x, dx)


def test_fd_embedding():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 6, size=(3, 4))
    _layer_case(lambda rt, r: Embedding(rt, "e", 6, 3, r, std=0.5), ids, rng)


def test_fd_positional():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4))
    f, dx = _layer_case(lambda rt, r: PositionalEmbedding(rt, "p", 5, 4, r, std=0.5), x, rng)
    assert_fd(f, x, dx)


def test_fd_layernorm():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6))

    def build(rt, r):
        ln = LayerNorm(rt, "n", 6)
        rt.store["n.g"][...] = r.normal(1, 0.3, 6)
        rt.store["n.b"][...] = r.normal(0, 0.3, 6)
        return ln

    f, dx = _layer_case(build, x, rng)
    assert_fd(f, x, dx)


def test_fd_gelu():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5)) * 2
    act = GELU()
    w = rng.normal(size=x.shape)
    act.forward(x)
    dx = act.backward(w)
    assert_fd(lambda: float(np.sum(w * act.forward(x))), x, dx)


@pytest.mark.parametrize("causal", [False, True])
def test_fd_self_attention(causal):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 6))
    store, rt = make_rt()
    attn = MultiHeadAttention(rt, "a", 6, 2, rng, causal=causal)
    for n in store.names():
        if n.endswith(".W"):
            store[n][...] = rng.normal(0, 0.5, store[n].shape)
    w = rng.normal(size=(2, 4, 6))

    def f():
        return float(np.sum(w * attn.forward(x)))

    f()
    store.zero_grad()
    dx, dsrc = attn.backward(w)
    assert dsrc is None
    gmax = _gmax(store)
    for n in store.names():
        assert_fd(f, store[n], store.grads[n].copy(), scale=gmax)
    assert_fd(f, x, dx)


def test_fd_cross_attention():
    rng = np.random.default_rng(6)
    x, src = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 6))
    store, rt = make_rt()
    attn = MultiHeadAttention(rt, "c", 4, 2, rng, d_src=6)
    for n in store.names():
        if n.endswith(".W"):
            store[n][...] = rng.normal(0, 0.5, store[n].shape)
    w = rng.normal(size=(2, 3, 4))

    def f():
        return float(np.sum(w * attn.forward(x, src)))

    f()
    store.zero_grad()
    dx, dsrc = attn.backward(w)
    gmax = _gmax(store)
    for n in store.names():
        assert_fd(f, store[n], store.grads[n].copy(), scale=gmax)
    assert_fd(f, x, dx)
    assert_fd(f, src, dsrc)


def test_causal_attention_ignores_future():
    rng = np.random.default_rng(7)
    store, rt = make_rt()
    attn = MultiHeadAttention(rt, "a", 4, 2, rng, causal=True)
    x = rng.normal(size=(1, 5, 4))
    y0 = attn.forward(x).copy()
    x[0, 3] += 10
    y1 = attn.forward(x)
    np.testing.assert_array_equal(y0[0, :3], y1[0, :3])
    assert not np.allclose(y0[0, 3:], y1[0, 3:])


def test_fd_softmax_cross_entropy():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 4, 7))
    targets = rng.integers(0, 7, size=(3, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], float)
    weights = rng.normal(size=3)

    def f():
        return float(np.dot(weights, softmax_cross_entropy(logits, targets, mask)[0]))

    _, probs, counts = softmax_cross_entropy(logits, targets, mask)
    g = softmax_cross_entropy_backward(probs, targets, mask, counts, weights)
    assert_fd(f, logits, g)


def test_cross_entropy_single_position_by_hand():
    logits = np.array([[[1.0, 2.0, 0.5]]])
    loss, _, _ = softmax_cross_entropy(logits, np.array([[1]]), np.ones((1, 1)))
    want = -2.0 + np.log(np.exp(1.0) + np.exp(2.0) + np.exp(0.5))
    assert loss[0] == pytest.approx(want, rel=1e-14)


def test_fd_captioner_all_parameters():
    rng = np.random.default_rng(9)
    model = tiny_captioner(seed=3, std=0.3)
    batch = tiny_batch(seed=4, n=3)
    weights = rng.uniform(0.5, 1.5, size=3)

    def f():
        return float(np.dot(weights, model.forward(batch)))

    f()
    grads = backward(model, weights)
    gmax = max(float(np.max(np.abs(g))) for g in grads.values())
    for name in model.store.names():
        assert_fd(f, model.store[name], grads[name], max_coords=40, rng=rng, scale=gmax)


# -- per-sample oracle ------------------------------------------------------------


def test_per_sample_sum_equals_batch_gradient():
    model = tiny_captioner(seed=1, std=0.3)
    batch = tiny_batch(seed=2, n=8)
    model.forward(batch)
    full = backward(model, np.ones(8))
    per = per_sample_grads(model, batch)
    total = {k: sum(g[k] for g in per) for k in full}
    diff = grad_norm({k: total[k] - full[k] for k in full})
    assert diff <= 1e-10 * grad_norm(full)


def test_per_sample_single_and_duplicate():
    model = tiny_captioner(seed=1, std=0.3)
    one = tiny_batch(seed=5, n=1)
    model.forward(one)
    full = backward(model, np.ones(1))
    (ps,) = per_sample_grads(model, one)
    for k in full:
        np.testing.assert_array_equal(ps[k], full[k])
    dup = one.subset([0, 0])
    a, b = per_sample_grads(model, dup)
    model.forward(dup)
    full2 = backward(model, np.ones(2))
    for k in full:
        np.testing.assert_array_equal(a[k], b[k])
        np.testing.assert_allclose(full2[k], 2 * a[k], rtol=1e-12, atol=1e-15)


def test_gradient_linear_in_loss_scale():
    model = tiny_captioner(seed=2, std=0.3)
    batch = tiny_batch(seed=3, n=4)
    model.forward(batch)
    g1 = backward(model, np.ones(4))
    model.forward(batch)
    g2 = backward(model, 2 * np.ones(4))
    for k in g1:
        np.testing.assert_array_equal(g2[k], 2 * g1[k])


def test_determinism():
    batch = tiny_batch(seed=0, n=3)
    a = tiny_captioner(seed=11).forward(batch)
    b = tiny_captioner(seed=11).forward(batch)
    np.testing.assert_array_equal(a, b)


# -- misc ------------------------------------------------------------------------


def test_half_grid():
    x = np.random.default_rng(0).normal(size=100) * 1e3
    h = to_half_grid(x)
    np.testing.assert_array_equal(h, x.astype(np.float16).astype(np.float64))
    assert np.isinf(to_half_grid(np.array([1e6])))[0]


def test_param_store():
    s = ParamStore()
    s.add("a", np.ones(3))
    with pytest.raises(KeyError):
        s.add("a", np.ones(3))
    assert s.grads["a"].shape == (3,) and s.size() == 3
    with pytest.raises(ValueError):
        s.load({"a": np.ones(4)})


def test_checkpoint_round_trip(tmp_path):
    model = tiny_captioner(seed=5)
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.store, {"hello": [1, 2]})
    cfg, params = load_checkpoint(path)
    assert cfg == {"hello": [1, 2]}
    assert list(params) == model.store.names()
    for k, v in params.items():
        np.testing.assert_array_equal(v, model.store[k])


def test_checkpoint_corruption(tmp_path):
    model = tiny_captioner(seed=5)
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.store, {})
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.bin")
