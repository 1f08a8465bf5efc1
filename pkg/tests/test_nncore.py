import numpy as np
import pytest

from era_forge import nncore as nn
from era_forge.nncore import ConfigError, ShapeError

RNG = np.random.default_rng


def naive_conv(x, w, b):
    B, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, H, W))
    for bi in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(C):
                        for di in range(3):
                            for dj in range(3):
                                acc += xp[bi, c, i + di, j + dj] * w[o, c, di, dj]
                    out[bi, o, i, j] = acc
    return out


def dense_attention(x, wq, wk, wv, wo, heads, d_k, gamma, beta):
    out = np.zeros_like(x)
    for b in range(x.shape[0]):
        cat = []
        for h in range(heads):
            sl = slice(h * d_k, (h + 1) * d_k)
            q, k, v = x[b] @ wq[:, sl], x[b] @ wk[:, sl], x[b] @ wv[:, sl]
            s = q @ k.T / np.sqrt(d_k)
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            cat.append(p @ v)
        y = x[b] + np.concatenate(cat, axis=1) @ wo
        mu = y.mean(axis=1, keepdims=True)
        var = ((y - mu) ** 2).mean(axis=1, keepdims=True)
        out[b] = (y - mu) / np.sqrt(var + 1e-5) * gamma + beta
    return out


# -- forward oracles ------------------------------------------------------------


def test_conv_identity_kernel():
    conv = nn.Conv3x3(1, 1, RNG(0))
    conv.params["w"].value[...] = 0
    conv.params["w"].value[0, 0, 1, 1] = 1
    x = RNG(1).standard_normal((2, 1, 5, 6))
    np.testing.assert_array_equal(conv.forward(x), x)


def test_conv_zero_input_gives_bias():
    conv = nn.Conv3x3(2, 3, RNG(0))
    conv.params["b"].value[...] = [1.0, -2.0, 0.5]
    out = conv.forward(np.zeros((1, 2, 4, 4)))
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([1.0, -2.0, 0.5])[None, :, None, None], out.shape))


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 5, 3)])
def test_conv_matches_naive_loops(shape):
    rng = RNG(2)
    conv = nn.Conv3x3(shape[1], 2, rng)
    conv.params["b"].value[...] = rng.standard_normal(2)
    x = rng.standard_normal(shape)
    np.testing.assert_allclose(conv.forward(x), naive_conv(x, conv.params["w"].value, conv.params["b"].value),
                               atol=1e-6)


def test_conv_shape_error():
    with pytest.raises(ShapeError, match=r"\[B,3,H,W\]"):
        nn.Conv3x3(3, 2, RNG(0)).forward(np.zeros((1, 2, 4, 4)))


def test_batchnorm_standardizes():
    bn = nn.BatchNorm2d(3)
    x = RNG(0).normal(3.0, 2.0, (4, 3, 5, 5))
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_zero_gamma():
    bn = nn.BatchNorm2d(2)
    bn.params["gamma"].value[...] = 0
    bn.params["beta"].value[...] = [0.3, -1.0]
    y = bn.forward(RNG(0).standard_normal((2, 2, 3, 3)))
    np.testing.assert_array_equal(y, np.broadcast_to(np.array([0.3, -1.0])[None, :, None, None], y.shape))


def test_batchnorm_formula_and_running_stats():
    rng = RNG(1)
    bn = nn.BatchNorm2d(2)
    bn.params["gamma"].value[...] = rng.standard_normal(2)
    bn.params["beta"].value[...] = rng.standard_normal(2)
    x = rng.standard_normal((3, 2, 4, 2))
    y = bn.forward(x, train=True)
    for c in range(2):
        xc = x[:, c]
        mu = xc.sum() / xc.size
        var = ((xc - mu) ** 2).sum() / xc.size
        ref = bn.params["gamma"].value[c] * (xc - mu) / np.sqrt(var + 1e-5) + bn.params["beta"].value[c]
        np.testing.assert_allclose(y[:, c], ref, atol=1e-6)
        assert bn.buffers["running_mean"][c] == pytest.approx(0.1 * mu)
        assert bn.buffers["running_var"][c] == pytest.approx(0.9 + 0.1 * var * xc.size / (xc.size - 1))
    ev = bn.forward(x, train=False)
    mean, var = bn.buffers["running_mean"], bn.buffers["running_var"]
    ref = bn.params["gamma"].value[None, :, None, None] * (x - mean[None, :, None, None]) / np.sqrt(
        var[None, :, None, None] + 1e-5) + bn.params["beta"].value[None, :, None, None]
    np.testing.assert_allclose(ev, ref, atol=1e-12)


def test_batchnorm_too_small():
    with pytest.raises(ShapeError, match="batch too small for BN"):
        nn.BatchNorm2d(1).forward(np.zeros((1, 1, 1, 1)), train=True)


def test_elu_values():
    y = nn.ELU().forward(np.array([0.0, 1.0, -1.0]))
    np.testing.assert_allclose(y, [0.0, 1.0, np.exp(-1) - 1])
    assert y[2] == pytest.approx(-0.6321, abs=1e-4)


def test_mha_single_token_is_value_path():
    rng = RNG(0)
    blk = nn.MHABlock(8, 2, 4, rng)
    x = rng.standard_normal((3, 1, 8))
    out = blk.forward(x)
    assert (blk.last_attention == 1.0).all()
    ln = nn.LayerNorm(8)
    np.testing.assert_array_equal(out, ln.forward(x + x @ blk.params["wv"].value))


def test_mha_zero_query_key_gives_uniform_attention():
    rng = RNG(0)
    blk = nn.MHABlock(8, 2, 4, rng)
    blk.params["wq"].value[...] = 0
    blk.params["wk"].value[...] = 0
    blk.forward(rng.standard_normal((2, 5, 8)))
    np.testing.assert_allclose(blk.last_attention, 1 / 5)


def test_mha_matches_dense_oracle():
    rng = RNG(3)
    blk = nn.MHABlock(4, 1, 2, rng)  # heads*d_k != D -> output projection
    blk.params["ln_gamma"].value[...] = rng.standard_normal(4)
    blk.params["ln_beta"].value[...] = rng.standard_normal(4)
    x = rng.standard_normal((1, 2, 4))
    p = {k: blk.params[k].value for k in ("wq", "wk", "wv", "wo", "ln_gamma", "ln_beta")}
    ref = dense_attention(x, p["wq"], p["wk"], p["wv"], p["wo"], 1, 2, p["ln_gamma"], p["ln_beta"])
    np.testing.assert_allclose(blk.forward(x), ref, atol=1e-6)
    blk2 = nn.MHABlock(4, 2, 2, rng)
    p2 = {k: blk2.params[k].value for k in ("wq", "wk", "wv")}
    x2 = rng.standard_normal((2, 3, 4))
    ref2 = dense_attention(x2, p2["wq"], p2["wk"], p2["wv"], np.eye(4), 2, 2, 1.0, 0.0)
    np.testing.assert_allclose(blk2.forward(x2), ref2, atol=1e-6)


def test_mha_config_error():
    with pytest.raises(ConfigError):
        nn.MHABlock(8, 3, 2, RNG(0), out_proj=False)


def test_avgpool_constant_and_floor():
    pool = nn.AvgPool2x2()
    y = pool.forward(np.full((1, 2, 5, 7), 3.5))
    assert y.shape == (1, 2, 2, 3)
    np.testing.assert_array_equal(y, 3.5)


def test_global_avgpool():
    x = RNG(0).standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(nn.GlobalAvgPool().forward(x), x.mean(axis=(2, 3)))


def test_softmax_uniform_and_rows():
    y = nn.Softmax().forward(np.zeros((2, 8)))
    np.testing.assert_allclose(y, 1 / 8)
    z = nn.softmax(RNG(0).normal(0, 50, (100, 7)))
    np.testing.assert_allclose(z.sum(axis=1), 1, atol=1e-6)
    assert (z >= 0).all() and (z <= 1).all()
    moderate = nn.softmax(RNG(1).standard_normal((50, 6)))
    assert (moderate > 0).all() and (moderate < 1).all()


def test_linear_matches_loops():
    rng = RNG(0)
    lin = nn.Linear(5, 3, rng)
    lin.params["b"].value[...] = rng.standard_normal(3)
    x = rng.standard_normal((4, 5))
    w, b = lin.params["w"].value, lin.params["b"].value
    ref = np.array([[sum(x[i, k] * w[k, j] for k in range(5)) + b[j] for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(lin.forward(x), ref, atol=1e-6)


def test_l2norm_zero_vector():
    with pytest.raises(ValueError, match="degenerate zero vector"):
        nn.L2Normalize().forward(np.zeros((1, 3)))


def test_layernorm_rows():
    y = nn.LayerNorm(6).forward(RNG(0).normal(4, 3, (5, 6)))
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


# -- linearity and determinism ----------------------------------------------------


@pytest.mark.parametrize("make", [lambda r: nn.Conv3x3(2, 3, r), lambda r: nn.Linear(6, 4, r)])
def test_linearity_without_bias(make):
    rng = RNG(5)
    layer = make(rng)
    shape = (2, 2, 4, 4) if isinstance(layer, nn.Conv3x3) else (3, 6)
    x = rng.standard_normal(shape)
    np.testing.assert_allclose(layer.forward(2.5 * x), 2.5 * layer.forward(x), atol=1e-6)


def test_forward_deterministic():
    rng = RNG(0)
    seq = nn.Sequential([nn.Conv3x3(1, 2, rng), nn.BatchNorm2d(2), nn.ELU(), nn.AvgPool2x2(), nn.GlobalAvgPool(),
                         nn.Linear(2, 3, rng)])
    x = rng.standard_normal((2, 1, 4, 4))
    assert np.array_equal(seq.forward(x), seq.forward(x))


# -- backward ---------------------------------------------------------------------


def test_backward_before_forward():
    with pytest.raises(RuntimeError, match="no cached activations"):
        nn.Linear(2, 2, RNG(0)).backward(np.zeros((1, 2)))
    with pytest.raises(RuntimeError, match="no cached activations"):
        nn.Sequential([nn.ELU()]).backward(np.zeros(2))


def test_linear_sum_gradient():
    lin = nn.Linear(3, 2, RNG(0))
    x = RNG(1).standard_normal((5, 3))
    y = lin.forward(x)
    lin.backward(np.ones_like(y))
    np.testing.assert_allclose(lin.params["w"].grad, np.repeat(x.sum(axis=0)[:, None], 2, axis=1))
    np.testing.assert_allclose(lin.params["b"].grad, [5, 5])


def test_zero_upstream_zero_gradients():
    rng = RNG(0)
    seq = nn.Sequential([nn.Conv3x3(1, 2, rng), nn.BatchNorm2d(2), nn.ELU(), nn.GlobalAvgPool(), nn.Linear(2, 2, rng)])
    y = seq.forward(rng.standard_normal((2, 1, 3, 3)))
    dx = seq.backward(np.zeros_like(y))
    assert not dx.any()
    assert all(not p.grad.any() for _, p in seq.named_params())


LAYER_CASES = {
    "conv3x3": (lambda r: nn.Conv3x3(2, 3, r), lambda r: (int(r.integers(1, 3)), 2, int(r.integers(2, 5)), int(r.integers(2, 5)))),
    "batchnorm": (lambda r: nn.BatchNorm2d(2), lambda r: (int(r.integers(2, 4)), 2, 2, 3)),
    "elu": (lambda r: nn.ELU(), lambda r: (3, 4)),
    "avgpool2x2": (lambda r: nn.AvgPool2x2(), lambda r: (2, 2, int(r.integers(2, 6)), int(r.integers(2, 6)))),
    "global_avgpool": (lambda r: nn.GlobalAvgPool(), lambda r: (2, 3, 3, 2)),
    "linear": (lambda r: nn.Linear(4, 3, r), lambda r: (int(r.integers(1, 4)), 4)),
    "softmax": (lambda r: nn.Softmax(), lambda r: (3, 5)),
    "layernorm": (lambda r: nn.LayerNorm(5), lambda r: (2, 3, 5)),
    "l2norm": (lambda r: nn.L2Normalize(), lambda r: (3, 4)),
    "mha_block": (lambda r: nn.MHABlock(4, 2, 2, r), lambda r: (2, int(r.integers(1, 4)), 4)),
    "mha_block_proj": (lambda r: nn.MHABlock(4, 1, 3, r), lambda r: (2, 2, 4)),
}


def layer_fd_error(layer, x, upstream, rng, h=1e-4, n_entries=4):
    """Max |analytic - FD| / max(1, |FD|) for loss = sum(upstream * layer(x))."""
    def loss():
        return float((layer.forward(x, train=True) * upstream).sum())

    for p in layer.params.values():
        p.grad[...] = 0
    layer.forward(x, train=True)
    dx = layer.backward(upstream)
    worst = 0.0
    targets = [("x", x, dx)] + [(k, p.value, p.grad.copy()) for k, p in layer.params.items()]
    for _, arr, grad in targets:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for j in rng.choice(flat.size, size=min(n_entries, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + h
            up = loss()
            flat[j] = orig - h
            down = loss()
            flat[j] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[j] - fd) / max(1.0, abs(fd)))
    return worst


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_layer_gradients_finite_difference(kind):
    make, shape_of = LAYER_CASES[kind]
    worst = 0.0
    for case in range(100):
        rng = RNG(1000 + case)
        layer = make(rng)
        for p in layer.params.values():
            p.value[...] += 0.1 * rng.standard_normal(p.value.shape)
        x = rng.standard_normal(shape_of(rng))
        upstream = rng.standard_normal(layer.forward(x).shape)
        worst = max(worst, layer_fd_error(layer, x, upstream, rng))
    assert worst < 1e-4, f"{kind}: {worst}"


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    nn.save_checkpoint(tmp_path / "m.erac", {"hello": 1}, arrays)
    assert (tmp_path / "m.erac").read_bytes()[:4] == b"ERAC"
    header, back = nn.load_checkpoint(tmp_path / "m.erac")
    assert header["hello"] == 1
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_param_store_rejects_duplicates():
    store = nn.ParamStore()
    store.add("a", nn.Param.of(np.zeros(2)))
    with pytest.raises(ConfigError):
        store.add("a", nn.Param.of(np.zeros(2)))
    with pytest.raises(ShapeError):
        store.add("b", nn.Param(np.zeros(2), np.zeros(3)))
