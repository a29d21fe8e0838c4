import math

import numpy as np
import pytest

from mamba2d import tensor as T
from mamba2d.errors import ConfigError
from mamba2d.nn import (
    MLP, Attention, Block, DWSeparableConv, M2DMixer, Mamba2D, ModelConfig, depthwise_conv3x3,
    dw_separable_conv, layer_norm, reference_config, tiny_config,
)
from mamba2d.tensor import Tape, Tensor, backward
from mamba2d.train import cross_entropy
from mamba2d.verify import numeric_grad, rel_error


def gradcheck_module(module, x, rng, tol=1e-5, step=1e-5):
    """Compare tape gradients of sum(w * module(x)) with central differences."""
    x = Tensor(x, requires_grad=True)
    w = rng.standard_normal(module(x).shape)
    module.zero_grad() if hasattr(module, "zero_grad") else None
    with Tape():
        backward((module(x) * w).sum())
    f = lambda: float((module(x).data * w).sum())
    leaves = {"x": x}
    if hasattr(module, "named_parameters"):
        leaves.update(module.named_parameters())
    for name, t in leaves.items():
        fd = numeric_grad(f, t.data, step)
        if name.endswith("k.bias"):
            # a shift shared by all keys cancels in the softmax
            assert np.abs(t.grad).max() <= 1e-12 and np.abs(fd).max() <= 1e-9
            continue
        assert rel_error(t.grad, fd).max() <= tol, name


def liven(ssm, rng):
    """Move step sizes off their tiny initial range so A gradients are well above FD noise."""
    for axis in (ssm.axis_t, ssm.axis_z):
        axis.delta_bias.data[...] = rng.uniform(-1.5, 0.0, axis.delta_bias.shape)
        axis.A.data += 0.1 * rng.standard_normal(axis.A.shape)


def test_layer_norm_constant_vector():
    out = layer_norm(np.full((2, 5), 3.0), np.ones(5), np.full(5, 0.25)).data
    assert np.array_equal(out, np.full((2, 5), 0.25))


def test_layer_norm_statistics(rng):
    out = layer_norm(rng.standard_normal((6, 32)) * 4 + 1, np.ones(32), np.zeros(32)).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-5)


def test_layer_norm_two_pass_oracle(rng):
    x, s, b = rng.standard_normal((3, 7)), rng.standard_normal(7), rng.standard_normal(7)
    expect = np.zeros_like(x)
    for r in range(3):
        mean = sum(x[r]) / 7
        var = sum((v - mean) ** 2 for v in x[r]) / 7
        for c in range(7):
            expect[r, c] = (x[r, c] - mean) / math.sqrt(var + 1e-6) * s[c] + b[c]
    np.testing.assert_allclose(layer_norm(x, s, b).data, expect, rtol=0, atol=1e-10)


def test_layer_norm_gradcheck(rng):
    x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    s = Tensor(rng.standard_normal(5), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    w = rng.standard_normal((2, 3, 5))
    with Tape():
        backward((layer_norm(x, s, b) * w).sum())
    f = lambda: float((layer_norm(x, s, b).data * w).sum())
    for t in (x, s, b):
        assert rel_error(t.grad, numeric_grad(f, t.data)).max() <= 1e-5


def test_mlp_zero_weights_gives_bias(rng):
    m = MLP(3, rng, np.float64)
    m.fc1.weight.data[...] = 0
    m.fc2.weight.data[...] = 0
    m.fc2.bias.data[...] = [1.0, -2.0, 0.5]
    out = m(rng.standard_normal((4, 3))).data
    assert np.array_equal(out, np.tile([1.0, -2.0, 0.5], (4, 1)))
    assert T.gelu(Tensor(0.0)).item() == 0.0


def test_mlp_hidden_width_and_gradcheck(rng):
    m = MLP(3, rng, np.float64)
    assert m.fc1.weight.shape == (3, 12)
    gradcheck_module(m, rng.standard_normal((2, 3)), rng)


def naive_conv(x, k, b, pw, pb):
    H, W, C = x.shape
    dw = np.zeros((H, W, C))
    for i in range(H):
        for j in range(W):
            for c in range(C):
                acc = b[c]
                for u in range(3):
                    for v in range(3):
                        ii, jj = i + u - 1, j + v - 1
                        if 0 <= ii < H and 0 <= jj < W:
                            acc += x[ii, jj, c] * k[u, v, c]
                dw[i, j, c] = acc
    out = np.zeros((H, W, pw.shape[1]))
    for i in range(H):
        for j in range(W):
            for o in range(pw.shape[1]):
                out[i, j, o] = pb[o] + sum(dw[i, j, c] * pw[c, o] for c in range(C))
    return out


def test_dwconv_identity_kernel(rng):
    k = np.zeros((3, 3, 4))
    k[1, 1] = 1
    x = rng.standard_normal((1, 5, 6, 4))
    out = dw_separable_conv(x, k, np.zeros(4), np.eye(4), np.zeros(4)).data
    assert np.array_equal(out, x)


def test_dwconv_padding_arithmetic():
    out = depthwise_conv3x3(np.full((1, 4, 5, 1), 2.0), np.ones((3, 3, 1)), np.zeros(1)).data[0, ..., 0]
    assert out[0, 0] == 8 and out[3, 4] == 8 and out[0, 2] == 12 and out[1, 2] == 18


def test_dwconv_naive_oracle(rng):
    x = rng.standard_normal((5, 4, 3))
    k, b = rng.standard_normal((3, 3, 3)), rng.standard_normal(3)
    pw, pb = rng.standard_normal((3, 2)), rng.standard_normal(2)
    got = dw_separable_conv(x[None], k, b, pw, pb).data[0]
    np.testing.assert_allclose(got, naive_conv(x, k, b, pw, pb), rtol=0, atol=1e-10)


def test_dwconv_gradcheck(rng):
    gradcheck_module(DWSeparableConv(3, rng, np.float64), rng.standard_normal((2, 4, 5, 3)), rng)


def test_attention_single_token(rng):
    a = Attention(4, 2, rng, np.float64)
    x = rng.standard_normal((1, 1, 1, 4))
    v = a.v(x.reshape(1, 1, 4)).data
    np.testing.assert_allclose(a(x).data.reshape(4), (v @ a.proj.weight.data + a.proj.bias.data).reshape(4), atol=1e-14)


def test_attention_rows_sum_to_one(rng):
    a = Attention(8, 2, rng, np.float64)
    w = a.attention_weights(Tensor(rng.standard_normal((2, 9, 8)))).data
    np.testing.assert_allclose(w.sum(-1), 1, atol=1e-6)


def test_attention_naive_oracle(rng):
    a = Attention(3, 1, rng, np.float64)
    for lin in (a.q, a.k, a.v, a.proj):
        lin.bias.data[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 3))
    tok = x.reshape(4, 3)
    q = tok @ a.q.weight.data + a.q.bias.data
    k = tok @ a.k.weight.data + a.k.bias.data
    v = tok @ a.v.weight.data + a.v.bias.data
    out = np.zeros((4, 3))
    for i in range(4):
        s = [sum(q[i, c] * k[j, c] for c in range(3)) / math.sqrt(3) for j in range(4)]
        e = [math.exp(t - max(s)) for t in s]
        p = [t / sum(e) for t in e]
        out[i] = sum(p[j] * v[j] for j in range(4))
    expect = out @ a.proj.weight.data + a.proj.bias.data
    np.testing.assert_allclose(a(x[None]).data.reshape(4, 3), expect, rtol=0, atol=1e-10)


def test_attention_head_divisibility(rng):
    with pytest.raises(ConfigError):
        Attention(6, 4, rng, np.float64)


def test_attention_gradcheck(rng):
    gradcheck_module(Attention(4, 2, rng, np.float64), rng.standard_normal((1, 2, 3, 4)), rng)


def test_mixer_local_passthrough(rng):
    m = M2DMixer(3, 2, rng, np.float64, workers=1)
    for axis in (m.ssm.axis_t, m.ssm.axis_z):
        axis.W_B.data[...] = 0
        axis.W_C.data[...] = 0
    m.local.dw_kernel.data[...] = 0
    m.local.dw_kernel.data[1, 1] = 1
    m.local.pw.weight.data[...] = np.eye(3)
    m.out.weight.data[...] = np.eye(3)
    x = rng.standard_normal((1, 4, 4, 3))
    np.testing.assert_allclose(m(x).data, x + m.ssm.D_skip.data * x, atol=1e-15)
    m.ssm.D_skip.data[...] = 0
    np.testing.assert_allclose(m(x).data, x, atol=1e-15)


def test_mixer_receptive_field(rng):
    m = M2DMixer(2, 3, rng, np.float64, workers=1)
    x = rng.standard_normal((1, 6, 6, 2))
    base = m(x).data[0]
    i, j = 3, 2
    x2 = x.copy()
    x2[0, i, j] += 0.5
    diff = np.any(m(x2).data[0] != base, axis=-1)
    allowed = np.zeros((6, 6), bool)
    allowed[i - 1:, j - 1:] = True
    assert not np.any(diff & ~allowed)
    assert diff[i - 1, j] and diff[5, 5]


def test_mixer_gradcheck(rng):
    m = M2DMixer(4, 2, rng, np.float64, workers=1)
    liven(m.ssm, rng)
    gradcheck_module(m, rng.standard_normal((1, 4, 4, 4)), rng)


def test_mixer_channel_mismatch(rng):
    with pytest.raises(ConfigError):
        M2DMixer(4, 2, rng, np.float64)(np.zeros((1, 2, 2, 3)))


def test_block_pure_residual(rng):
    b = Block(4, "m2d", tiny_config(), rng, np.float64, workers=1)
    b.mixer.out.weight.data[...] = 0
    b.mlp.fc2.weight.data[...] = 0
    x = rng.standard_normal((1, 3, 3, 4))
    assert np.array_equal(b(x).data, x)


@pytest.mark.parametrize("mixer", ["m2d", "attention"])
def test_block_residual_gradient(mixer, rng):
    b = Block(4, mixer, tiny_config(), rng, np.float64, workers=1)
    target = b.mixer.out if mixer == "m2d" else b.mixer.proj
    target.weight.data[...] = 0
    b.mlp.fc2.weight.data[...] = 0
    x = Tensor(rng.standard_normal((1, 3, 3, 4)), requires_grad=True)
    v = rng.standard_normal((1, 3, 3, 4))
    with Tape():
        y = b(x)
        assert y.shape == x.shape
        backward((y * v).sum())
    np.testing.assert_allclose(x.grad, v, atol=1e-15)


def test_block_gradcheck(rng):
    b = Block(4, "m2d", tiny_config(heads=2), rng, np.float64, workers=1)
    liven(b.mixer.ssm, rng)
    gradcheck_module(b, rng.standard_normal((1, 3, 4, 4)), rng)


def test_stage_shapes():
    model = Mamba2D(tiny_config(), seed=0, workers=1)
    feats = model.features(np.zeros((1, 32, 32, 3)))
    assert [f.shape[1:] for f in feats] == [(8, 8, 16), (4, 4, 32), (2, 2, 64), (1, 1, 128)]
    assert model(np.zeros((32, 32, 3))).shape == (4,)
    assert model(np.zeros((3, 32, 32, 3))).shape == (3, 4)


def test_indivisible_input():
    with pytest.raises(ConfigError):
        Mamba2D(tiny_config(), workers=1)(np.zeros((1, 48, 40, 3)))


def test_batch_permutation(rng):
    model = Mamba2D(tiny_config(), seed=3, workers=1)
    x = rng.standard_normal((4, 32, 32, 3))
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(model(x[perm]).data, model(x).data[perm], rtol=0, atol=1e-12)


def test_forward_deterministic_across_workers(rng):
    x = rng.standard_normal((2, 32, 32, 3))
    outs = [Mamba2D(tiny_config(), seed=5, workers=w)(x).data.tobytes() for w in (1, 1, 4, 8)]
    assert len(set(outs)) == 1


def test_reference_parameter_count():
    with T.precision("f32"):
        model = Mamba2D(reference_config(), seed=0)
    assert 25_000_000 <= model.num_parameters() <= 29_000_000


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(widths=[64, 128, 320, 500])
    with pytest.raises(ConfigError):
        ModelConfig(mixers=["m2d", "m2d", "conv", "attention"])
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"depth": [1, 1, 1, 1]})
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_state_dict_roundtrip():
    a, b = Mamba2D(tiny_config(), seed=1), Mamba2D(tiny_config(), seed=2)
    b.load_state_dict(a.state_dict())
    x = np.ones((1, 32, 32, 3))
    assert np.array_equal(a(x).data, b(x).data)


def test_end_to_end_gradcheck():
    cfg = ModelConfig(depths=[1, 1, 1, 1], widths=[4, 4, 8, 8], state_size=2, heads=2,
                      num_classes=3, input_size=[32, 32, 3])
    model = Mamba2D(cfg, seed=1, workers=1)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 32, 32, 3)), np.array([0, 2])
    with Tape():
        backward(cross_entropy(model(x), y))
    loss = lambda: float(cross_entropy(model(x), y).data)
    worst = {}
    for name, p in model.named_parameters().items():
        fd = numeric_grad(loss, p.data, 1e-4)
        if name.endswith("k.bias"):
            assert np.abs(p.grad).max() <= 1e-12 and np.abs(fd).max() <= 1e-9
            continue
        worst[name] = rel_error(p.grad, fd).max()
    assert max(worst.values()) <= 1e-4, max(worst.items(), key=lambda kv: kv[1])
