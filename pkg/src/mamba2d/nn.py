"""Layers and the hierarchical hybrid Mamba2D classifier.

Feature maps are channels-last: (B, H, W, C).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .params import M2DParams, init_m2d_params, selective_project
from .scan2d import scan2d
from .tensor import Tensor, record

MIXERS = ("m2d", "attention")


@dataclass
class ModelConfig:
    depths: list = field(default_factory=lambda: [3, 3, 9, 3])
    widths: list = field(default_factory=lambda: [64, 128, 320, 512])
    mixers: list = field(default_factory=lambda: ["m2d", "m2d", "attention", "attention"])
    state_size: int = 16
    heads: int = 8
    num_classes: int = 1000
    input_size: list = field(default_factory=lambda: [224, 224, 3])
    shared_C: bool = True
    train_A: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("depths", "widths", "mixers"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {getattr(self, name)}")
        for w, m in zip(self.widths, self.mixers):
            if m not in MIXERS:
                raise ConfigError(f"unknown mixer {m!r}")
            if m == "attention" and w % self.heads:
                raise ConfigError(f"width {w} not divisible by {self.heads} heads")
        if self.state_size < 1 or self.num_classes < 1 or min(self.depths) < 0:
            raise ConfigError("state_size, num_classes must be >= 1 and depths >= 0")
        if len(self.input_size) != 3:
            raise ConfigError("input_size is [H, W, C_in]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def reference_config(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def tiny_config(**kw) -> ModelConfig:
    base = dict(depths=[1, 1, 2, 1], widths=[16, 32, 64, 128], state_size=4, heads=4,
                num_classes=4, input_size=[32, 32, 3])
    base.update(kw)
    return ModelConfig(**base)


class Module:
    """Attribute-based parameter container.

    Tensors, modules, lists of modules and :class:`M2DParams` stored as
    public attributes are discovered in insertion order.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, M2DParams):
                out.update({f"{key}.{k}": v for k, v in val.named_tensors().items()})
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def num_parameters(self, trainable_only=False) -> int:
        params = self.named_parameters().values()
        return int(sum(p.size for p in params if p.requires_grad or not trainable_only))

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self):
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, dtype, bias=True):
        bound = 1 / math.sqrt(fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (fan_in, fan_out)), dtype)
        if bias:
            self.bias = _param(np.zeros(fan_out), dtype)
        else:
            self.bias = None

    def __call__(self, x):
        y = T.as_tensor(x) @ self.weight
        return y if self.bias is None else y + self.bias


def layer_norm(x, scale, bias, eps=1e-6):
    """Normalize over the last axis, then scale and shift."""
    x, scale, bias = T.as_tensor(x), T.as_tensor(scale), T.as_tensor(bias)
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    s = scale.data

    def rule(g):
        gx = g * s
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, g * xhat, g

    return record(xhat * s + bias.data, (x, scale, bias), rule)


class LayerNorm(Module):
    def __init__(self, dim, dtype):
        self.scale = _param(np.ones(dim), dtype)
        self.bias = _param(np.zeros(dim), dtype)

    def __call__(self, x):
        return layer_norm(x, self.scale, self.bias)


class MLP(Module):
    """Linear(C -> ratio*C), GELU, Linear(ratio*C -> C_out)."""

    def __init__(self, dim, rng, dtype, ratio=4, out_dim=None):
        self.fc1 = Linear(dim, ratio * dim, rng, dtype)
        self.fc2 = Linear(ratio * dim, out_dim or dim, rng, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def depthwise_conv3x3(x, kernel, bias):
    """Per-channel 3x3 convolution, stride 1, zero padding 1. x is (B, H, W, C)."""
    x, kernel, bias = T.as_tensor(x), T.as_tensor(kernel), T.as_tensor(bias)
    if x.ndim != 4 or kernel.shape != (3, 3, x.shape[-1]):
        raise DimensionError(f"bad depthwise operands {x.shape}, {kernel.shape}")
    _, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    K = kernel.data
    out = np.zeros_like(x.data)
    for u in range(3):
        for v in range(3):
            out += xp[:, u:u + H, v:v + W] * K[u, v]

    def rule(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(K)
        for u in range(3):
            for v in range(3):
                gp[:, u:u + H, v:v + W] += g * K[u, v]
                gk[u, v] = (g * xp[:, u:u + H, v:v + W]).sum(axis=(0, 1, 2))
        return gp[:, 1:-1, 1:-1], gk, g

    return record(out + bias.data, (x, kernel, bias), rule)


class DWSeparableConv(Module):
    def __init__(self, dim, rng, dtype):
        self.dw_kernel = _param(rng.uniform(-1 / 3, 1 / 3, (3, 3, dim)), dtype)
        self.dw_bias = _param(np.zeros(dim), dtype)
        self.pw = Linear(dim, dim, rng, dtype)

    def __call__(self, x):
        return self.pw(depthwise_conv3x3(x, self.dw_kernel, self.dw_bias))


def dw_separable_conv(x, dw_kernel, dw_bias, pw_weight, pw_bias):
    return depthwise_conv3x3(x, dw_kernel, dw_bias) @ pw_weight + pw_bias


class Attention(Module):
    """Multi-head self-attention over all H*W positions, no positional encoding."""

    def __init__(self, dim, heads, rng, dtype):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def attention_weights(self, tokens):
        B, L, C = tokens.shape
        dh = C // self.heads
        q = self._split(self.q(tokens), B, L, dh)
        k = self._split(self.k(tokens), B, L, dh)
        return T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1 / math.sqrt(dh)), axis=-1)

    def _split(self, t, B, L, dh):
        return t.reshape(B, L, self.heads, dh).transpose(0, 2, 1, 3)

    def __call__(self, x):
        x = T.as_tensor(x)
        B, H, W, C = x.shape
        tokens = x.reshape(B, H * W, C)
        att = self.attention_weights(tokens)
        v = self._split(self.v(tokens), B, H * W, C // self.heads)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, H * W, C)
        return self.proj(out).reshape(B, H, W, C)


class M2DMixer(Module):
    """Selective 2D scan in parallel with a depthwise-separable local path.

    The two branches are summed and passed through an output projection;
    there is no gating branch.
    """

    def __init__(self, dim, state_size, rng, dtype, shared_C=True, train_A=True, workers=None):
        self.ssm = init_m2d_params(dim, state_size, rng, dtype, shared_C=shared_C, train_A=train_A)
        self.local = DWSeparableConv(dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)
        self._workers = workers

    def scan_branch(self, x):
        p = self.ssm
        field = selective_project(x, p)
        return scan2d(x, field, p.axis_t.A, p.axis_z.A, p.D_skip, self._workers)

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.shape[-1] != self.ssm.channels:
            raise ConfigError(f"mixer expects {self.ssm.channels} channels, got {x.shape[-1]}")
        return self.out(self.scan_branch(x) + self.local(x))


class Block(Module):
    """Pre-norm residual block: x + Mixer(Norm(x)), then + MLP(Norm(.))."""

    def __init__(self, dim, mixer, cfg, rng, dtype, workers=None):
        self.norm1 = LayerNorm(dim, dtype)
        if mixer == "m2d":
            self.mixer = M2DMixer(dim, cfg.state_size, rng, dtype, cfg.shared_C, cfg.train_A, workers)
        elif mixer == "attention":
            self.mixer = Attention(dim, cfg.heads, rng, dtype)
        else:
            raise ConfigError(f"unknown mixer {mixer!r}")
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, rng, dtype)

    def __call__(self, x):
        x = x + self.mixer(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def patchify(x, p):
    """(B, H, W, C) -> (B, H/p, W/p, p*p*C) non-overlapping patches."""
    B, H, W, C = x.shape
    return (x.reshape(B, H // p, p, W // p, p, C)
             .transpose(0, 1, 3, 2, 4, 5)
             .reshape(B, H // p, W // p, p * p * C))


class PatchConv(Module):
    """Stride-p, kernel-p convolution followed by LayerNorm."""

    def __init__(self, c_in, c_out, p, rng, dtype):
        self.p = p
        self.proj = Linear(p * p * c_in, c_out, rng, dtype)
        self.norm = LayerNorm(c_out, dtype)

    def __call__(self, x):
        return self.norm(self.proj(patchify(x, self.p)))


class Mamba2D(Module):
    """Stem, four stages with downsampling between them, pooled MLP head."""

    def __init__(self, cfg: ModelConfig, seed=0, dtype=None, workers=None):
        dtype = dtype or T.get_default_dtype()
        rng = np.random.default_rng(seed)
        self.config = cfg
        c_in = cfg.input_size[2]
        w = cfg.widths
        self.stem = PatchConv(c_in, w[0], 4, rng, dtype)
        self.downs = [PatchConv(w[s - 1], w[s], 2, rng, dtype) for s in (1, 2, 3)]
        self.stages = [_Stage([Block(w[s], cfg.mixers[s], cfg, rng, dtype, workers)
                               for _ in range(cfg.depths[s])]) for s in range(4)]
        self.head_norm = LayerNorm(w[3], dtype)
        self.head = MLP(w[3], rng, dtype, out_dim=cfg.num_classes)

    def features(self, img):
        x = T.as_tensor(img)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        H, W = x.shape[1:3]
        if H % 32 or W % 32:
            raise ConfigError(f"input {H}x{W} is not divisible by 32")
        if x.shape[-1] != self.config.input_size[2]:
            raise ConfigError(f"expected {self.config.input_size[2]} input channels, got {x.shape[-1]}")
        stage_outputs = []
        x = self.stem(x)
        for s in range(4):
            if s:
                x = self.downs[s - 1](x)
            x = self.stages[s](x)
            stage_outputs.append(x)
        return stage_outputs

    def __call__(self, img):
        unbatched = T.as_tensor(img).ndim == 3
        x = self.features(img)[-1]
        pooled = x.mean(axis=(1, 2))
        logits = self.head(self.head_norm(pooled))
        return logits.reshape(logits.shape[-1]) if unbatched else logits


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def forward_model(img, cfg: ModelConfig, weights=None, workers=None):
    """Build a model from ``cfg``, optionally load ``weights``, return logits."""
    model = Mamba2D(cfg, workers=workers)
    if weights is not None:
        model.load_state_dict(weights)
    return model(img)
