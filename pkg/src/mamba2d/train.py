"""Desk-scale training: loss, optimizer, synthetic data, augmentation, loops."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, NumericError
from .nn import Mamba2D, ModelConfig
from .tensor import Tape, record

log = logging.getLogger(__name__)


def cross_entropy(logits, labels):
    """Mean negative log-softmax at ``labels``; logits are (B, K) or (K,)."""
    logits = T.as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, K = z.shape
    if labels.shape != (B,):
        raise DomainError(f"expected {B} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise DomainError(f"labels must lie in [0, {K})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = (lse - shifted[rows, labels]).mean()

    def rule(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        grad = p * (g / B)
        return (grad[0] if single else grad,)

    return record(np.asarray(loss, dtype=z.dtype), (logits,), rule)


@dataclass
class OptimState:
    lr: float = 4e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self):
        return {k: getattr(self, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")}


def adamw_step(params: dict, grads: dict, s: OptimState, lr=None) -> OptimState:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied first (p <- p * (1 - lr*wd)), then the Adam delta.
    ``params`` maps names to Tensors, whose ``data`` is replaced.
    """
    lr = s.lr if lr is None else lr
    s.step += 1
    c1 = 1 - s.beta1 ** s.step
    c2 = 1 - s.beta2 ** s.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = s.m.get(name)
        v = s.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = s.beta1 * m + (1 - s.beta1) * g
        v = s.beta2 * v + (1 - s.beta2) * (g * g)
        s.m[name], s.v[name] = m, v
        decayed = p.data * (1 - lr * s.weight_decay)
        p.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
    return s


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


# synthetic data

def _patterns(size):
    i, j = np.mgrid[0:size, 0:size]
    sq = lambda v, p: np.where((v // (p // 2)) % 2 == 0, 1.0, -1.0)
    return [
        sq(i, 8),                       # horizontal bars
        sq(j, 8),                       # vertical bars
        sq(i, 8) * sq(j, 8),            # checkerboard, 4-pixel cells
        sq(i, 16) * sq(j, 16),          # checkerboard, 8-pixel cells
        sq(i, 16),                      # wide horizontal bars
        sq(j, 16),                      # wide vertical bars
    ]


@dataclass
class SyntheticSpec:
    size: int = 32
    channels: int = 3
    num_classes: int = 4
    noise_std: float = 0.1
    amplitude: float = 0.5
    seed: int = 0


def make_synthetic(spec: SyntheticSpec, n: int, split: int = 0):
    """Seeded images of class-specific zero-mean periodic patterns plus noise.

    Labels are balanced round-robin. ``split`` selects an independent noise
    stream (0 train, 1 held-out).
    """
    if n < 1:
        raise DomainError("need at least one sample")
    if spec.size % 16:
        raise ConfigError("synthetic image size must be a multiple of 16")
    pats = _patterns(spec.size)
    if not 1 <= spec.num_classes <= len(pats):
        raise ConfigError(f"num_classes must be in [1, {len(pats)}]")
    rng = np.random.default_rng([spec.seed, split])
    labels = np.arange(n) % spec.num_classes
    base = np.stack([pats[k] for k in labels])[..., None] * spec.amplitude
    images = np.repeat(base, spec.channels, axis=-1)
    images = images + rng.normal(0.0, 1.0, images.shape) * spec.noise_std
    return images.astype(np.float32), labels.astype(np.int64)


def augment(images, rng, crop=True, hflip=True, pad=4):
    """Random translation (zero-padded crop) and horizontal flip, per sample."""
    out = np.array(images, copy=True)
    B, H, W, _ = out.shape
    if crop:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
        for b in range(B):
            r, c = offs[b]
            out[b] = padded[b, r:r + H, c:c + W]
    if hflip:
        flip = rng.random(B) < 0.5
        out[flip] = out[flip, :, ::-1]
    return out


# run configuration

@dataclass
class RunConfig:
    """Model config fields plus training hyperparameters, kept flat for flags."""
    depths: list = field(default_factory=lambda: [1, 1, 2, 1])
    widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    mixers: list = field(default_factory=lambda: ["m2d", "m2d", "attention", "attention"])
    state_size: int = 4
    heads: int = 4
    num_classes: int = 4
    input_size: list = field(default_factory=lambda: [32, 32, 3])
    shared_C: bool = True
    train_A: bool = True
    lr: float = 2e-3
    weight_decay: float = 0.05
    steps: int = 200
    batch_size: int = 32
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0
    precision: str = "f32"
    workers: int = 0
    augment: list = field(default_factory=lambda: ["crop", "hflip"])
    n_train: int = 512
    n_eval: int = 256
    noise_std: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        bad = set(self.augment) - {"crop", "hflip"}
        if bad:
            raise ConfigError(f"unknown augmentations {sorted(bad)}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        names = ModelConfig.__dataclass_fields__
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def synthetic_spec(self) -> SyntheticSpec:
        H, W, C = self.input_size
        if H != W:
            raise ConfigError("synthetic data needs square inputs")
        return SyntheticSpec(size=H, channels=C, num_classes=self.num_classes,
                             noise_std=self.noise_std, seed=self.seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)


def lr_at(step: int, run: RunConfig) -> float:
    """Linear warmup over the first warmup_frac of steps, then constant."""
    warm = max(1, round(run.warmup_frac * run.steps))
    return run.lr * min(1.0, step / warm)


def evaluate(model, images, labels, batch=64) -> float:
    if len(images) == 0:
        raise DomainError("empty evaluation set")
    dtype = model.stem.proj.weight.dtype
    correct = 0
    for s in range(0, len(images), batch):
        logits = model(images[s:s + batch].astype(dtype, copy=False)).data
        correct += int(np.sum(logits.argmax(axis=-1) == labels[s:s + batch]))
    return correct / len(images)


@dataclass
class TrainResult:
    model: Mamba2D
    opt_state: OptimState
    log_rows: list
    train_accuracy: float | None = None


def format_row(step, loss, acc, lr, ms) -> str:
    return f"{step},{loss!r},{acc!r},{lr!r},{ms:.3f}"


def train_loop(run: RunConfig, images, labels, out_dir=None, resume=None,
               log_file=None, evaluate_train=True) -> TrainResult:
    """Forward, loss, backward, clip, AdamW; one seeded minibatch per step.

    The minibatch and augmentation for step ``k`` draw from
    ``default_rng([seed, k])`` so a resumed run replays the same data.
    """
    from .formats import load_checkpoint, save_checkpoint

    if len(images) == 0:
        raise DomainError("training data is empty")
    dtype = np.float32 if run.precision == "f32" else np.float64
    workers = run.workers or None
    if resume is not None:
        model, opt, _ = load_checkpoint(resume, workers=workers)
        opt = opt or OptimState(lr=run.lr, weight_decay=run.weight_decay)
    else:
        model = Mamba2D(run.model_config(), seed=run.seed, dtype=dtype, workers=workers)
        opt = OptimState(lr=run.lr, weight_decay=run.weight_decay)
    images = np.asarray(images, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)
    params = {k: p for k, p in model.named_parameters().items() if p.requires_grad}
    rows = []
    out_dir = Path(out_dir) if out_dir else None
    logf = open(log_file, "a", encoding="utf-8") if log_file else None
    t0 = time.perf_counter()
    try:
        for step in range(opt.step + 1, run.steps + 1):
            rng = np.random.default_rng([run.seed, step])
            idx = rng.choice(len(images), size=min(run.batch_size, len(images)), replace=False)
            xb = augment(images[idx], rng, crop="crop" in run.augment, hflip="hflip" in run.augment)
            yb = labels[idx]
            model.zero_grad()
            with Tape():
                logits = model(xb)
                loss = cross_entropy(logits, yb)
                T.backward(loss)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(f"non-finite loss at step {step}")
            grads = {k: p.grad for k, p in params.items()}
            clip_global_norm(grads, run.clip_norm)
            lr = lr_at(step, run)
            adamw_step(params, grads, opt, lr=lr)
            acc = float(np.mean(logits.data.argmax(axis=-1) == yb))
            row = format_row(step, loss_val, acc, lr, (time.perf_counter() - t0) * 1e3)
            rows.append(row)
            if logf:
                logf.write(row + "\n")
                logf.flush()
            if out_dir and run.checkpoint_every and step % run.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step_{step:06d}", model, opt, step, run.to_dict())
            log.debug(row)
    finally:
        if logf:
            logf.close()
    if out_dir:
        save_checkpoint(out_dir / "final", model, opt, opt.step, run.to_dict())
    train_acc = evaluate(model, images, labels) if evaluate_train else None
    return TrainResult(model, opt, rows, train_acc)
