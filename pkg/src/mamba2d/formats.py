"""On-disk formats: tensor files, dataset directories, checkpoints, PGM maps.

Tensor file layout (all integers little-endian)::

    b"M2DT" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 dims | payload

The payload is row-major little-endian scalars.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"M2DT"
VERSION = 1
CHECKPOINT_VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_array(t) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype.kind == "f" and arr.dtype.itemsize in (4, 8):
        return arr.astype(f"<f{arr.dtype.itemsize}", copy=False)
    raise FormatError(f"dtype {arr.dtype} cannot be stored; use float32 or float64")


def encode_tensor(t) -> bytes:
    arr = _as_array(t)
    code = 0 if arr.dtype.itemsize == 4 else 1
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes, name="<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{name}: truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if code not in _CODES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = _CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != expected:
        raise FormatError(f"{name}: payload length mismatch "
                          f"(expected {expected} bytes, found {len(buf) - end})")
    arr = np.frombuffer(buf, dtype=dtype, offset=end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_array(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


def read_tensor(path) -> Tensor:
    return Tensor(read_array(path))


# datasets

def save_dataset(directory, images, labels) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "images.m2dt", np.asarray(images, dtype=np.float32))
    with open(d / "labels.csv", "w", encoding="utf-8") as f:
        for i, lab in enumerate(np.asarray(labels).tolist()):
            f.write(f"{i},{int(lab)}\n")


def load_dataset(directory):
    """Return (images N x H x W x C float32, labels N int64)."""
    d = Path(directory)
    if not (d / "images.m2dt").exists() or not (d / "labels.csv").exists():
        raise FormatError(f"{d}: expected images.m2dt and labels.csv")
    images = read_array(d / "images.m2dt")
    if images.ndim != 4:
        raise FormatError(f"{d / 'images.m2dt'}: expected rank 4, got {images.ndim}")
    found = {}
    with open(d / "labels.csv", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"labels.csv line {lineno}: expected 'index,label'")
            try:
                idx = int(parts[0])
                lab = int(parts[1])
            except ValueError:
                raise FormatError(f"labels.csv line {lineno}: non-integer field in {line!r}") from None
            if idx in found:
                raise FormatError(f"labels.csv line {lineno}: duplicate index {idx}")
            found[idx] = lab
    n = len(images)
    for i in range(n):
        if i not in found:
            raise FormatError(f"labels.csv: missing row for index {i}")
    if len(found) != n:
        extra = sorted(set(found) - set(range(n)))
        raise FormatError(f"labels.csv: {len(found)} labels for {n} images (extra index {extra[0]})")
    return images, np.array([found[i] for i in range(n)], dtype=np.int64)


# checkpoints

def _fname(name: str) -> str:
    return name.replace("/", "_") + ".m2dt"


def save_checkpoint(directory, model, opt_state=None, step=0, run_config=None) -> Path:
    """Write manifest.json plus one tensor file per parameter / moment."""
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "step": int(step),
        "parameters": {},
        "trainable": {k: bool(p.requires_grad) for k, p in params.items()},
        "optimizer": None,
        "run_config": run_config,
    }
    for name, p in params.items():
        rel = f"params/{_fname(name)}"
        write_tensor(d / rel, p.data)
        manifest["parameters"][name] = rel
    if opt_state is not None:
        (d / "optim").mkdir(exist_ok=True)
        entry = opt_state.hyperparameters()
        entry["m"], entry["v"] = {}, {}
        for name in opt_state.m:
            for key, store in (("m", opt_state.m), ("v", opt_state.v)):
                rel = f"optim/{key}.{_fname(name)}"
                write_tensor(d / rel, store[name])
                entry[key][name] = rel
        manifest["optimizer"] = entry
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{directory}: no manifest.json")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    return manifest


def load_checkpoint(directory, workers=None):
    """Rebuild the model from its embedded config; return (model, opt_state, manifest)."""
    from .nn import Mamba2D, ModelConfig
    from .train import OptimState

    d = Path(directory)
    manifest = read_manifest(d)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    state = {name: read_array(d / rel) for name, rel in manifest["parameters"].items()}
    dtype = next(iter(state.values())).dtype.type if state else np.float64
    model = Mamba2D(cfg, dtype=dtype, workers=workers)
    model.load_state_dict(state)
    for name, p in model.named_parameters().items():
        p.requires_grad = manifest.get("trainable", {}).get(name, True)
    opt = None
    if manifest.get("optimizer"):
        entry = dict(manifest["optimizer"])
        m = {k: read_array(d / rel) for k, rel in entry.pop("m").items()}
        v = {k: read_array(d / rel) for k, rel in entry.pop("v").items()}
        opt = OptimState(m=m, v=v, **entry)
    return model, opt, manifest


def write_pgm(path, image) -> None:
    """Plain-text P2 greymap, linearly scaled from [0, max] to [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM export needs a 2D map")
    peak = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape, dtype=np.int64) if peak <= 0 else \
        np.clip(np.rint(img / peak * 255), 0, 255).astype(np.int64)
    H, W = img.shape
    lines = ["P2", f"{W} {H}", "255"] + [" ".join(map(str, row)) for row in scaled.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text(encoding="ascii").splitlines()
              if not line.startswith("#") for t in line.split()]
    if not tokens or tokens[0] != "P2":
        raise FormatError(f"{path}: not a plain PGM file")
    W, H, _ = map(int, tokens[1:4])
    vals = np.array(list(map(int, tokens[4:])), dtype=np.int64)
    if vals.size != W * H:
        raise FormatError(f"{path}: expected {W * H} pixels, found {vals.size}")
    return vals.reshape(H, W)
