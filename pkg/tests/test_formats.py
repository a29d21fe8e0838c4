import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mamba2d.errors import ConfigError, FormatError
from mamba2d.formats import (
    decode_tensor, encode_tensor, load_checkpoint, load_dataset, read_array, read_manifest,
    read_pgm, read_tensor, save_checkpoint, save_dataset, write_pgm, write_tensor,
)
from mamba2d.nn import Mamba2D, tiny_config
from mamba2d.train import OptimState, SyntheticSpec, make_synthetic


def test_roundtrip_f32(tmp_path, rng):
    t = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "t.m2dt", t)
    back = read_tensor(tmp_path / "t.m2dt").data
    assert back.dtype == np.float32 and back.tobytes() == t.tobytes()


def test_scalar_roundtrip():
    back = decode_tensor(encode_tensor(np.float64(2.5)))
    assert back.shape == () and back == 2.5


def test_header_bytes():
    buf = encode_tensor(np.zeros((2, 3), np.float64))
    assert buf[:4] == b"M2DT"
    assert struct.unpack("<HBB", buf[4:8]) == (1, 1, 2)
    assert struct.unpack("<2I", buf[8:16]) == (2, 3)
    assert len(buf) == 16 + 6 * 8


def test_little_endian_payload():
    buf = encode_tensor(np.array([1.0], np.float32))
    assert buf[-4:] == struct.pack("<f", 1.0)
    # a big-endian source array is stored little-endian too
    assert encode_tensor(np.array([1.0], dtype=">f4")) == buf


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_roundtrip_property(arr):
    back = decode_tensor(encode_tensor(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b[:-1], "payload length mismatch"),
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "unsupported version"),
    (lambda b: b[:6] + bytes([7]) + b[7:], "unknown dtype code"),
    (lambda b: b[:5], "truncated header"),
    (lambda b: b[:10], "truncated dims"),
])
def test_corrupt_files(mutate, msg):
    buf = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError, match=msg):
        decode_tensor(mutate(buf))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_tensor(np.ones(3, dtype=np.int32))


def test_dataset_roundtrip(tmp_path):
    x, y = make_synthetic(SyntheticSpec(seed=3), 12)
    save_dataset(tmp_path, x, y)
    assert (tmp_path / "labels.csv").read_text().splitlines()[:2] == ["0,0", "1,1"]
    x2, y2 = load_dataset(tmp_path)
    assert x2.tobytes() == x.tobytes() and np.array_equal(y2, y)


def test_dataset_missing_row(tmp_path):
    save_dataset(tmp_path, np.zeros((3, 2, 2, 1)), [0, 1, 2])
    (tmp_path / "labels.csv").write_text("0,0\n2,2\n")
    with pytest.raises(FormatError, match="index 1"):
        load_dataset(tmp_path)


def test_dataset_non_integer_label(tmp_path):
    save_dataset(tmp_path, np.zeros((2, 2, 2, 1)), [0, 1])
    (tmp_path / "labels.csv").write_text("0,0\n1,cat\n")
    with pytest.raises(FormatError, match="line 2"):
        load_dataset(tmp_path)


def test_dataset_count_mismatch(tmp_path):
    save_dataset(tmp_path, np.zeros((2, 2, 2, 1)), [0, 1])
    (tmp_path / "labels.csv").write_text("0,0\n1,1\n2,0\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_checkpoint_forward_bitwise(tmp_path, rng):
    model = Mamba2D(tiny_config(train_A=False), seed=4, workers=1)
    opt = OptimState(step=3, m={"stem.norm.scale": np.ones(16)}, v={"stem.norm.scale": np.full(16, 2.0)})
    save_checkpoint(tmp_path, model, opt, step=3)
    x = rng.standard_normal((2, 32, 32, 3))
    loaded, opt2, manifest = load_checkpoint(tmp_path, workers=1)
    assert loaded(x).data.tobytes() == model(x).data.tobytes()
    assert set(manifest["parameters"]) == set(model.named_parameters())
    assert opt2.step == 3 and np.array_equal(opt2.v["stem.norm.scale"], np.full(16, 2.0))
    assert not loaded.stages[0].blocks[0].mixer.ssm.axis_t.A.requires_grad


def test_checkpoint_manifest_errors(tmp_path):
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
    save_checkpoint(tmp_path, Mamba2D(tiny_config(), seed=0))
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
    m["format_version"] = 1
    m["model_config"]["colour"] = 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path)


def test_pgm_roundtrip(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    write_pgm(tmp_path / "m.pgm", img)
    lines = (tmp_path / "m.pgm").read_text().splitlines()
    assert lines[:3] == ["P2", "2 2", "255"]
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 64], [128, 255]])


def test_pgm_all_zero(tmp_path):
    write_pgm(tmp_path / "z.pgm", np.zeros((3, 2)))
    assert np.array_equal(read_pgm(tmp_path / "z.pgm"), np.zeros((3, 2)))


def test_read_array_reports_path(tmp_path):
    (tmp_path / "bad.m2dt").write_bytes(b"nope1234")
    with pytest.raises(FormatError, match="bad.m2dt"):
        read_array(tmp_path / "bad.m2dt")
