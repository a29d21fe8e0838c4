import json
import subprocess
import sys

import numpy as np
import pytest

from mamba2d.scan2d import _SABOTAGE
from mamba2d.cli import main
from mamba2d.formats import read_array, read_pgm, save_dataset, write_tensor

SMALL = ["--depths", "1,1,1,1", "--widths", "8,8,16,16", "--state-size", "2", "--heads", "2",
         "--n-train", "32", "--n-eval", "32", "--batch-size", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gradcheck_default(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and "OK" in out and "W_delta_z" in out


def test_gradcheck_row_case(capsys):
    assert run(capsys, "gradcheck", "--size", "1x8")[0] == 0


def test_sabotage_needs_hook_env(capsys, monkeypatch):
    monkeypatch.delenv("M2D_TEST_HOOKS", raising=False)
    assert run(capsys, "gradcheck", "--sabotage", "dAt")[0] == 4


def test_sabotage_is_caught(capsys, monkeypatch):
    monkeypatch.setenv("M2D_TEST_HOOKS", "1")
    code, out, _ = run(capsys, "gradcheck", "--sabotage", "dAt")
    assert code == 1 and "worst parameter A_t" in out
    assert not _SABOTAGE


def test_oracle(capsys):
    code, out, _ = run(capsys, "oracle", "--cases", "6", "--worker-counts", "1,8", "--verbose")
    assert code == 0 and "case 0: 1x1" in out


def test_train_eval_resume(capsys, tmp_path):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "--workers", "1", "train", "--synthetic", "--out", out_dir,
                       "--steps", "4", "--checkpoint-every", "2", *SMALL)
    assert code == 0 and "held-out accuracy" in out
    rows = (out_dir / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["1", "2", "3", "4"]
    assert json.loads((out_dir / "run_config.json").read_text())["steps"] == 4
    code, out, _ = run(capsys, "eval", "--checkpoint", out_dir / "final")
    assert code == 0 and "top-1 accuracy" in out

    res_dir = tmp_path / "resumed"
    code, _, _ = run(capsys, "--workers", "1", "train", "--synthetic", "--out", res_dir,
                     "--steps", "4", "--resume", out_dir / "step_000002", *SMALL)
    resumed = (res_dir / "metrics.csv").read_text().splitlines()
    strip = lambda rs: [r.rsplit(",", 1)[0] for r in rs]
    assert code == 0 and strip(resumed) == strip(rows[2:])


def test_untrained_eval_near_chance(capsys, tmp_path):
    run(capsys, "train", "--synthetic", "--out", tmp_path, "--steps", "0", *SMALL)
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "final")
    acc = float(out.split(":")[1].split()[0])
    assert code == 0 and abs(acc - 0.25) <= 0.10


def test_train_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 1, "depths": [1, 1, 1, 1], "widths": [8, 8, 16, 16],
                               "state_size": 2, "heads": 2, "n_train": 8, "batch_size": 4}))
    assert run(capsys, "train", "--config", cfg, "--synthetic", "--out", tmp_path / "o")[0] == 0
    cfg.write_text(json.dumps({"stepz": 1}))
    assert run(capsys, "train", "--config", cfg, "--synthetic", "--out", tmp_path / "o")[0] == 4


def test_train_nan_exit_code(capsys, tmp_path):
    save_dataset(tmp_path / "d", np.full((8, 32, 32, 3), np.nan), np.zeros(8))
    code, _, err = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "o",
                       "--mixers", "attention,attention,attention,attention", *SMALL)
    assert code == 2 and "step 1" in err


def test_train_format_error_exit_code(capsys, tmp_path):
    save_dataset(tmp_path / "d", np.zeros((4, 32, 32, 3)), np.zeros(4))
    (tmp_path / "d" / "labels.csv").write_text("0,0\n1,x\n")
    code, _, err = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "o", *SMALL)
    assert code == 3 and "line 2" in err


def test_train_needs_data_source(capsys, tmp_path):
    assert run(capsys, "train", "--out", tmp_path)[0] == 4


def test_influence_constant_mode(capsys, tmp_path):
    code, out, _ = run(capsys, "influence", "--constant", "0.4,0.3", "--src", "1,2",
                       "--size", "6x7", "--out", tmp_path / "m.pgm")
    assert code == 0 and "max deviation" in out
    pgm = read_pgm(tmp_path / "m.pgm")
    assert pgm.shape == (6, 7) and pgm[1, 2] == 255 and not pgm[:1].any() and not pgm[:, :2].any()
    assert read_array(tmp_path / "m.m2dt").shape == (6, 7)


def test_influence_corner_single_pixel(capsys, tmp_path):
    code, _, _ = run(capsys, "influence", "--constant", "0.5,0.5", "--src", "7,7", "--out", tmp_path / "m.pgm")
    pgm = read_pgm(tmp_path / "m.pgm")
    assert code == 0 and np.count_nonzero(pgm) == 1 and pgm[7, 7] == 255


@pytest.mark.parametrize("src", ["8,0", "-1,2"])
def test_influence_out_of_range(capsys, tmp_path, src):
    assert run(capsys, "influence", "--constant", "0.5,0.5", f"--src={src}", "--out", tmp_path / "m.pgm")[0] == 4


def test_influence_checkpoint_halo(capsys, tmp_path):
    run(capsys, "--workers", "1", "train", "--synthetic", "--out", tmp_path, "--steps", "0", *SMALL)
    img = np.random.default_rng(0).standard_normal((32, 32, 3))
    write_tensor(tmp_path / "img.m2dt", img)
    code, _, _ = run(capsys, "influence", "--checkpoint", tmp_path / "final", "--input", tmp_path / "img.m2dt",
                     "--src", "3,4", "--channel", "1", "--out", tmp_path / "m.pgm")
    fmap = read_array(tmp_path / "m.m2dt")
    assert code == 0 and fmap.shape == (8, 8)
    assert not fmap[:2].any() and not fmap[:, :3].any()
    assert fmap[3, 4] > 0 and fmap[7, 7] > 0
    assert run(capsys, "influence", "--checkpoint", tmp_path / "final", "--input", tmp_path / "img.m2dt",
               "--src", "8,0", "--out", tmp_path / "x.pgm")[0] == 4


def test_bench_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--sizes", "8", "--worker-counts", "1,2",
                       "--warmup", "1", "--iters", "2")
    assert code == 0 and "H,W,D,N,workers,variant,median_ms" in out
    run(capsys, "bench", "--sizes", "4", "--iters", "1", "--out", tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().count("\n") > 3


def test_make_data(capsys, tmp_path):
    assert run(capsys, "make-data", "--out", tmp_path, "--n", "8")[0] == 0
    assert read_array(tmp_path / "images.m2dt").shape == (8, 32, 32, 3)


@pytest.mark.parametrize("argv", [["frobnicate"], ["gradcheck", "--size", "0x3"], ["bench", "--sizes", "a"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 4


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "mamba2d", "train", "--help"],
                         capture_output=True, text=True, check=True)
    assert "--weight-decay" in res.stdout and "default: 0.05" in res.stdout
