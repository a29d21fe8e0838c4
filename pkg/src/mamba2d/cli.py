"""``m2d`` command line entry point.

Exit codes: 0 ok, 1 verification failure, 2 numeric failure, 3 format
error, 4 usage or domain error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError, FormatError, NumericError
from .scan2d import _SABOTAGE, default_workers

EXIT_OK, EXIT_VERIFY, EXIT_NUMERIC, EXIT_FORMAT, EXIT_USAGE = 0, 1, 2, 3, 4
TEST_HOOKS_ENV = "M2D_TEST_HOOKS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        H, W = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if H < 1 or W < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return H, W


def _pair(cast):
    def parse(text):
        try:
            a, b = (cast(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}") from None
        return a, b
    return parse


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# subcommands

def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_ssm

    if args.sabotage:
        if os.environ.get(TEST_HOOKS_ENV) != "1":
            raise UsageError(f"--sabotage requires {TEST_HOOKS_ENV}=1")
        _SABOTAGE.add(args.sabotage)
    H, W = args.size
    worst_name, worst = None, 0.0
    try:
        for k in range(args.instances):
            seed = args.seed + k
            errs = gradcheck_ssm(H, W, args.channels, args.state, seed, workers=args.workers)
            print(f"instance seed={seed} size={H}x{W} D={args.channels} N={args.state}")
            print(f"  {'parameter':<14} {'max rel err':>12}")
            for name, e in errs.items():
                flag = "" if e <= args.tol else "  FAIL"
                print(f"  {name:<14} {e:12.3e}{flag}")
                if e > worst:
                    worst_name, worst = name, e
    finally:
        _SABOTAGE.discard(args.sabotage)
    if worst > args.tol:
        print(f"FAIL: worst parameter {worst_name} rel err {worst:.3e} > tol {args.tol:g}")
        return EXIT_VERIFY
    print(f"OK: max rel err {worst:.3e} <= tol {args.tol:g}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .verify import run_oracle

    ok, lines = run_oracle(args.cases, args.seed, tuple(args.worker_counts))
    for line in lines if args.verbose or not ok else lines[-1:]:
        print(line)
    if not ok:
        print("FAIL: wavefront and sequential outputs differ")
        return EXIT_VERIFY
    print(f"OK: {args.cases} cases bitwise equal across workers {args.worker_counts}")
    return EXIT_OK


def _run_config(args):
    from .train import RunConfig

    base = RunConfig.from_json(args.config).to_dict() if args.config else RunConfig().to_dict()
    for f in fields(RunConfig):
        val = getattr(args, f"rc_{f.name}", None)
        if val is not None:
            base[f.name] = val
    return RunConfig.from_dict(base)


def _load_data(args, run, split=0):
    from .formats import load_dataset
    from .train import make_synthetic

    if args.data:
        return load_dataset(args.data)
    n = run.n_train if split == 0 else run.n_eval
    return make_synthetic(run.synthetic_spec(), n, split=split)


def cmd_train(args) -> int:
    from .train import evaluate, train_loop

    if not args.data and not args.synthetic:
        raise UsageError("train needs --data DIR or --synthetic")
    run = _run_config(args)
    T.set_default_dtype(run.precision)
    images, labels = _load_data(args, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2), encoding="utf-8")
    log_path = out / "metrics.csv"
    if not args.resume and log_path.exists():
        log_path.unlink()
    result = train_loop(run, images, labels, out_dir=out, resume=args.resume, log_file=log_path)
    print(f"steps: {result.opt_state.step}")
    if result.log_rows:
        print(f"final loss: {result.log_rows[-1].split(',')[1]}")
    print(f"train accuracy: {result.train_accuracy:.4f}")
    if args.synthetic:
        ev_images, ev_labels = _load_data(args, run, split=1)
        print(f"held-out accuracy: {evaluate(result.model, ev_images, ev_labels):.4f}")
    print(f"checkpoint: {out / 'final'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .formats import load_checkpoint, load_dataset
    from .train import RunConfig, evaluate, make_synthetic

    model, _, manifest = load_checkpoint(args.checkpoint, workers=args.workers)
    if args.data:
        images, labels = load_dataset(args.data)
    else:
        rc = manifest.get("run_config") or {}
        run = RunConfig.from_dict(rc) if rc else RunConfig()
        images, labels = make_synthetic(run.synthetic_spec(), run.n_eval, split=1)
    acc = evaluate(model, images, labels)
    print(f"top-1 accuracy: {acc:.4f} ({len(labels)} samples)")
    return EXIT_OK


def _mixer_influence(mixer, x, src, channel, eps=1e-3):
    """|out' - out| / eps through a whole M2D mixer (scan and local branches)."""
    H, W, D = x.shape
    i, j = src
    if not (0 <= i < H and 0 <= j < W and 0 <= channel < D):
        raise DomainError(f"source {src} / channel {channel} outside the {H}x{W}x{D} feature map")
    base = mixer(x[None]).data[0, ..., channel]
    xp = x.copy()
    xp[i, j, channel] += eps
    return np.abs(mixer(xp[None]).data[0, ..., channel] - base) / eps


def cmd_influence(args) -> int:
    """Influence map of the scan (``--constant``) or of a checkpoint's first M2D mixer."""
    from .formats import load_checkpoint, read_array, write_pgm, write_tensor
    from .scan2d import constant_input, influence_map, path_sum_field

    expected = None
    if args.constant is not None:
        H, W = args.size
        a, b = args.constant
        fmap = influence_map(constant_input(H, W, a, b), args.src, args.channel, workers=args.workers)
        expected = path_sum_field(H, W, a, b)
    else:
        if not args.checkpoint or not args.input:
            raise UsageError("influence needs --checkpoint and --input (or --constant a,b)")
        model, _, _ = load_checkpoint(args.checkpoint, workers=args.workers)
        for p in model.named_parameters().values():
            p.data = p.data.astype(np.float64)
        img = read_array(args.input).astype(np.float64)
        if img.ndim != 3:
            raise FormatError(f"{args.input}: expected an H x W x C image")
        mixer = model.stages[0].blocks[0].mixer if model.stages[0].blocks else None
        if not hasattr(mixer, "ssm"):
            raise UsageError("the first stage does not start with an M2D mixer")
        feats = model.stem(img[None]).data[0]
        fmap = _mixer_influence(mixer, feats, args.src, args.channel)
    out = Path(args.out)
    write_pgm(out, fmap)
    tensor_out = Path(args.tensor_out) if args.tensor_out else out.with_suffix(".m2dt")
    write_tensor(tensor_out, fmap)
    print(f"wrote {out} and {tensor_out} ({fmap.shape[0]}x{fmap.shape[1]})")
    if expected is not None:
        i, j = args.src
        ref = np.zeros_like(fmap)
        ref[i:, j:] = expected[: fmap.shape[0] - i, : fmap.shape[1] - j]
        dev = float(np.max(np.abs(fmap - ref)))
        print(f"max deviation from path-sum field: {dev:.3e}")
        if dev > 1e-10:
            return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    report = run_bench(args.sizes, args.worker_counts, args.precision, args.channels,
                       args.state, args.warmup, args.iters, args.seed)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_make_data(args) -> int:
    from .formats import save_dataset
    from .train import SyntheticSpec, make_synthetic

    spec = SyntheticSpec(size=args.image_size, num_classes=args.classes,
                         noise_std=args.noise, seed=args.seed)
    images, labels = make_synthetic(spec, args.n, split=args.split)
    save_dataset(args.out, images, labels)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .train import RunConfig

    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="m2d", description="Mamba2D scan kernel, model and verification tools.",
                formatter_class=fmt)
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (default: $M2D_WORKERS or CPU count)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference check of the scan adjoint", formatter_class=fmt)
    g.add_argument("--size", type=_size, default=(4, 5), help="grid HxW")
    g.add_argument("--channels", type=int, default=2, help="channel count D")
    g.add_argument("--state", type=int, default=3, help="state size N")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=1, help="seeded instances (seed, seed+1, ...)")
    g.add_argument("--tol", type=float, default=1e-5, help="max relative error")
    g.add_argument("--sabotage", default=None, help=f"corrupt a gradient (needs {TEST_HOOKS_ENV}=1)")
    g.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle", help="wavefront vs sequential bitwise equivalence", formatter_class=fmt)
    o.add_argument("--cases", type=int, default=50)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--worker-counts", type=_int_list, default=[1, 2, 4, 8])
    o.add_argument("--verbose", action="store_true")
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("train", help="train on a dataset directory or synthetic data", formatter_class=fmt)
    t.add_argument("--config", default=None, help="run config JSON (defaults: tiny preset)")
    t.add_argument("--data", default=None, help="dataset directory")
    t.add_argument("--synthetic", action="store_true", help="use the synthetic dataset")
    t.add_argument("--out", default="runs/latest", help="output directory")
    t.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    defaults = RunConfig()
    for f in fields(RunConfig):
        dv = getattr(defaults, f.name)
        if isinstance(dv, bool):
            typ = _bool
        elif isinstance(dv, list):
            typ = _int_list if dv and isinstance(dv[0], int) else (lambda s: [v for v in s.split(",") if v])
        else:
            typ = type(dv)
        t.add_argument(f"--{f.name.replace('_', '-')}", dest=f"rc_{f.name}", type=typ, default=None,
                       help=f"override config (default: {dv})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None, help="dataset directory (default: synthetic held-out split)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("influence", help="write an influence map as PGM and tensor file", formatter_class=fmt)
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--input", default=None, help="image tensor file (H x W x C)")
    i.add_argument("--src", type=_pair(int), required=True, help="source cell i,j")
    i.add_argument("--channel", type=int, default=0)
    i.add_argument("--out", required=True, help="PGM output path")
    i.add_argument("--tensor-out", default=None, help="tensor output (default: OUT with .m2dt)")
    i.add_argument("--constant", type=_pair(float), default=None,
                   help="constant-parameter debug mode with step factors a,b")
    i.add_argument("--size", type=_size, default=(8, 8), help="grid size in --constant mode")
    i.set_defaults(func=cmd_influence)

    b = sub.add_parser("bench", help="time sequential vs wavefront scans", formatter_class=fmt)
    b.add_argument("--sizes", type=_int_list, default=[16, 32, 64])
    b.add_argument("--worker-counts", type=_int_list, default=[1, 2, 4])
    b.add_argument("--precision", choices=["f32", "f64"], default="f32")
    b.add_argument("--channels", type=int, default=8)
    b.add_argument("--state", type=int, default=4)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="CSV path (default: stdout)")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("make-data", help="write a synthetic dataset directory", formatter_class=fmt)
    m.add_argument("--out", required=True)
    m.add_argument("--n", type=int, default=512)
    m.add_argument("--classes", type=int, default=4)
    m.add_argument("--image-size", type=int, default=32)
    m.add_argument("--noise", type=float, default=0.1)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--split", type=int, default=0, help="0 train, 1 held-out")
    m.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers is None:
        args.workers = default_workers()
    if args.command in ("gradcheck", "oracle"):
        T.set_default_dtype("f64")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, DomainError, ConfigError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
