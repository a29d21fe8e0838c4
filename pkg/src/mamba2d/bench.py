"""Timing harness for the sequential and wavefront scans."""
from __future__ import annotations

import io
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .params import hippo_init
from .scan2d import Scan2DInput, scan2d_sequential, scan2d_wavefront_forward

COLUMNS = ("H", "W", "D", "N", "workers", "variant", "median_ms", "p10_ms", "p90_ms", "checksum")


class ChecksumMismatch(ContractError):
    """Variants of one case disagree, so its timings are meaningless."""


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    env: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.env.items():
            buf.write(f"# {k}={v}\n")
        buf.write(",".join(COLUMNS) + "\n")
        for r in self.rows:
            buf.write(",".join(_fmt(r[c]) for c in COLUMNS) + "\n")
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def bench_input(H, W, D, N, seed=0, dtype=np.float32) -> Scan2DInput:
    rng = np.random.default_rng([seed, H, W, D, N])
    A = np.broadcast_to(hippo_init(N), (D, N, N))

    def r(*shape):
        return rng.standard_normal(shape).astype(dtype)

    return Scan2DInput(
        x=r(H, W, D), B_t=r(H, W, N), B_z=r(H, W, N), C=r(H, W, N),
        delta_t=rng.uniform(0.01, 0.1, (H, W, D)).astype(dtype),
        delta_z=rng.uniform(0.01, 0.1, (H, W, D)).astype(dtype),
        A_t=A.astype(dtype), A_z=A.astype(dtype), D_skip=np.ones(D, dtype=dtype))


def time_call(fn, warmup=5, iters=20):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return np.array(times)


def run_bench(sizes, workers=(1,), precision="f32", D=8, N=4, warmup=5, iters=20,
              seed=0, variants=("sequential", "wavefront")) -> BenchReport:
    """Time every (size, variant, worker count) and check that checksums agree."""
    dtype = np.float32 if precision == "f32" else np.float64
    report = BenchReport(env={
        "precision": precision,
        "worker_pool": ",".join(map(str, workers)),
        "cpu_count": os.cpu_count(),
        "numpy": np.__version__,
        "python": platform.python_version(),
        "warmup": warmup,
        "iters": iters,
    })
    for size in sizes:
        H, W = (size, size) if np.isscalar(size) else size
        inp = bench_input(H, W, D, N, seed, dtype)
        checksums = {}
        cases = []
        if "sequential" in variants:
            cases.append(("sequential", 1, lambda: scan2d_sequential(inp)))
        if "wavefront" in variants:
            for w in workers:
                cases.append(("wavefront", w, lambda w=w: scan2d_wavefront_forward(inp, w)))
        for variant, w, fn in cases:
            y, _ = fn()
            checksum = float(np.sum(y, dtype=np.float64))
            checksums[(variant, w)] = checksum
            t = time_call(fn, warmup, iters)
            report.rows.append(dict(
                H=H, W=W, D=D, N=N, workers=w, variant=variant,
                median_ms=float(np.median(t)), p10_ms=float(np.percentile(t, 10)),
                p90_ms=float(np.percentile(t, 90)), checksum=checksum))
        if len(set(checksums.values())) > 1:
            raise ChecksumMismatch(f"{H}x{W}: checksums differ across variants: {checksums}")
    return report


def linear_fit_r2(x, y) -> float:
    """Coefficient of determination of an ordinary least-squares line."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return 1.0 - float(np.sum(resid ** 2) / ss_tot)
