"""Finite-difference gradient checks and wavefront/sequential oracle sweeps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import AxisParams, M2DParams, hippo_init, selective_project
from .scan2d import Scan2DInput, scan2d, scan2d_sequential, scan2d_wavefront_forward
from .tensor import Tape, Tensor


def rel_error(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / (np.abs(numeric) + floor)


def central_difference(f, arr: np.ndarray, index, step=1e-5) -> float:
    """(f(arr + h e_i) - f(arr - h e_i)) / 2h, restoring ``arr`` afterwards."""
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2 * step)


def numeric_grad(f, arr, step=1e-5, indices=None) -> np.ndarray:
    out = np.zeros_like(arr)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        out[idx] = central_difference(f, arr, idx, step)
    return out


def random_m2d_params(D, N, rng) -> M2DParams:
    """Float64 parameters away from degenerate values, for gradient checks."""
    def axis():
        A = hippo_init(N)[None] + 0.1 * rng.standard_normal((D, N, N))
        return AxisParams(
            A=Tensor(A, requires_grad=True),
            W_B=Tensor(rng.uniform(-1, 1, (D, N)), requires_grad=True),
            W_C=Tensor(rng.uniform(-1, 1, (D, N)), requires_grad=True),
            W_delta=Tensor(rng.uniform(-0.5, 0.5, (D, 1)), requires_grad=True),
            delta_bias=Tensor(rng.uniform(-1.5, 0.0, D), requires_grad=True),
        )
    return M2DParams(axis(), axis(), Tensor(rng.uniform(0.5, 1.5, D), requires_grad=True))


@dataclass
class GradcheckInstance:
    x: Tensor
    params: M2DParams
    weights: np.ndarray
    workers: int | None = None

    def tensors(self) -> dict:
        out = {"x": self.x}
        out.update(self.params.named_tensors())
        return out

    def loss(self) -> Tensor:
        p = self.params
        field = selective_project(self.x, p)
        y = scan2d(self.x, field, p.axis_t.A, p.axis_z.A, p.D_skip, self.workers)
        return (y * self.weights).sum()


def make_instance(H, W, D, N, seed, workers=None) -> GradcheckInstance:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((H, W, D)), requires_grad=True)
    params = random_m2d_params(D, N, rng)
    return GradcheckInstance(x, params, rng.standard_normal((H, W, D)), workers)


def gradcheck_ssm(H=4, W=5, D=2, N=3, seed=0, step=1e-5, workers=None) -> dict:
    """Max relative error per tensor for the projection + 2D scan layer.

    Analytic gradients come from the tape (including the hand-written scan
    adjoint); numeric ones from central differences of the same loss.
    """
    with T.precision("f64"):
        inst = make_instance(H, W, D, N, seed, workers)
        tensors = inst.tensors()
        for t in tensors.values():
            t.grad = None
        with Tape():
            T.backward(inst.loss())
        analytic = {k: t.grad.copy() for k, t in tensors.items()}
        results = {}
        for name, t in tensors.items():
            num = numeric_grad(lambda: float(inst.loss().data), t.data, step)
            results[name] = float(rel_error(analytic[name], num).max())
    return results


def random_scan_input(rng, H, W, D, N, dtype=np.float64) -> Scan2DInput:
    A = hippo_init(N)[None] + 0.1 * rng.standard_normal((D, N, N))
    sp = lambda v: np.logaddexp(0, v)

    def r(*shape):
        return rng.standard_normal(shape).astype(dtype)

    return Scan2DInput(
        x=r(H, W, D), B_t=r(H, W, N), B_z=r(H, W, N), C=r(H, W, N),
        delta_t=sp(rng.uniform(-3, 0.5, (H, W, D))).astype(dtype),
        delta_z=sp(rng.uniform(-3, 0.5, (H, W, D))).astype(dtype),
        A_t=A.astype(dtype), A_z=(A + 0.05 * rng.standard_normal(A.shape)).astype(dtype),
        D_skip=rng.standard_normal(D).astype(dtype))


def oracle_cases(k, seed):
    """Yield (H, W, D, N, input) with the 1x1 degenerate case first."""
    rng = np.random.default_rng(seed)
    for c in range(k):
        if c == 0:
            H = W = 1
            D, N = 1, 1
        else:
            H, W = (int(v) for v in rng.integers(1, 17, size=2))
            D, N = (int(v) for v in rng.integers(1, 9, size=2))
        yield H, W, D, N, random_scan_input(rng, H, W, D, N)


def first_mismatch(a, b):
    diff = np.argwhere(~((a == b) | (np.isnan(a) & np.isnan(b))))
    return tuple(int(v) for v in diff[0]) if len(diff) else None


def run_oracle(cases=50, seed=0, workers=(1, 2, 4, 8)):
    """Compare every wavefront run bitwise with the sequential evaluation.

    Returns (ok, lines) where lines describe each case or the first failure.
    """
    lines = []
    for c, (H, W, D, N, inp) in enumerate(oracle_cases(cases, seed)):
        y_ref, g_ref = scan2d_sequential(inp)
        for w in workers:
            y, g = scan2d_wavefront_forward(inp, w)
            for what, a, b in (("y", y_ref, y), ("h", g_ref.h, g.h)):
                if a.tobytes() != b.tobytes():
                    cell = first_mismatch(a, b)
                    lines.append(f"case {c} ({H}x{W}, D={D}, N={N}) workers={w}: "
                                 f"{what} mismatch at cell {cell[:2]} (index {cell})")
                    return False, lines
        lines.append(f"case {c}: {H}x{W} D={D} N={N} equal across workers {list(workers)}")
    return True, lines
