"""SSM parameter sets, HiPPO initialization, selective projections, discretization."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import tensor as T
from .errors import DimensionError, DomainError, NumericError
from .tensor import Tensor

DELTA_MIN, DELTA_MAX = 1e-3, 1e-1


def hippo_init(N: int) -> np.ndarray:
    """HiPPO-LegS state matrix: lower triangular, diagonal -(n+1)."""
    if N < 1:
        raise DomainError(f"state size must be >= 1, got {N}")
    q = np.sqrt(2.0 * np.arange(N) + 1.0)
    A = -np.outer(q, q)
    A = np.tril(A, -1) - np.diag(np.arange(1, N + 1, dtype=np.float64))
    return A


def inverse_softplus(y):
    return np.log(np.expm1(y))


@dataclass
class AxisParams:
    A: Tensor          # (D, N, N)
    W_B: Tensor        # (D, N)
    W_C: Tensor        # (D, N)
    W_delta: Tensor    # (D, 1)
    delta_bias: Tensor  # (D,)

    @property
    def channels(self):
        return self.A.shape[0]

    @property
    def state_size(self):
        return self.A.shape[-1]


@dataclass
class M2DParams:
    axis_t: AxisParams
    axis_z: AxisParams
    D_skip: Tensor     # (D,)
    shared_C: bool = True

    def __post_init__(self):
        if (self.axis_t.A.shape != self.axis_z.A.shape):
            raise DimensionError(
                f"axis parameter shapes differ: {self.axis_t.A.shape} vs {self.axis_z.A.shape}")

    @property
    def channels(self):
        return self.axis_t.channels

    @property
    def state_size(self):
        return self.axis_t.state_size

    def named_tensors(self):
        out = {}
        for axis_name, axis in (("t", self.axis_t), ("z", self.axis_z)):
            for field in ("A", "W_B", "W_C", "W_delta", "delta_bias"):
                if field == "W_C" and self.shared_C and axis_name == "z":
                    continue
                out[f"{field}_{axis_name}"] = getattr(axis, field)
        out["D_skip"] = self.D_skip
        return out


def init_axis_params(D, N, rng, dtype=None, train_A=True) -> AxisParams:
    dtype = dtype or T.get_default_dtype()
    bound = 1 / math.sqrt(D)

    def uniform(shape, lo=-bound, hi=bound):
        return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad=True)

    A = np.broadcast_to(hippo_init(N), (D, N, N)).astype(dtype)
    lo, hi = inverse_softplus(DELTA_MIN), inverse_softplus(DELTA_MAX)
    return AxisParams(
        A=Tensor(A, requires_grad=train_A),
        W_B=uniform((D, N)),
        W_C=uniform((D, N)),
        W_delta=uniform((D, 1)),
        delta_bias=uniform((D,), lo, hi),
    )


def init_m2d_params(D, N, rng=None, dtype=None, shared_C=True, train_A=True) -> M2DParams:
    """Fresh parameters for one mixer; A starts at HiPPO in every channel."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = dtype or T.get_default_dtype()
    return M2DParams(
        axis_t=init_axis_params(D, N, rng, dtype, train_A),
        axis_z=init_axis_params(D, N, rng, dtype, train_A),
        D_skip=Tensor(np.ones(D, dtype=dtype), requires_grad=True),
        shared_C=shared_C,
    )


@dataclass
class ScanField:
    """Per-position selective quantities over an H x W grid."""
    B_t: Tensor      # (..., H, W, N)
    B_z: Tensor
    C: Tensor
    delta_t: Tensor  # (..., H, W, D)
    delta_z: Tensor


def selective_project(u, p: M2DParams) -> ScanField:
    """Project features ``u`` (..., H, W, D) to B, C and positive step sizes."""
    u = T.as_tensor(u)
    if u.ndim < 3 or u.shape[-1] != p.channels:
        raise DimensionError(f"input channels {u.shape[-1:]} do not match D={p.channels}")
    B_t = u @ p.axis_t.W_B
    B_z = u @ p.axis_z.W_B
    if p.shared_C:
        C = u @ p.axis_t.W_C
    else:
        C = (u @ p.axis_t.W_C + u @ p.axis_z.W_C) * 0.5
    delta_t = T.softplus(p.axis_t.delta_bias + u @ p.axis_t.W_delta)
    delta_z = T.softplus(p.axis_z.delta_bias + u @ p.axis_z.W_delta)
    return ScanField(B_t, B_z, C, delta_t, delta_z)


def _check_step(delta):
    if not delta > 0:
        raise DomainError(f"step size must be positive, got {delta}")


def zoh_discretize(A, B, delta, method="auto"):
    """Zero-order-hold discretization: (exp(dA), (dA)^-1 (exp(dA) - I) dB).

    ``method`` selects how the input matrix is formed: "series" sums
    dB * sum_k (dA)^k / (k+1)!, "solve" uses a linear solve, "auto" picks the
    series when ||dA|| < 1e-3.
    """
    _check_step(delta)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    dA = delta * A
    A_bar = expm(dA)
    if method == "auto":
        method = "series" if np.linalg.norm(dA, 2) < 1e-3 else "solve"
    if method == "series":
        term = delta * B
        B_bar = term.copy()
        for k in range(1, 60):
            term = dA @ term / (k + 1)
            B_bar = B_bar + term
            if np.max(np.abs(term)) <= 1e-18 * max(1.0, np.max(np.abs(B_bar))):
                break
    elif method == "solve":
        B_bar = np.linalg.solve(dA, (A_bar - np.eye(len(A))) @ (delta * B))
    else:
        raise DomainError(f"unknown method {method!r}")
    if not (np.all(np.isfinite(A_bar)) and np.all(np.isfinite(B_bar))):
        raise NumericError("non-finite ZOH discretization")
    return A_bar, B_bar


def euler_discretize(A, B, delta):
    """First-order Euler step: (I + dA, dB)."""
    _check_step(delta)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return np.eye(len(A)) + delta * A, delta * B
