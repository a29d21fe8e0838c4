"""Sequential 1D selective scan, kept as a baseline and reduction target."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass
class Scan1DInput:
    """Per-step operands of the discrete recurrence.

    ``A_bar`` is (L, N, N) or per channel (L, D, N, N); ``B_bar`` is (L, N) or
    (L, D, N); ``C`` is (L, N); ``x`` is (L, D).
    """
    x: np.ndarray
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    D_skip: np.ndarray


def selective_scan_1d(inp: Scan1DInput) -> np.ndarray:
    x = np.asarray(inp.x)
    L, D = x.shape
    A_bar, B_bar, C = np.asarray(inp.A_bar), np.asarray(inp.B_bar), np.asarray(inp.C)
    if L < 1:
        raise DimensionError("sequence must have at least one step")
    for name, arr in (("A_bar", A_bar), ("B_bar", B_bar), ("C", C)):
        if arr.shape[0] != L:
            raise DimensionError(f"{name} has {arr.shape[0]} steps, expected {L}")
    N = C.shape[-1]
    if A_bar.ndim == 3:
        A_bar = np.broadcast_to(A_bar[:, None], (L, D, N, N))
    if B_bar.ndim == 2:
        B_bar = np.broadcast_to(B_bar[:, None], (L, D, N))
    h = np.zeros((D, N), dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(L):
        h = np.einsum("dnk,dk->dn", A_bar[t], h) + B_bar[t] * x[t][:, None]
        y[t] = h @ C[t] + inp.D_skip * x[t]
    return y
