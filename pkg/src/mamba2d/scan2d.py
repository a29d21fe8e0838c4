"""Two-dimensional selective scan.

Each hidden state averages the Euler-stepped estimates coming from the cell
above and the cell to the left::

    h(i,j) = 1/2 [ (I + dt A_t) h(i-1,j) + (I + dz A_z) h(i,j-1)
                   + dt B_t x(i,j) + dz B_z x(i,j) ]
    y(i,j) = C(i,j) . h(i,j) + D x(i,j)

with zero states outside the grid. Every cell on an anti-diagonal
``i + j = d`` depends only on diagonal ``d - 1``, so the wavefront
variants evaluate one diagonal at a time, fanning cells (and channels)
out over a thread pool.

All per-cell arithmetic goes through :func:`_cell_update` and
:func:`_readout`, which use a fixed operation order and only elementwise
numpy kernels, so results are bitwise independent of how cells are grouped
or how many workers run them.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError
from .tensor import record

# names of gradients to corrupt; only set by negative-control tests
_SABOTAGE: set[str] = set()

_pools: dict[int, ThreadPoolExecutor] = {}


def default_workers() -> int:
    env = os.environ.get("M2D_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _pool(workers: int) -> ThreadPoolExecutor:
    if workers not in _pools:
        _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="m2d")
    return _pools[workers]


@dataclass
class Scan2DInput:
    """Operands of one scan. Arrays may carry an optional leading batch axis.

    x, delta_t, delta_z: ([B,] H, W, D); B_t, B_z, C: ([B,] H, W, N);
    A_t, A_z: (D, N, N); D_skip: (D,).
    """
    x: np.ndarray
    B_t: np.ndarray
    B_z: np.ndarray
    C: np.ndarray
    delta_t: np.ndarray
    delta_z: np.ndarray
    A_t: np.ndarray
    A_z: np.ndarray
    D_skip: np.ndarray

    def batched(self) -> tuple[Scan2DInput, bool]:
        """Validate shapes; return a copy with an explicit batch axis."""
        x = np.asarray(self.x)
        if x.ndim not in (3, 4):
            raise DimensionError(f"x must be (H, W, D) or (B, H, W, D), got {x.shape}")
        squeeze = x.ndim == 3
        lift = (lambda a: np.asarray(a)[None]) if squeeze else np.asarray
        out = Scan2DInput(
            lift(x), lift(self.B_t), lift(self.B_z), lift(self.C),
            lift(self.delta_t), lift(self.delta_z),
            np.asarray(self.A_t), np.asarray(self.A_z), np.asarray(self.D_skip))
        Bn, H, W, D = out.x.shape
        if H < 1 or W < 1:
            raise DimensionError("grid must be at least 1 x 1")
        N = out.A_t.shape[-1]
        expect = {
            "B_t": (Bn, H, W, N), "B_z": (Bn, H, W, N), "C": (Bn, H, W, N),
            "delta_t": (Bn, H, W, D), "delta_z": (Bn, H, W, D),
            "A_t": (D, N, N), "A_z": (D, N, N), "D_skip": (D,),
        }
        for name, shape in expect.items():
            got = getattr(out, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")
        if not (np.all(out.delta_t > 0) and np.all(out.delta_z > 0)):
            raise DomainError("step sizes must be strictly positive")
        return out, squeeze


@dataclass
class HiddenGrid:
    """All hidden states, stored with a zero top row and left column.

    ``padded[b, i + 1, j + 1]`` holds h(i, j); row 0 and column 0 are the
    zero boundary.
    """
    padded: np.ndarray
    batched: bool = True

    @property
    def h(self) -> np.ndarray:
        h = self.padded[:, 1:, 1:]
        return h if self.batched else h[0]


@dataclass
class WavefrontSchedule:
    H: int
    W: int
    diagonals: list = field(default_factory=list)

    def __len__(self):
        return len(self.diagonals)

    def validate(self) -> None:
        """Check cover, count, and that every dependency sits on the previous diagonal."""
        if len(self.diagonals) != self.H + self.W - 1:
            raise ContractError("wrong number of diagonals")
        seen = {}
        for d, (rows, cols) in enumerate(self.diagonals):
            for i, j in zip(rows.tolist(), cols.tolist()):
                if (i, j) in seen or i + j != d:
                    raise ContractError(f"cell ({i}, {j}) misplaced")
                seen[(i, j)] = d
                for dep in ((i - 1, j), (i, j - 1)):
                    if dep[0] >= 0 and dep[1] >= 0 and seen.get(dep) != d - 1:
                        raise ContractError(f"dependency {dep} of ({i}, {j}) not on diagonal {d - 1}")
        if len(seen) != self.H * self.W:
            raise ContractError("schedule does not cover the grid")


def wavefront_schedule(H: int, W: int) -> WavefrontSchedule:
    diagonals = []
    for d in range(H + W - 1):
        rows = np.arange(max(0, d - W + 1), min(d, H - 1) + 1)
        diagonals.append((rows, d - rows))
    return WavefrontSchedule(H, W, diagonals)


def _matvec(A, h):
    # (A h)[n] = sum_k A[n, k] h[k], summed in increasing k
    acc = A[..., 0] * h[..., 0:1]
    for k in range(1, A.shape[-1]):
        acc = acc + A[..., k] * h[..., k:k + 1]
    return acc


def _matvec_t(A, v):
    # (A^T v)[k] = sum_n A[n, k] v[n], summed in increasing n
    acc = A[..., 0, :] * v[..., 0:1]
    for n in range(1, A.shape[-2]):
        acc = acc + A[..., n, :] * v[..., n:n + 1]
    return acc


def _cell_update(h_up, h_left, A_t, A_z, dt, dz, bt, bz, x):
    # h_*: (..., D, N); dt, dz, x: (..., D); bt, bz: (..., N)
    dt = dt[..., None]
    dz = dz[..., None]
    x = x[..., None]
    est_t = h_up + dt * _matvec(A_t, h_up)
    est_z = h_left + dz * _matvec(A_z, h_left)
    inj_t = dt * bt[..., None, :] * x
    inj_z = dz * bz[..., None, :] * x
    return 0.5 * (((est_t + est_z) + inj_t) + inj_z)


def _readout(h, c, x, D_skip):
    acc = h[..., 0] * c[..., None, 0]
    for n in range(1, h.shape[-1]):
        acc = acc + h[..., n] * c[..., None, n]
    return acc + D_skip * x


def _first_bad(block, rows, cols):
    bad = ~np.isfinite(block).reshape(block.shape[0], len(rows), -1).all(axis=(0, 2))
    k = int(np.argmax(bad))
    return int(rows[k]), int(cols[k])


def scan2d_sequential(inp: Scan2DInput):
    """Raster-order evaluation; the reference for every other variant."""
    b, squeeze = inp.batched()
    Bn, H, W, D = b.x.shape
    N = b.A_t.shape[-1]
    hp = np.zeros((Bn, H + 1, W + 1, D, N), dtype=b.x.dtype)
    y = np.empty_like(b.x)
    for i in range(H):
        for j in range(W):
            h = _cell_update(hp[:, i, j + 1], hp[:, i + 1, j], b.A_t, b.A_z,
                             b.delta_t[:, i, j], b.delta_z[:, i, j],
                             b.B_t[:, i, j], b.B_z[:, i, j], b.x[:, i, j])
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite hidden state at cell ({i}, {j})")
            hp[:, i + 1, j + 1] = h
            y[:, i, j] = _readout(h, b.C[:, i, j], b.x[:, i, j], b.D_skip)
    return (y[0] if squeeze else y), HiddenGrid(hp, not squeeze)


def _tasks(n_cells, D, workers):
    cell_chunks = min(n_cells, workers)
    chan_chunks = max(1, min(D, workers // cell_chunks))
    cells = np.array_split(np.arange(n_cells), cell_chunks)
    chans = np.array_split(np.arange(D), chan_chunks)
    return [(slice(c[0], c[-1] + 1), slice(k[0], k[-1] + 1)) for c in cells for k in chans]


def _run(tasks, fn, workers):
    if workers == 1 or len(tasks) == 1:
        for t in tasks:
            fn(*t)
        return
    for f in [_pool(workers).submit(fn, *t) for t in tasks]:
        f.result()


def scan2d_wavefront_forward(inp: Scan2DInput, workers: int | None = None):
    """Diagonal-by-diagonal evaluation, bitwise equal to :func:`scan2d_sequential`."""
    workers = workers or default_workers()
    b, squeeze = inp.batched()
    Bn, H, W, D = b.x.shape
    N = b.A_t.shape[-1]
    hp = np.zeros((Bn, H + 1, W + 1, D, N), dtype=b.x.dtype)

    for rows, cols in wavefront_schedule(H, W).diagonals:
        def work(cs, ch, rows=rows, cols=cols):
            r, c = rows[cs], cols[cs]
            hp[:, r + 1, c + 1, ch] = _cell_update(
                hp[:, r, c + 1, ch], hp[:, r + 1, c, ch], b.A_t[ch], b.A_z[ch],
                b.delta_t[:, r, c, ch], b.delta_z[:, r, c, ch],
                b.B_t[:, r, c], b.B_z[:, r, c], b.x[:, r, c, ch])

        _run(_tasks(len(rows), D, workers), work, workers)
        block = hp[:, rows + 1, cols + 1]
        if not np.all(np.isfinite(block)):
            i, j = _first_bad(block, rows, cols)
            raise NumericError(f"non-finite hidden state at cell ({i}, {j})")

    y = _readout(hp[:, 1:, 1:], b.C, b.x, b.D_skip)
    return (y[0] if squeeze else y), HiddenGrid(hp, not squeeze)


@dataclass
class Scan2DGrads:
    x: np.ndarray
    A_t: np.ndarray
    A_z: np.ndarray
    B_t: np.ndarray
    B_z: np.ndarray
    C: np.ndarray
    delta_t: np.ndarray
    delta_z: np.ndarray
    D_skip: np.ndarray


def scan2d_backward(inp: Scan2DInput, grid: HiddenGrid, dL_dy, workers: int | None = None) -> Scan2DGrads:
    """Reverse-mode gradients of the scan.

    The state adjoint obeys the transposed recurrence, evaluated over
    diagonals in decreasing order::

        lam(i,j) = C(i,j) dy(i,j) + 1/2 (I + dt(i+1,j) A_t)^T lam(i+1,j)
                                  + 1/2 (I + dz(i,j+1) A_z)^T lam(i,j+1)

    Parameter gradients are then contracted over the whole grid in one
    pass, independent of worker count.
    """
    workers = workers or default_workers()
    b, squeeze = inp.batched()
    Bn, H, W, D = b.x.shape
    N = b.A_t.shape[-1]
    dy = np.asarray(dL_dy)
    if squeeze:
        dy = dy[None]
    hp = grid.padded
    if dy.shape != b.x.shape or hp.shape != (Bn, H + 1, W + 1, D, N):
        raise ContractError(
            f"grid {hp.shape} / dL_dy {dy.shape} do not match input {b.x.shape}")
    dy = dy.astype(b.x.dtype, copy=False)

    # adjoint grid padded with a zero bottom row and right column
    lp = np.zeros((Bn, H + 1, W + 1, D, N), dtype=b.x.dtype)
    dtp = np.zeros((Bn, H + 1, W + 1, D), dtype=b.x.dtype)
    dzp = np.zeros_like(dtp)
    dtp[:, :H, :W] = b.delta_t
    dzp[:, :H, :W] = b.delta_z

    for rows, cols in reversed(wavefront_schedule(H, W).diagonals):
        def work(cs, ch, rows=rows, cols=cols):
            r, c = rows[cs], cols[cs]
            lam_down = lp[:, r + 1, c, ch]
            lam_right = lp[:, r, c + 1, ch]
            from_t = lam_down + dtp[:, r + 1, c, ch][..., None] * _matvec_t(b.A_t[ch], lam_down)
            from_z = lam_right + dzp[:, r, c + 1, ch][..., None] * _matvec_t(b.A_z[ch], lam_right)
            own = b.C[:, r, c][..., None, :] * dy[:, r, c, ch][..., None]
            lp[:, r, c, ch] = own + 0.5 * (from_t + from_z)

        _run(_tasks(len(rows), D, workers), work, workers)

    lam = lp[:, :H, :W]
    h = hp[:, 1:, 1:]
    h_up = hp[:, :-1, 1:]
    h_left = hp[:, 1:, :-1]
    dt, dz, x = b.delta_t, b.delta_z, b.x
    Bt = b.B_t[..., None, :]
    Bz = b.B_z[..., None, :]
    xe = x[..., None]

    g_dt = 0.5 * np.einsum("bhwdn,bhwdn->bhwd", lam, np.einsum("dnk,bhwdk->bhwdn", b.A_t, h_up) + Bt * xe)
    g_dz = 0.5 * np.einsum("bhwdn,bhwdn->bhwd", lam, np.einsum("dnk,bhwdk->bhwdn", b.A_z, h_left) + Bz * xe)
    g_At = 0.5 * np.einsum("bhwdn,bhwdk->dnk", dt[..., None] * lam, h_up)
    g_Az = 0.5 * np.einsum("bhwdn,bhwdk->dnk", dz[..., None] * lam, h_left)
    g_Bt = 0.5 * np.einsum("bhwdn,bhwd->bhwn", lam, dt * x)
    g_Bz = 0.5 * np.einsum("bhwdn,bhwd->bhwn", lam, dz * x)
    g_x = 0.5 * np.einsum("bhwdn,bhwdn->bhwd", lam, dt[..., None] * Bt + dz[..., None] * Bz) + b.D_skip * dy
    g_C = np.einsum("bhwd,bhwdn->bhwn", dy, h)
    g_D = np.einsum("bhwd,bhwd->d", dy, x)

    if "dAt" in _SABOTAGE:
        g_At = g_At * 1.001
    if "dx" in _SABOTAGE:
        g_x = g_x * 1.001

    un = (lambda a: a[0]) if squeeze else (lambda a: a)
    return Scan2DGrads(
        x=un(g_x), A_t=g_At, A_z=g_Az, B_t=un(g_Bt), B_z=un(g_Bz), C=un(g_C),
        delta_t=un(g_dt), delta_z=un(g_dz), D_skip=g_D)


def path_sum_coefficient(dt: int, dz: int, a: float, b: float) -> float:
    """Weight of an input at offset (dt rows, dz cols) on a later hidden state.

    In the constant scalar regime every up-step multiplies by ``a`` and every
    left-step by ``b``; summing over the binom(dt+dz, dt) monotone lattice
    paths gives the closed form.
    """
    if dt < 0 or dz < 0:
        raise DomainError(f"offsets must be non-negative, got ({dt}, {dz})")
    return math.comb(dt + dz, dt) * a ** dt * b ** dz


def path_sum_field(H: int, W: int, a: float, b: float) -> np.ndarray:
    return np.array([[path_sum_coefficient(i, j, a, b) for j in range(W)] for i in range(H)])


def constant_input(H, W, a, b, x=None, dtype=np.float64) -> Scan2DInput:
    """Single-channel, N=1 scan whose up/left step factors are exactly ``a`` and ``b``.

    Uses dt = dz = 1, B = C = 1, D = 0, so each input injects u = x.
    """
    x = np.ones((H, W, 1), dtype=dtype) if x is None else np.asarray(x, dtype=dtype).reshape(H, W, 1)
    ones = np.ones((H, W, 1), dtype=dtype)
    return Scan2DInput(
        x=x, B_t=ones, B_z=ones, C=ones, delta_t=ones, delta_z=ones,
        A_t=np.full((1, 1, 1), 2 * a - 1, dtype=dtype),
        A_z=np.full((1, 1, 1), 2 * b - 1, dtype=dtype),
        D_skip=np.zeros(1, dtype=dtype))


def influence_map(inp: Scan2DInput, src, channel: int, eps: float = 1e-3,
                  workers: int | None = None) -> np.ndarray:
    """|y' - y| / eps on ``channel`` after nudging x(src, channel) by ``eps``."""
    x = np.asarray(inp.x)
    if x.ndim != 3:
        raise DimensionError("influence_map expects an unbatched (H, W, D) input")
    H, W, D = x.shape
    i, j = src
    if not (0 <= i < H and 0 <= j < W):
        raise DomainError(f"source {src} outside the {H}x{W} grid")
    if not 0 <= channel < D:
        raise DomainError(f"channel {channel} outside [0, {D})")
    y, _ = scan2d_wavefront_forward(inp, workers)
    xp = x.copy()
    xp[i, j, channel] += eps
    nudged = Scan2DInput(**{**inp.__dict__, "x": xp})
    y2, _ = scan2d_wavefront_forward(nudged, workers)
    return np.abs(y2[..., channel] - y[..., channel]) / eps


def scan2d(x, field, A_t, A_z, D_skip, workers: int | None = None):
    """Differentiable scan over tensors; ``field`` is a :class:`ScanField`."""
    parents = (x, field.B_t, field.B_z, field.C, field.delta_t, field.delta_z, A_t, A_z, D_skip)
    inp = Scan2DInput(*(p.data for p in parents[:6]), A_t.data, A_z.data, D_skip.data)
    y, grid = scan2d_wavefront_forward(inp, workers)

    def rule(g):
        gr = scan2d_backward(inp, grid, g, workers)
        return (gr.x, gr.B_t, gr.B_z, gr.C, gr.delta_t, gr.delta_z, gr.A_t, gr.A_z, gr.D_skip)

    return record(y, parents, rule)
