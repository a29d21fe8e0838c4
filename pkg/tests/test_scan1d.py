import numpy as np
import pytest

from mamba2d.errors import DimensionError
from mamba2d.scan1d import Scan1DInput, selective_scan_1d


def naive_scan(x, A_bar, B_bar, C, D_skip):
    L, D = x.shape
    N = C.shape[1]
    y = np.zeros((L, D))
    for d in range(D):
        hist = [np.zeros(N)]
        for t in range(L):
            prev = hist[-1]
            h = np.zeros(N)
            for n in range(N):
                h[n] = sum(A_bar[t, n, k] * prev[k] for k in range(N)) + B_bar[t, n] * x[t, d]
            hist.append(h)
            y[t, d] = sum(C[t, n] * h[n] for n in range(N)) + D_skip[d] * x[t, d]
    return y


def random_input(rng, L, D, N):
    return Scan1DInput(
        x=rng.standard_normal((L, D)), A_bar=0.5 * rng.standard_normal((L, N, N)),
        B_bar=rng.standard_normal((L, N)), C=rng.standard_normal((L, N)),
        D_skip=rng.standard_normal(D))


def test_single_step():
    inp = Scan1DInput(x=np.array([[2.0]]), A_bar=np.array([[[9.0]]]),
                      B_bar=np.array([[3.0]]), C=np.array([[0.5]]), D_skip=np.array([0.25]))
    assert selective_scan_1d(inp)[0, 0] == 0.5 * 3.0 * 2.0 + 0.25 * 2.0


def test_two_step_hand_expansion():
    a, b, c = 0.7, 1.3, -0.4
    inp = Scan1DInput(x=np.ones((2, 1)), A_bar=np.full((2, 1, 1), a), B_bar=np.full((2, 1), b),
                      C=np.full((2, 1), c), D_skip=np.zeros(1))
    np.testing.assert_allclose(selective_scan_1d(inp)[:, 0], [c * b, c * (a * b + b)], rtol=1e-15)


def test_matches_naive(rng):
    inp = random_input(rng, 16, 3, 4)
    expect = naive_scan(inp.x, inp.A_bar, inp.B_bar, inp.C, inp.D_skip)
    np.testing.assert_allclose(selective_scan_1d(inp), expect, rtol=0, atol=1e-12)


def test_per_channel_operators(rng):
    L, D, N = 5, 2, 3
    inp = random_input(rng, L, D, N)
    A4 = 0.5 * rng.standard_normal((L, D, N, N))
    B3 = rng.standard_normal((L, D, N))
    y = selective_scan_1d(Scan1DInput(inp.x, A4, B3, inp.C, inp.D_skip))
    for d in range(D):
        one = naive_scan(inp.x[:, d:d + 1], A4[:, d], B3[:, d], inp.C, inp.D_skip[d:d + 1])
        np.testing.assert_allclose(y[:, d], one[:, 0], atol=1e-12)


def test_causality(rng):
    inp = random_input(rng, 12, 2, 3)
    base = selective_scan_1d(inp)
    for t in range(12):
        x = inp.x.copy()
        x[t] += 1.0
        y = selective_scan_1d(Scan1DInput(x, inp.A_bar, inp.B_bar, inp.C, inp.D_skip))
        assert np.all(y[:t] == base[:t])


def test_linear_in_x(rng):
    inp = random_input(rng, 9, 2, 3)
    y = selective_scan_1d(inp)
    y3 = selective_scan_1d(Scan1DInput(3 * inp.x, inp.A_bar, inp.B_bar, inp.C, inp.D_skip))
    np.testing.assert_allclose(y3, 3 * y, rtol=1e-13, atol=1e-13)


def test_length_mismatch(rng):
    inp = random_input(rng, 4, 1, 2)
    with pytest.raises(DimensionError):
        selective_scan_1d(Scan1DInput(inp.x, inp.A_bar[:3], inp.B_bar, inp.C, inp.D_skip))
