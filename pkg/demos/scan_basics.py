"""
The 2D scan by hand
===================

Each hidden state averages two estimates: one carried down from the cell
above and one carried right from the cell to the left. Both predecessors of
a cell sit on the previous anti-diagonal, so a whole diagonal can be
computed at once.
"""

import numpy as np

from mamba2d import scan2d_sequential, scan2d_wavefront_forward, wavefront_schedule
from mamba2d.scan2d import Scan2DInput
from mamba2d.verify import random_scan_input

# %%
# A 2x2 grid with A = 0, unit steps and unit inputs. The top-left cell has no
# neighbours, so its state is 1/2 (1 + 1) = 1. The bottom-right one averages
# 1.5 + 1.5 from its neighbours plus two unit injections.

ones = np.ones((2, 2, 1))
inp = Scan2DInput(x=ones, B_t=ones, B_z=ones, C=ones, delta_t=ones, delta_z=ones,
                  A_t=np.zeros((1, 1, 1)), A_z=np.zeros((1, 1, 1)), D_skip=np.zeros(1))
y, grid = scan2d_sequential(inp)
print("hidden states:\n", grid.h[..., 0, 0])

# %%
# The schedule for a 4x6 grid has 4 + 6 - 1 diagonals.

sched = wavefront_schedule(4, 6)
sched.validate()
for d, (rows, cols) in enumerate(sched.diagonals):
    print(d, list(zip(rows.tolist(), cols.tolist())))

# %%
# The wavefront evaluation gives the same bits as raster order, whatever
# the worker count.

rng = np.random.default_rng(0)
inp = random_scan_input(rng, 12, 9, 4, 3)
y_seq, _ = scan2d_sequential(inp)
for workers in (1, 2, 8):
    y_wf, _ = scan2d_wavefront_forward(inp, workers)
    print(f"workers={workers}: identical bytes = {y_wf.tobytes() == y_seq.tobytes()}")

# %%
# Perturbing one input leaves everything above or to the left untouched.

x = inp.x.copy()
x[5, 4, 0] += 1.0
y2, _ = scan2d_sequential(Scan2DInput(**{**inp.__dict__, "x": x}))
changed = np.any(y2 != y_seq, axis=-1).astype(int)
print(changed)
