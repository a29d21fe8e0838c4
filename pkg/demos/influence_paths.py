"""
Influence decays with Manhattan distance
========================================

With scalar states and constant parameters, every step down multiplies a
contribution by ``a`` and every step right by ``b``. An input therefore
reaches the cell (dt, dz) further on along binom(dt + dz, dt) monotone
lattice paths, and its influence is that count times a**dt * b**dz.
"""

import numpy as np

from mamba2d import influence_map, path_sum_coefficient
from mamba2d.formats import write_pgm
from mamba2d.scan2d import constant_input, path_sum_field

a = b = 0.4
m = influence_map(constant_input(8, 8, a, b), src=(0, 0), channel=0)
np.set_printoptions(precision=4, suppress=True, linewidth=120)
print(m)

# %%
# The measured map matches the closed form to roundoff.

print("max deviation:", np.abs(m - path_sum_field(8, 8, a, b)).max())

# %%
# Along a row, a column or the diagonal the coefficients shrink
# monotonically once a = b stays below one half.

for ray in ((1, 0), (0, 1), (1, 1)):
    print(ray, [round(path_sum_coefficient(k * ray[0], k * ray[1], a, b), 5) for k in range(7)])

# %%
# Moving the source to the middle shows the causal quadrant: nothing above
# or to the left of it responds.

m = influence_map(constant_input(8, 8, 0.45, 0.3), src=(3, 2), channel=0)
print((m > 0).astype(int))
write_pgm("influence.pgm", m)
print("wrote influence.pgm")
