"""
Cost grows with the number of cells
===================================

The sequential scan visits every cell once, so its time should be close to
linear in H * W. Every row of the report carries a checksum, and a report
whose variants disagree is rejected.
"""

from mamba2d.bench import linear_fit_r2, run_bench

sizes = [16, 32, 48, 64]
report = run_bench(sizes, workers=(1, 2), D=8, N=4, warmup=2, iters=5)
print(report.to_csv())

seq = [r for r in report.rows if r["variant"] == "sequential"]
cells = [r["H"] * r["W"] for r in seq]
ms = [r["median_ms"] for r in seq]
print(f"R^2 of a straight line through (cells, ms): {linear_fit_r2(cells, ms):.4f}")

# %%
# On a single core extra workers only add scheduling overhead. The
# wavefront still wins over raster order because each diagonal is one
# vectorised update.

for r in report.rows:
    print(r["H"], r["variant"], r["workers"], round(r["median_ms"], 2))
