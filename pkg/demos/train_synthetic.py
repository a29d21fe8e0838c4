"""
Training the tiny hybrid on synthetic patterns
==============================================

The synthetic classes are zero-mean stripes and checkerboards. A linear
readout of 3x3 neighbourhoods cannot tell them apart after pooling, so the
model has to combine information across the image.
"""

import numpy as np

from mamba2d import Mamba2D
from mamba2d.train import RunConfig, evaluate, make_synthetic, train_loop

run = RunConfig(steps=60, seed=0, workers=1)
spec = run.synthetic_spec()
x_train, y_train = make_synthetic(spec, run.n_train, split=0)
x_test, y_test = make_synthetic(spec, run.n_eval, split=1)
print("image batch:", x_train.shape, "labels:", np.bincount(y_train))

# %%
# An untrained model sits at chance.

fresh = Mamba2D(run.model_config(), seed=0, dtype=np.float32, workers=1)
print(f"untrained held-out accuracy: {evaluate(fresh, x_test, y_test):.3f}")

# %%
# Each log row is step, loss, batch accuracy, learning rate, elapsed ms.

result = train_loop(run, x_train, y_train)
for row in result.log_rows[::10]:
    print(row)
print(f"train accuracy {result.train_accuracy:.3f}, "
      f"held-out accuracy {evaluate(result.model, x_test, y_test):.3f}")
print(f"{result.model.num_parameters():,} parameters")
