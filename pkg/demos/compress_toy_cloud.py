"""Compress a 2-d toy cloud into a 64 x 128 rank-8 TT and compare it with a random subsample.

Run with ``python3 demos/compress_toy_cloud.py [kind] [iterations]``.
"""

from __future__ import annotations

import sys

import numpy as np

from ttcloud.datasets import ToySpec, gen_toy
from ttcloud.losses import sliced_wasserstein_distance
from ttcloud.training import heldout_sw, preset, sgd_train
from ttcloud.tt import TTShape, init_tt

kind = sys.argv[1] if len(sys.argv) > 1 else "semicircle"
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 2048

X = gen_toy(ToySpec(kind, 8192, seed=0))
shape = TTShape([64, 128], 2, 8)
print(f"{kind}: {len(X)} points, TT with {shape.param_count()} parameters ({shape.n_leaves} leaves)")

tt0 = init_tt(shape, seed=1, calibrate=X)
# a shorter schedule than the preset keeps the demo around a minute
cfg = preset("toy", iterations=iterations, decay_every=max(1, iterations // 8), checkpoint_every=iterations // 4)
tt, report = sgd_train(X, tt0, cfg)

for step, lr, sw in zip(report.steps, report.lr, report.sw):
    print(f"  step {step:5d}  lr {lr:.3g}  SW loss {sw:.4f}")

budget = shape.param_count() // 2
sub = X[np.random.default_rng(2).choice(len(X), budget, replace=False)]
print(f"init SW {heldout_sw(X, tt0):.4f}, trained SW {heldout_sw(X, tt):.4f}, "
      f"{budget}-point subsample SW {sliced_wasserstein_distance(X, sub, seed=12345):.4f}")
