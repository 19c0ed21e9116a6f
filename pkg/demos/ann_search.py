"""Build a TT bucket index over a Gaussian-mixture database and compare it with ivf-flat.

Run with ``python3 demos/ann_search.py``.  Uses 20k vectors so it finishes in about a minute.
"""

from __future__ import annotations

from ttcloud.datasets import gaussian_mixture
from ttcloud.evaluation import evaluate_ann
from ttcloud.search import beam_search
from ttcloud.training import preset, sgd_train
from ttcloud.tt import TTShape, init_tt, marginal_cores, materialize

pts, _, _ = gaussian_mixture(20_200, 32, 64, seed=0)
db, queries = pts[:20_000], pts[20_000:]
shape = TTShape([16, 16, 64], 32, 8)

tt0 = init_tt(shape, seed=0, calibrate=db)
# SW only: in 32 dimensions the summed NN terms dominate and hurt the fit
cfg = preset("ann", iterations=400, lr0=1.0, decay_every=100, als_iterations=0,
             loss_nn_weight=0.0, checkpoint_every=100)
tt, _ = sgd_train(db, tt0, cfg, diagnostics=False)

# beam search descends the centroid tree; a narrow beam may miss the exhaustive answer
mc = marginal_cores(tt)
q = queries[0]
hit = beam_search(tt, mc, q, 8)
leaves = materialize(tt)
exact = ((leaves - q) ** 2).sum(1).argmin()
print(f"beam (K=8) nearest leaf {tuple(int(i) for i in hit.indices[0])}, exhaustive nearest leaf id {exact} "
      f"(beam id {hit.flat[0]})")

Rs = [1, 10, 100, 1000]
res, indexes = evaluate_ann(tt, db, queries, Rs, probe_K=16)
for name in ("tt", "ivf"):
    recalls = ", ".join(f"R={R}: {res.get(f'{name}_recall', R):.3f}" for R in Rs)
    print(f"{name:>3}: {res.get(f'{name}_buckets'):.0f} buckets, {res.get(f'{name}_params'):.0f} params, "
          f"E|bucket| {res.get(f'{name}_expected_bucket_size'):.1f}, "
          f"{res.get(f'{name}_empty_buckets'):.0f} empty; recall {recalls}")
