"""Score anomalies against a full memory bank, a TT-compressed bank and a greedy coreset.

Run with ``python3 demos/ood_scoring.py``.  A smaller bank than the acceptance run keeps it quick.
"""

from __future__ import annotations

from ttcloud.datasets import ood_benchmark
from ttcloud.evaluation import evaluate_ood
from ttcloud.training import preset, sgd_train
from ttcloud.tt import TTShape, init_tt

b = ood_benchmark(n_train=10_000, n_test=500, dim=64, seed=0)
X = b["train"]
# 50x compression: 64*8*16 + 16*152 = 10624 floats vs 640000
shape = TTShape([8, 152], 64, 16)
tt0 = init_tt(shape, seed=0, calibrate=X)
cfg = preset("ood", iterations=200, lr0=1.0, decay_every=50, checkpoint_every=100,
             loss_nn_ref_sample_size=2048)
tt, _ = sgd_train(X, tt0, cfg, diagnostics=False)

res = evaluate_ood(tt, X, b["test_normal"], b["test_anomal"], seed=0)
for bank in ("full", "tt", "coreset"):
    print(f"{bank:>8}: {res.get('params', bank):8.0f} floats  AUROC {res.get('auroc', bank):.4f}  "
          f"AUPRC {res.get('auprc', bank):.4f}  P@R90 {res.get('p_at_r90', bank):.4f}")
