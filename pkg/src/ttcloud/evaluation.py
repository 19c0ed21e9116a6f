"""End-to-end ANN and OOD evaluations emitting ``(metric, parameter, value)`` rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .index import (
    BucketIndex,
    OodScorer,
    build_index,
    detection_metrics,
    empty_bucket_count,
    expected_bucket_size,
    greedy_coreset,
    ivf_flat_baseline,
    ood_scores,
    recall_at_r,
)
from .search import NNSearcher
from .tt import TTCloud, marginal_cores, materialize

__all__ = ["EvalResult", "bucket_stats", "evaluate_ann", "evaluate_ood"]

Row = tuple[str, object, float]


@dataclass
class EvalResult:
    rows: list[Row] = field(default_factory=list)

    def add(self, metric: str, parameter, value) -> None:
        self.rows.append((metric, parameter, float(value)))

    def get(self, metric: str, parameter="") -> float:
        for m, p, v in self.rows:
            if m == metric and p == parameter:
                return v
        raise KeyError((metric, parameter))


def bucket_stats(idx: BucketIndex) -> dict[str, float]:
    """Expected bucket size, its Cauchy-Schwarz floor ``N / M`` and the gap between them."""
    n = len(idx.db)
    ebs = expected_bucket_size(idx)
    floor = n / idx.n_buckets
    return {
        "expected_bucket_size": ebs,
        "bucket_size_floor": floor,
        "bucket_size_gap": ebs - floor,
        "empty_buckets": empty_bucket_count(idx),
    }


def evaluate_ann(
    tt: TTCloud,
    db: np.ndarray,
    queries: np.ndarray,
    Rs: list[int],
    probe_K: int,
    assign_beam: int = 8,
    ivf_centroids: int | None = None,
    seed: int = 0,
) -> tuple[EvalResult, dict[str, BucketIndex]]:
    """Recall@R grid and bucket statistics for the TT index and an ivf-flat baseline.

    The baseline gets ``tt.param_count() // D`` centroids unless
    ``ivf_centroids`` is given, so both indexes store the same number of
    floats.  Ground truth is exhaustive search over ``db``.
    """
    db = np.asarray(db, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape[1] != db.shape[1]:
        raise ValueError(f"queries have D={queries.shape[1]}, database has D={db.shape[1]}")
    if ivf_centroids is None:
        ivf_centroids = max(1, tt.param_count() // db.shape[1])
    truth, _ = NNSearcher(db, use_tree=False).query(queries)
    indexes = {
        "tt": build_index(tt, marginal_cores(tt), db, assign_beam),
        "ivf": ivf_flat_baseline(db, min(ivf_centroids, len(db)), seed=seed),
    }
    res = EvalResult()
    for name, idx in indexes.items():
        res.add(f"{name}_params", "", idx.param_count())
        res.add(f"{name}_buckets", "", idx.n_buckets)
        for R, rec in zip(Rs, recall_at_r(idx, queries, truth, Rs, probe_K)):
            res.add(f"{name}_recall", R, rec)
        for k, v in bucket_stats(idx).items():
            res.add(f"{name}_{k}", "", v)
    return res, indexes


def evaluate_ood(
    tt: TTCloud,
    train: np.ndarray,
    normal: np.ndarray,
    anomal: np.ndarray,
    seed: int = 0,
) -> EvalResult:
    """Detection metrics of the full bank, the TT bank and a greedy coreset of equal size in floats."""
    train = np.asarray(train, dtype=np.float64)
    D = train.shape[1]
    if tt.feature_dim != D:
        raise ValueError(f"TT has D={tt.feature_dim}, training bank has D={D}")
    m = max(1, min(len(train), tt.param_count() // D))
    banks = {
        "full": train,
        "tt": materialize(tt),
        "coreset": train[greedy_coreset(train, m, seed=seed)],
    }
    res = EvalResult()
    for name, bank in banks.items():
        scorer = OodScorer(bank, method=name)
        met = detection_metrics(ood_scores(scorer, anomal), ood_scores(scorer, normal))
        res.add("auroc", name, met.auroc)
        res.add("auprc", name, met.auprc)
        res.add("p_at_r90", name, met.precision_at_recall90)
        res.add("params", name, tt.param_count() if name == "tt" else bank.size)
    return res
