"""Bucketed ANN indexes and OOD scoring over compressed databanks.

A bucket index assigns every database vector to its closest index point
(a TT leaf, or a k-means centroid for the IVF baseline).  A query probes
the ``K`` closest index points and scans the union of their buckets.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .search import NNSearcher, beam_search, beam_search_batch, exhaustive_knn
from .tt import MarginalCores, TTCloud, marginal_cores, materialize, read_tt, write_tt

__all__ = [
    "BucketIndex",
    "AnnIndex",
    "IvfFlatIndex",
    "OodScorer",
    "DetectionMetrics",
    "build_index",
    "query_index",
    "recall_at_r",
    "expected_bucket_size",
    "empty_bucket_count",
    "greedy_coreset",
    "coreset_radius",
    "ood_score",
    "ood_scores",
    "detection_metrics",
    "ivf_flat_baseline",
    "save_index",
    "load_index",
    "write_metrics_csv",
]


class BucketIndex:
    """Database row ids grouped by their assigned index point.

    Buckets are stored CSR-style: ``order`` lists row ids sorted by
    (bucket, row id) and ``offsets[b]:offsets[b+1]`` delimits bucket ``b``.
    """

    def __init__(self, db: np.ndarray, assignment: np.ndarray, n_buckets: int):
        self.db = np.asarray(db, dtype=np.float64)
        assignment = np.asarray(assignment, dtype=np.int64)
        if len(assignment) != len(self.db):
            raise ValueError("one assignment per database row is required")
        if len(assignment) and (assignment.min() < 0 or assignment.max() >= n_buckets):
            raise ValueError("assignment refers to a nonexistent bucket")
        self.assignment = assignment
        self.n_buckets = int(n_buckets)
        self.order = np.lexsort((np.arange(len(assignment)), assignment))
        counts = np.bincount(assignment, minlength=self.n_buckets)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        # position of each row inside its bucket
        self._rank = np.empty(len(assignment), dtype=np.int64)
        self._rank[self.order] = np.arange(len(assignment)) - self.offsets[assignment[self.order]]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def bucket(self, b: int) -> np.ndarray:
        return self.order[self.offsets[b] : self.offsets[b + 1]]

    @property
    def buckets(self) -> dict[int, list[int]]:
        """Nonempty buckets as ``{index point id: sorted row ids}``."""
        return {int(b): self.bucket(b).tolist() for b in np.flatnonzero(self.sizes)}

    def probe(self, q: np.ndarray, K: int) -> np.ndarray:
        raise NotImplementedError

    def probe_batch(self, Q: np.ndarray, K: int) -> np.ndarray:
        raise NotImplementedError

    def param_count(self) -> int:
        raise NotImplementedError


class AnnIndex(BucketIndex):
    """Buckets keyed by row-major TT leaf id; probing uses beam search."""

    def __init__(self, tt: TTCloud, mc: MarginalCores, db: np.ndarray, assignment: np.ndarray):
        super().__init__(db, assignment, tt.n_leaves)
        self.tt = tt
        self.mc = mc

    def probe(self, q: np.ndarray, K: int) -> np.ndarray:
        return beam_search(self.tt, self.mc, q, min(K, self.n_buckets)).flat

    def probe_batch(self, Q: np.ndarray, K: int) -> np.ndarray:
        return beam_search_batch(self.tt, self.mc, Q, K)[0]

    def param_count(self) -> int:
        return self.tt.param_count()


class IvfFlatIndex(BucketIndex):
    """One-level inverted file over k-means centroids."""

    def __init__(self, centroids: np.ndarray, db: np.ndarray, assignment: np.ndarray, objective: list[float]):
        super().__init__(db, assignment, len(centroids))
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.objective = objective

    def _probe_dists(self, Q: np.ndarray) -> np.ndarray:
        diff = Q[:, None, :] - self.centroids[None, :, :]
        return np.einsum("bnd,bnd->bn", diff, diff)

    def probe(self, q: np.ndarray, K: int) -> np.ndarray:
        return self.probe_batch(np.asarray(q, dtype=np.float64)[None, :], K)[0]

    def probe_batch(self, Q: np.ndarray, K: int) -> np.ndarray:
        Q = np.asarray(Q, dtype=np.float64)
        K = min(K, self.n_buckets)
        out = np.empty((len(Q), K), dtype=np.int64)
        step = max(1, (1 << 22) // (self.n_buckets * Q.shape[1]))
        for s in range(0, len(Q), step):
            d = self._probe_dists(Q[s : s + step])
            out[s : s + step] = np.argsort(d, axis=1, kind="stable")[:, :K]
        return out

    def param_count(self) -> int:
        return self.centroids.size


def build_index(tt: TTCloud, mc: MarginalCores | None, db: np.ndarray, assign_beam: int = 8) -> AnnIndex:
    """Put every database row into the bucket of its closest TT leaf.

    The leaf is the best hit of a beam search of width ``assign_beam``;
    ``assign_beam >= N`` means exact nearest-leaf assignment.
    """
    db = np.asarray(db, dtype=np.float64)
    if db.ndim != 2:
        db = db.reshape(-1, tt.feature_dim)
    if db.shape[1] != tt.feature_dim:
        raise ValueError(f"database has D={db.shape[1]}, TT has D={tt.feature_dim}")
    if mc is None:
        mc = marginal_cores(tt)
    if len(db) == 0:
        assignment = np.zeros(0, dtype=np.int64)
    elif assign_beam >= tt.n_leaves:
        assignment, _ = NNSearcher(materialize(tt), use_tree=False).query(db)
    else:
        assignment = beam_search_batch(tt, mc, db, assign_beam)[0][:, 0]
    return AnnIndex(tt, mc, db, assignment)


def _shortlist(idx: BucketIndex, leaves: np.ndarray) -> np.ndarray:
    parts = [idx.bucket(int(b)) for b in leaves]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def query_index(idx: BucketIndex, q: np.ndarray, probe_K: int) -> tuple[np.ndarray, tuple[int, float] | None]:
    """Two-stage query.

    Returns the shortlist (probed buckets in probe order, row ids ascending
    within a bucket) and the best ``(row id, squared distance)`` in it, or
    ``None`` if every probed bucket is empty.
    """
    if probe_K < 1:
        raise ValueError("probe_K must be >= 1")
    q = np.asarray(q, dtype=np.float64)
    shortlist = _shortlist(idx, idx.probe(q, probe_K))
    if len(shortlist) == 0:
        return shortlist, None
    j, d = exhaustive_knn(idx.db[shortlist], q, 1)[0]
    return shortlist, (int(shortlist[j]), d)


def shortlist_positions(idx: BucketIndex, queries: np.ndarray, targets: np.ndarray, probe_K: int) -> np.ndarray:
    """Position of each target row in its query's shortlist (``inf`` if absent)."""
    leaves = idx.probe_batch(np.asarray(queries, dtype=np.float64), probe_K)
    sizes = idx.sizes[leaves]  # (B, K)
    starts = np.cumsum(sizes, axis=1) - sizes
    tb = idx.assignment[np.asarray(targets, dtype=np.int64)]
    hit = leaves == tb[:, None]
    pos = np.full(len(targets), np.inf)
    rows_hit = hit.any(axis=1)
    col = hit.argmax(axis=1)
    pos[rows_hit] = starts[rows_hit, col[rows_hit]] + idx._rank[targets[rows_hit]]
    return pos


def recall_at_r(
    idx: BucketIndex, queries: np.ndarray, ground_truth: Sequence[int], Rs: Iterable[int], probe_K: int
) -> list[float]:
    """Fraction of queries whose true NN is among the first ``R`` shortlist entries."""
    Rs = list(Rs)
    if any(r <= 0 for r in Rs):
        raise ValueError("every R must be positive")
    gt = np.asarray(ground_truth, dtype=np.int64)
    pos = shortlist_positions(idx, queries, gt, probe_K)
    return [float(np.mean(pos < r)) for r in Rs]


def expected_bucket_size(idx: BucketIndex, exact: bool = False) -> float | Fraction:
    """``sum_i N_i^2 / N``: expected shortlist length when queries follow the data."""
    sizes = idx.sizes
    n = int(sizes.sum())
    if n == 0:
        return Fraction(0) if exact else 0.0
    sq = sum(int(s) * int(s) for s in sizes)
    return Fraction(sq, n) if exact else sq / n


def empty_bucket_count(idx: BucketIndex) -> int:
    return int(np.sum(idx.sizes == 0))


def greedy_coreset(cloud: np.ndarray, m: int, seed: int | None = 0, start: int | None = None) -> np.ndarray:
    """Farthest-point traversal: a 2-approximation of the minimax covering subset.

    The first point is ``start`` if given, otherwise drawn with ``seed``.
    Each next point maximizes the distance to the current selection (ties
    go to the lowest row id).
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    n = len(cloud)
    if not 1 <= m <= n:
        raise ValueError(f"coreset size {m} must lie in [1, {n}]")
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    diff = cloud - cloud[first]
    mind = np.einsum("ij,ij->i", diff, diff)
    for t in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[t] = nxt
        diff = cloud - cloud[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
    return chosen


def coreset_radius(cloud: np.ndarray, ids: Sequence[int]) -> float:
    """Covering radius ``max_y min_{i in ids} |y - y_i|``."""
    _, d2 = NNSearcher(np.asarray(cloud)[np.asarray(ids)], use_tree=False).query(cloud)
    return float(np.sqrt(d2.max()))


@dataclass
class OodScorer:
    databank: np.ndarray
    method: str = "full"

    def __post_init__(self):
        self.databank = np.asarray(self.databank, dtype=np.float64)
        if self.databank.ndim != 2 or len(self.databank) == 0:
            raise ValueError("OOD databank must be a nonempty 2-d array")
        self._searcher = NNSearcher(self.databank, use_tree=False)

    @property
    def feature_dim(self) -> int:
        return self.databank.shape[1]


def ood_scores(scorer: OodScorer, Q: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query to its nearest databank point."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != scorer.feature_dim:
        raise ValueError(f"queries have shape {Q.shape}, databank has D={scorer.feature_dim}")
    return np.sqrt(scorer._searcher.query(Q)[1])


def ood_score(scorer: OodScorer, q: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (scorer.feature_dim,):
        raise ValueError(f"query has shape {q.shape}, databank has D={scorer.feature_dim}")
    return float(ood_scores(scorer, q[None, :])[0])


@dataclass(frozen=True)
class DetectionMetrics:
    auroc: float
    auprc: float
    precision_at_recall90: float


def detection_metrics(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> DetectionMetrics:
    """AUROC, AUPRC and P@R90 with anomalies as the positive class.

    Higher scores mean "more anomalous".  AUROC is the Mann-Whitney
    statistic with tied ranks averaged; AUPRC is the step-wise sum
    ``sum_t (R_t - R_{t-1}) P_t`` over distinct thresholds; P@R90 is the
    precision at the highest threshold whose recall reaches 0.9.
    """
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes need at least one score")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValueError("scores must be finite")
    n_p, n_n = len(pos), len(neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    auroc = (ranks[:n_p].sum() - n_p * (n_p + 1) / 2) / (n_p * n_n)

    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(n_p), np.zeros(n_n)])
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_p
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    p90 = float(precision[np.argmax(recall >= 0.9 - 1e-12)])
    return DetectionMetrics(float(auroc), auprc, p90)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    idx = [int(rng.integers(n))]
    diff = X - X[idx[0]]
    d2 = np.einsum("ij,ij->i", diff, diff)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rest[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        diff = X - X[nxt]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return X[np.asarray(idx)].copy()


def ivf_flat_baseline(db: np.ndarray, n_centroids: int, seed: int = 0, iterations: int = 25) -> IvfFlatIndex:
    """k-means++ seeding and ``iterations`` Lloyd steps; empty clusters keep their centroid.

    ``objective`` on the result holds the k-means cost after each assignment
    step, which is non-increasing.
    """
    db = np.asarray(db, dtype=np.float64)
    n = len(db)
    if not 1 <= n_centroids <= n:
        raise ValueError(f"n_centroids={n_centroids} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    cent = _kmeans_pp(db, n_centroids, rng)
    trace = []
    assign = None
    for _ in range(iterations):
        assign, d2 = NNSearcher(cent, use_tree=False).query(db)
        trace.append(float(d2.sum()))
        counts = np.bincount(assign, minlength=n_centroids)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, db)
        nz = counts > 0
        cent[nz] = sums[nz] / counts[nz, None]
    assign, d2 = NNSearcher(cent, use_tree=False).query(db)
    trace.append(float(d2.sum()))
    return IvfFlatIndex(cent, db, assign, trace)


_IDX_MAGIC = b"TTIX"
_IDX_VERSION = 1


def save_index(idx: AnnIndex, path) -> None:
    """TT blob followed by the bucket table ``(leaf id, count, sorted row ids)`` of nonempty leaves."""
    buf = io.BytesIO()
    write_tt(idx.tt, buf)
    blob = buf.getvalue()
    nonempty = np.flatnonzero(idx.sizes)
    with open(path, "wb") as fh:
        fh.write(_IDX_MAGIC)
        fh.write(struct.pack("<IQ", _IDX_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<QQ", len(idx.db), len(nonempty)))
        for b in nonempty:
            ids = idx.bucket(int(b))
            fh.write(struct.pack("<QQ", int(b), len(ids)))
            fh.write(ids.astype("<u8").tobytes())


def load_index(path, db: np.ndarray) -> AnnIndex:
    with open(path, "rb") as fh:
        if fh.read(4) != _IDX_MAGIC:
            raise ValueError("not an index file")
        version, blob_len = struct.unpack("<IQ", fh.read(12))
        if version != _IDX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        tt = read_tt(io.BytesIO(fh.read(blob_len)))
        n_db, n_buckets = struct.unpack("<QQ", fh.read(16))
        db = np.asarray(db, dtype=np.float64)
        if len(db) != n_db:
            raise ValueError(f"index was built for {n_db} vectors, got {len(db)}")
        assignment = np.full(n_db, -1, dtype=np.int64)
        for _ in range(n_buckets):
            leaf, count = struct.unpack("<QQ", fh.read(16))
            ids = np.frombuffer(fh.read(8 * count), dtype="<u8").astype(np.int64)
            assignment[ids] = leaf
    if np.any(assignment < 0):
        raise ValueError("index file does not cover every database row")
    return AnnIndex(tt, marginal_cores(tt), db, assignment)


def write_metrics_csv(rows: Iterable[tuple[str, object, float]], fh) -> None:
    """CSV with header ``metric,parameter,value``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["metric", "parameter", "value"])
    for metric, param, value in rows:
        w.writerow([metric, param, repr(float(value))])
