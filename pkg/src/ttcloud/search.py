"""Exhaustive and hierarchical (beam) nearest-neighbor search over TT leaves."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .tt import MarginalCores, TTCloud, materialize

__all__ = [
    "BeamResult",
    "NNSearcher",
    "nearest_neighbors",
    "exhaustive_knn",
    "beam_search",
    "beam_search_batch",
    "recall_of_beam",
]

KDTREE_MAX_DIM = 8
_CHUNK_ENTRIES = 1 << 22


def _sqdist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.einsum("ij,ij->i", diff, diff)


class NNSearcher:
    """Exact 1-NN over a fixed point set.

    Uses a kd-tree for ``D <= 8`` and a chunked ``|q|^2 - 2 q.p + |p|^2`` scan
    otherwise.  Returned squared distances are recomputed from the
    difference vectors, so they carry no cancellation error.
    """

    def __init__(self, points: np.ndarray, use_tree: bool | None = None):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise ValueError("NN search needs a nonempty 2-d point set")
        self.points = points
        if use_tree is None:
            use_tree = points.shape[1] <= KDTREE_MAX_DIM
        self._tree = cKDTree(points, balanced_tree=False) if use_tree else None
        self._norms = None if use_tree else np.einsum("ij,ij->i", points, points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.points.shape[1]:
            raise ValueError(
                f"queries have shape {queries.shape}, points have D={self.points.shape[1]}"
            )
        if len(queries) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        if self._tree is not None:
            _, idx = self._tree.query(queries, k=1)
            idx = np.asarray(idx, dtype=np.int64)
        else:
            idx = np.empty(len(queries), dtype=np.int64)
            step = max(1, _CHUNK_ENTRIES // len(self.points))
            for s in range(0, len(queries), step):
                q = queries[s : s + step]
                # in place: |p|^2 - 2 q.p (|q|^2 does not change the argmin)
                d2 = q @ self.points.T
                d2 *= -2.0
                d2 += self._norms
                idx[s : s + step] = np.argmin(d2, axis=1)
        return idx, _sqdist_rows(queries, self.points[idx])


def nearest_neighbors(points: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of each query's nearest point."""
    return NNSearcher(points).query(queries)


def exhaustive_knn(cloud: np.ndarray, q: np.ndarray, k: int) -> list[tuple[int, float]]:
    """True top-k by squared Euclidean distance; ties go to the lower row id."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or len(cloud) == 0:
        raise ValueError("exhaustive_knn needs a nonempty cloud")
    if not 1 <= k <= len(cloud):
        raise ValueError(f"k={k} must lie in [1, {len(cloud)}]")
    d2 = _sqdist_rows(cloud, np.asarray(q, dtype=np.float64)[None, :])
    order = np.lexsort((np.arange(len(d2)), d2))[:k]
    return [(int(i), float(d2[i])) for i in order]


@dataclass
class BeamResult:
    """Approximate neighbors as multi-indices with squared distances, ascending."""

    indices: np.ndarray  # (K, k) multi-indices
    flat: np.ndarray  # (K,) row-major leaf ids
    distances: np.ndarray  # (K,) squared distances

    def __len__(self) -> int:
        return len(self.flat)

    @property
    def neighbors(self) -> list[tuple[tuple[int, ...], float]]:
        return [(tuple(int(x) for x in m), float(d)) for m, d in zip(self.indices, self.distances)]


def _select(dist: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest distances, ties by smaller key, sorted ascending."""
    n = dist.shape[-1]
    if k >= n:
        return np.lexsort((keys, dist))
    kth = np.partition(dist, k - 1)[k - 1]
    below = np.flatnonzero(dist < kth)
    at = np.flatnonzero(dist == kth)
    at = at[np.argsort(keys[at], kind="stable")][: k - len(below)]
    cand = np.concatenate([below, at])
    return cand[np.lexsort((keys[cand], dist[cand]))]


def beam_search(
    tt: TTCloud, mc: MarginalCores, q: np.ndarray, K: int, check_state: bool = False
) -> BeamResult:
    """Level-wise beam descent through the centroid tree.

    Keeps the ``K`` best prefixes at each level.  For every kept prefix a
    state matrix ``L = G_1[:, i_1, :] ... G_l[:, i_l, :]`` (``D x r_l``) is
    carried, so the children centroids are ``L @ ~G_{l+1}`` and the final
    level yields exact leaf distances.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (tt.feature_dim,):
        raise ValueError(f"query has shape {q.shape}, expected ({tt.feature_dim},)")
    if K < 1:
        raise ValueError("beam width must be >= 1")
    if K > tt.n_leaves:
        warnings.warn(f"beam width {K} clamped to leaf count {tt.n_leaves}", stacklevel=2)
        K = tt.n_leaves
    dims = tt.shape.sample_dims

    d = _sqdist_rows(mc.level1, q[None, :])
    sel = _select(d, np.arange(dims[0]), K)
    flat = sel.astype(np.int64)
    dist = d[sel]
    prefixes = sel[:, None]
    state = np.transpose(tt.cores[0][:, sel, :], (1, 0, 2))  # (K, D, r1)

    for l in range(1, tt.k):
        n_l = dims[l]
        children = np.einsum("kdr,rn->knd", state, mc.cores[l])  # (K, n_l, D)
        cd = children - q
        d = np.einsum("knd,knd->kn", cd, cd).ravel()
        keys = (flat[:, None] * n_l + np.arange(n_l)[None, :]).ravel()
        pick = _select(d, keys, K)
        parent, child = np.divmod(pick, n_l)
        flat = keys[pick]
        dist = d[pick]
        prefixes = np.concatenate([prefixes[parent], child[:, None]], axis=1)
        state = np.einsum(
            "kdr,krs->kds", state[parent], np.transpose(tt.cores[l][:, child, :], (1, 0, 2))
        )
        if check_state:
            _assert_states(tt, prefixes, state)

    return BeamResult(prefixes, flat, dist)


def _assert_states(tt: TTCloud, prefixes: np.ndarray, state: np.ndarray) -> None:
    for p, L in zip(prefixes, state):
        ref = tt.cores[0][:, p[0], :]
        for core, i in zip(tt.cores[1:], p[1:]):
            ref = ref @ core[:, i, :]
        scale = max(np.abs(ref).max(), 1e-300)
        if np.abs(ref - L).max() > 1e-10 * scale:
            raise AssertionError(f"beam state for prefix {tuple(p)} drifted from chain product")


def _rowwise_lexsort(keys: np.ndarray, d: np.ndarray) -> np.ndarray:
    o = np.argsort(keys, axis=1, kind="stable")
    o2 = np.argsort(np.take_along_axis(d, o, axis=1), axis=1, kind="stable")
    return np.take_along_axis(o, o2, axis=1)


def _topk_rows(d: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Row-wise positions of the k smallest (distance, key) pairs, sorted."""
    if k < d.shape[1]:
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(d, part, axis=1).max(axis=1)
        # rows with a tie straddling the boundary are re-selected by key
        for r in np.flatnonzero((d <= kth[:, None]).sum(axis=1) > k):
            part[r] = _select(d[r], keys[r], k)
    else:
        part = np.broadcast_to(np.arange(d.shape[1]), d.shape).copy()
    pd = np.take_along_axis(d, part, axis=1)
    pk = np.take_along_axis(keys, part, axis=1)
    return np.take_along_axis(part, _rowwise_lexsort(pk, pd), axis=1)


def beam_search_batch(
    tt: TTCloud, mc: MarginalCores, queries: np.ndarray, K: int
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`beam_search` over many queries.

    Returns ``(flat_ids, sqdist)``, each ``(B, min(K, N))`` and sorted
    ascending per row, with the same selection rule as the single-query
    version.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != tt.feature_dim:
        raise ValueError(f"queries have shape {queries.shape}, expected (B, {tt.feature_dim})")
    if K < 1:
        raise ValueError("beam width must be >= 1")
    K = min(K, tt.n_leaves)
    dims = tt.shape.sample_dims
    widest = max([dims[0]] + [min(K, tt.n_leaves) * n for n in dims[1:]])
    chunk = max(1, _CHUNK_ENTRIES // (widest * tt.feature_dim))
    out_ids = np.empty((len(queries), K), dtype=np.int64)
    out_d = np.empty((len(queries), K))
    for s in range(0, len(queries), chunk):
        ids, dd = _beam_chunk(tt, mc, queries[s : s + chunk], K)
        out_ids[s : s + chunk] = ids
        out_d[s : s + chunk] = dd
    return out_ids, out_d


def _beam_chunk(tt: TTCloud, mc: MarginalCores, Q: np.ndarray, K: int):
    dims = tt.shape.sample_dims
    B = len(Q)
    diff = mc.level1[None, :, :] - Q[:, None, :]
    d = np.einsum("bnd,bnd->bn", diff, diff)
    keys = np.broadcast_to(np.arange(dims[0]), (B, dims[0]))
    pos = _topk_rows(d, keys, min(K, dims[0]))
    flat = pos.astype(np.int64)
    dist = np.take_along_axis(d, pos, axis=1)
    state = np.transpose(tt.cores[0][:, flat, :], (1, 2, 0, 3))  # (B, K1, D, r1)
    for l in range(1, tt.k):
        n_l = dims[l]
        kc = state.shape[1]
        children = np.einsum("bkdr,rn->bknd", state, mc.cores[l])
        diff = children - Q[:, None, None, :]
        d = np.einsum("bknd,bknd->bkn", diff, diff).reshape(B, kc * n_l)
        keys = (flat[:, :, None] * n_l + np.arange(n_l)).reshape(B, kc * n_l)
        pos = _topk_rows(d, keys, min(K, kc * n_l))
        parent, child = np.divmod(pos, n_l)
        flat = np.take_along_axis(keys, pos, axis=1)
        dist = np.take_along_axis(d, pos, axis=1)
        if l < tt.k - 1:
            prev = np.take_along_axis(state, parent[:, :, None, None], axis=1)
            g = np.transpose(tt.cores[l][:, child, :], (1, 2, 0, 3))  # (B, K, r, s)
            state = np.einsum("bkdr,bkrs->bkds", prev, g)
    return flat, dist


def recall_of_beam(
    tt: TTCloud, mc: MarginalCores, queries: np.ndarray, K: int, oracle_cloud: np.ndarray | None = None
) -> float:
    """Fraction of queries whose exact nearest TT leaf is among the beam's top-K."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if oracle_cloud is None:
        oracle_cloud = materialize(tt)
    truth, _ = NNSearcher(oracle_cloud, use_tree=False).query(queries)
    ids, _ = beam_search_batch(tt, mc, queries, K)
    return float(np.mean(np.any(ids == truth[:, None], axis=1)))
