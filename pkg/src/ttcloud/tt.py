"""Tensor-train point clouds.

A TT point cloud stores an implicit ``N x D`` matrix whose row index is
factorized as ``N = N_1 * ... * N_k``.  Row ``(i_1, ..., i_k)`` is the chain
product ``G_1[:, i_1, :] @ G_2[:, i_2, :] @ ... @ G_k[:, i_k, :]`` where the
first core has shape ``(D, N_1, r_1)`` and core ``l`` has shape
``(r_{l-1}, N_l, r_l)`` with ``r_k = 1``.

Leaves are enumerated in row-major (C) order over ``(N_1, ..., N_k)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

__all__ = [
    "TTShape",
    "TTCloud",
    "MarginalCores",
    "init_tt",
    "flat_to_multi",
    "multi_to_flat",
    "row",
    "materialize",
    "marginal_cores",
    "centroid",
    "tt_backward",
    "save_tt",
    "load_tt",
    "write_tt",
    "read_tt",
]

DEFAULT_MATERIALIZE_LIMIT = 1 << 26  # entries N * D
_MAGIC = b"TTPC"
_VERSION = 1


@dataclass(frozen=True)
class TTShape:
    """Sample factorization, feature dimension and TT-ranks."""

    sample_dims: tuple[int, ...]
    feature_dim: int
    ranks: tuple[int, ...]

    def __init__(self, sample_dims: Sequence[int], feature_dim: int, ranks: Sequence[int] | int):
        dims = tuple(int(n) for n in sample_dims)
        if isinstance(ranks, (int, np.integer)):
            ranks = (int(ranks),) * (len(dims) - 1) + (1,)
        ranks = tuple(int(r) for r in ranks)
        if len(dims) < 1:
            raise ValueError("a TT needs at least one core")
        if any(n < 1 for n in dims):
            raise ValueError(f"sample dims must be positive, got {dims}")
        if int(feature_dim) < 1:
            raise ValueError(f"feature dim must be positive, got {feature_dim}")
        if len(ranks) != len(dims):
            raise ValueError(f"need {len(dims)} ranks, got {len(ranks)}")
        if any(r < 1 for r in ranks):
            raise ValueError(f"ranks must be positive, got {ranks}")
        if ranks[-1] != 1:
            raise ValueError(f"last TT-rank must be 1, got {ranks[-1]}")
        n = 1
        for d in dims:
            n *= d
        if n > np.iinfo(np.int64).max:
            raise ValueError("leaf count overflows int64")
        object.__setattr__(self, "sample_dims", dims)
        object.__setattr__(self, "feature_dim", int(feature_dim))
        object.__setattr__(self, "ranks", ranks)

    @property
    def k(self) -> int:
        return len(self.sample_dims)

    @property
    def n_leaves(self) -> int:
        n = 1
        for d in self.sample_dims:
            n *= d
        return n

    def core_shapes(self) -> list[tuple[int, int, int]]:
        left = (self.feature_dim,) + self.ranks[:-1]
        return [(a, n, b) for a, n, b in zip(left, self.sample_dims, self.ranks)]

    def param_count(self) -> int:
        return sum(a * n * b for a, n, b in self.core_shapes())


class TTCloud:
    """A point cloud in tensor-train form.

    Parameters
    ----------
    cores : sequence of ndarray
        ``cores[0]`` has shape ``(D, N_1, r_1)``, ``cores[l]`` has shape
        ``(r_l, N_{l+1}, r_{l+1})``; the last rank must be 1.
    """

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = [np.ascontiguousarray(c, dtype=np.float64) for c in cores]
        if not cores or any(c.ndim != 3 for c in cores):
            raise ValueError("cores must be a nonempty list of 3-d arrays")
        for a, b in zip(cores[:-1], cores[1:]):
            if a.shape[2] != b.shape[0]:
                raise ValueError(f"rank mismatch between cores {a.shape} and {b.shape}")
        for c in cores:
            if not np.all(np.isfinite(c)):
                raise ValueError("cores contain non-finite entries")
        self.shape = TTShape(
            [c.shape[1] for c in cores], cores[0].shape[0], [c.shape[2] for c in cores]
        )
        self.cores = cores

    def __repr__(self) -> str:
        s = self.shape
        return f"TTCloud(dims={list(s.sample_dims)}, D={s.feature_dim}, ranks={list(s.ranks)})"

    @property
    def k(self) -> int:
        return self.shape.k

    @property
    def n_leaves(self) -> int:
        return self.shape.n_leaves

    @property
    def feature_dim(self) -> int:
        return self.shape.feature_dim

    def param_count(self) -> int:
        return sum(c.size for c in self.cores)

    def copy(self) -> "TTCloud":
        return TTCloud([c.copy() for c in self.cores])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([c.ravel() for c in self.cores])


def init_tt(
    shape: TTShape,
    seed: int | np.random.Generator | None = 0,
    scheme: str = "gaussian",
    calibrate: np.ndarray | None = None,
    calibration_samples: int = 4096,
) -> TTCloud:
    """Random TT cores.

    ``scheme="gaussian"`` draws core ``l`` i.i.d. from ``N(0, 1/r_l)`` so that
    materialized entries have unit variance.  ``scheme="ones"`` fills every
    core with ones (handy for tests).

    If ``calibrate`` is a data matrix, the cloud is afterwards affinely mapped
    so that its per-feature mean and std match those of the data, estimated
    from ``calibration_samples`` random leaves.  The mean shift uses rank
    channel 0 as a constant pass-through, so it needs ``r_1 >= 2`` when ``k > 1``;
    with rank 1 only the scale is matched.
    """
    rng = np.random.default_rng(seed)
    if scheme == "gaussian":
        cores = [rng.standard_normal(s) / np.sqrt(s[2]) for s in shape.core_shapes()]
    elif scheme == "ones":
        cores = [np.ones(s) for s in shape.core_shapes()]
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    tt = TTCloud(cores)
    if calibrate is not None:
        tt = _calibrate(tt, np.asarray(calibrate, dtype=np.float64), rng, calibration_samples)
    return tt


def _calibrate(tt: TTCloud, data: np.ndarray, rng: np.random.Generator, n_samples: int) -> TTCloud:
    if data.ndim != 2 or data.shape[1] != tt.feature_dim:
        raise ValueError(f"calibration data has shape {data.shape}, TT has D={tt.feature_dim}")
    cores = [c.copy() for c in tt.cores]
    shift_ok = tt.k == 1 or tt.shape.ranks[0] >= 2
    if tt.k > 1 and shift_ok:
        for c in cores[1:]:
            c[0, :, :] = 0.0
            c[0, :, 0] = 1.0
    cal = TTCloud(cores)
    ids = rng.integers(0, cal.n_leaves, size=min(n_samples, cal.n_leaves))
    sample = rows(cal, ids)
    mu, sd = sample.mean(axis=0), sample.std(axis=0)
    target_mu, target_sd = data.mean(axis=0), data.std(axis=0)
    scale = np.where(sd > 0, target_sd / np.where(sd > 0, sd, 1.0), 1.0)
    cores[0] *= scale[:, None, None]
    if shift_ok:
        cores[0][:, :, 0] += (target_mu - scale * mu)[:, None]
    return TTCloud(cores)


def flat_to_multi(i: int | np.ndarray, shape: TTShape) -> tuple[int, ...] | np.ndarray:
    """Row-major unflattening of a leaf id (scalar or array of ids)."""
    n = shape.n_leaves
    arr = np.asarray(i)
    if np.any(arr < 0) or np.any(arr >= n):
        raise IndexError(f"leaf index out of range [0, {n})")
    out = np.unravel_index(arr, shape.sample_dims)
    if arr.ndim == 0:
        return tuple(int(x) for x in out)
    return np.stack(out, axis=-1)


def multi_to_flat(m: Sequence[int] | np.ndarray, shape: TTShape) -> int | np.ndarray:
    arr = np.asarray(m)
    if arr.shape[-1] != shape.k:
        raise IndexError(f"multi-index must have length {shape.k}")
    if np.any(arr < 0) or np.any(arr >= np.asarray(shape.sample_dims)):
        raise IndexError("multi-index out of bounds")
    flat = np.ravel_multi_index(tuple(np.moveaxis(arr, -1, 0)), shape.sample_dims)
    if arr.ndim == 1:
        return int(flat)
    return flat


def _check_prefix(tt: TTCloud, prefix: Sequence[int]) -> tuple[int, ...]:
    prefix = tuple(int(x) for x in prefix)
    if len(prefix) > tt.k:
        raise IndexError(f"prefix of length {len(prefix)} for a {tt.k}-core TT")
    for j, (i, n) in enumerate(zip(prefix, tt.shape.sample_dims)):
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for dim {j} of size {n}")
    return prefix


def row(tt: TTCloud, m: Sequence[int]) -> np.ndarray:
    """Evaluate one leaf by the left-to-right chain product."""
    m = _check_prefix(tt, m)
    if len(m) != tt.k:
        raise IndexError(f"multi-index must have length {tt.k}")
    v = tt.cores[0][:, m[0], :]
    for core, i in zip(tt.cores[1:], m[1:]):
        v = v @ core[:, i, :]
    return v[:, 0].copy()


def rows(tt: TTCloud, flat_ids: np.ndarray) -> np.ndarray:
    """Evaluate many leaves given flat ids; returns ``(len(ids), D)``."""
    flat_ids = np.asarray(flat_ids, dtype=np.int64)
    if flat_ids.size == 0:
        return np.zeros((0, tt.feature_dim))
    mi = flat_to_multi(flat_ids, tt.shape).reshape(-1, tt.k)
    v = np.transpose(tt.cores[0][:, mi[:, 0], :], (1, 0, 2))  # (B, D, r1)
    for j, core in enumerate(tt.cores[1:], start=1):
        v = np.einsum("bda,bac->bdc", v, np.transpose(core[:, mi[:, j], :], (1, 0, 2)))
    return v[:, :, 0]


def _prefix_partials(tt: TTCloud) -> list[np.ndarray]:
    """``out[l]`` has shape ``(N_1...N_{l+1}, D, r_{l+1})``: chain products of the first l+1 cores."""
    p = np.transpose(tt.cores[0], (1, 0, 2))
    out = [p]
    for core in tt.cores[1:]:
        m, d, _ = p.shape
        p = np.einsum("mda,aib->midb", p, core).reshape(m * core.shape[1], d, core.shape[2])
        out.append(p)
    return out


def _suffix_partials(tt: TTCloud) -> list[np.ndarray]:
    """``out[l]`` has shape ``(r_l, N_{l+1}...N_k)``; ``out[k] = ones((1, 1))``."""
    k = tt.k
    out: list[np.ndarray] = [np.ones((1, 1))] * (k + 1)
    s = np.ones((1, 1))
    for l in range(k - 1, 0, -1):
        core = tt.cores[l]
        s = np.einsum("aib,bm->aim", core, s).reshape(core.shape[0], -1)
        out[l] = s
    return out


def materialize(tt: TTCloud, limit: int = DEFAULT_MATERIALIZE_LIMIT) -> np.ndarray:
    """All leaves as an ``(N, D)`` matrix in row-major leaf order.

    Raises ``MemoryError`` when ``N * D`` exceeds ``limit``.
    """
    if tt.n_leaves * tt.feature_dim > limit:
        raise MemoryError(
            f"materializing {tt.n_leaves} x {tt.feature_dim} exceeds limit of {limit} entries"
        )
    return _prefix_partials(tt)[-1][:, :, 0].copy()


def tt_backward(tt: TTCloud, grad_y: np.ndarray) -> list[np.ndarray]:
    """Pull a gradient w.r.t. the materialized cloud back to the cores.

    ``grad_y`` is ``dL/dY`` with shape ``(N, D)``; returns ``dL/dG_l`` for all
    cores, each with the core's shape.
    """
    n, d = tt.n_leaves, tt.feature_dim
    if grad_y.shape != (n, d):
        raise ValueError(f"grad has shape {grad_y.shape}, expected {(n, d)}")
    dims = tt.shape.sample_dims
    prefix = _prefix_partials(tt)
    suffix = _suffix_partials(tt)
    grads = []
    # first core: Y[i1, rest, d] = sum_b G1[d, i1, b] S[b, rest]
    g = grad_y.reshape(dims[0], -1, d)
    grads.append(np.einsum("ird,br->dib", g, suffix[1]))
    left = 1
    for l in range(1, tt.k):
        left *= dims[l - 1]
        g = grad_y.reshape(left, dims[l], -1, d)
        t = np.einsum("mird,mda->air", g, prefix[l - 1])
        grads.append(np.einsum("air,br->aib", t, suffix[l + 1]))
    return grads


@dataclass(frozen=True)
class MarginalCores:
    """Suffix-marginalized cores.

    ``cores[a]`` (zero-based) has shape ``(r_a, N_{a+1})`` for ``a >= 1`` and
    ``(D, N_1)`` for ``a = 0``; centroids at level ``a+1`` are the TT chain
    ``G_1, ..., G_a, cores[a]``.  ``level1`` caches the first-level centroids
    densely as ``(N_1, D)``.
    """

    cores: tuple[np.ndarray, ...]
    level1: np.ndarray
    global_mean: np.ndarray


def marginal_cores(tt: TTCloud) -> MarginalCores:
    """Backward induction ``~G_a = G_a . mean_i ~G_{a+1}[:, i]`` with ``~G_k = G_k``."""
    k = tt.k
    tilde: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    tilde[k - 1] = tt.cores[k - 1][:, :, 0].copy()
    for a in range(k - 2, -1, -1):
        nxt = tilde[a + 1]
        s = nxt.sum(axis=1) / nxt.shape[1]
        tilde[a] = np.einsum("aib,b->ai", tt.cores[a], s)
    level1 = np.ascontiguousarray(tilde[0].T)
    return MarginalCores(tuple(tilde), level1, level1.mean(axis=0))


def centroid(tt: TTCloud, mc: MarginalCores, prefix: Sequence[int]) -> np.ndarray:
    """Mean of all leaves whose multi-index starts with ``prefix``.

    An empty prefix gives the global mean; a full-length prefix gives the
    leaf itself.
    """
    prefix = _check_prefix(tt, prefix)
    a = len(prefix)
    if a == 0:
        return mc.global_mean.copy()
    if a == 1:
        return mc.level1[prefix[0]].copy()
    v = tt.cores[0][:, prefix[0], :]
    for core, i in zip(tt.cores[1 : a - 1], prefix[1 : a - 1]):
        v = v @ core[:, i, :]
    return v @ mc.cores[a - 1][:, prefix[a - 1]]


def write_tt(tt: TTCloud, fh: BinaryIO) -> None:
    s = tt.shape
    fh.write(_MAGIC)
    fh.write(struct.pack("<III", _VERSION, s.k, s.feature_dim))
    fh.write(struct.pack(f"<{s.k}I", *s.sample_dims))
    fh.write(struct.pack(f"<{s.k}I", *s.ranks))
    for c in tt.cores:
        fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def read_tt(fh: BinaryIO) -> TTCloud:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"not a TT point cloud file (magic {magic!r})")
    head = fh.read(12)
    if len(head) != 12:
        raise ValueError("truncated TT header")
    version, k, d = struct.unpack("<III", head)
    if version != _VERSION:
        raise ValueError(f"unsupported TT file version {version}")
    raw = fh.read(8 * k)
    if len(raw) != 8 * k:
        raise ValueError("truncated TT header")
    dims = struct.unpack(f"<{k}I", raw[: 4 * k])
    ranks = struct.unpack(f"<{k}I", raw[4 * k :])
    shape = TTShape(dims, d, ranks)
    cores = []
    for cs in shape.core_shapes():
        nbytes = 8 * cs[0] * cs[1] * cs[2]
        buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise ValueError("truncated TT core data")
        cores.append(np.frombuffer(buf, dtype="<f8").reshape(cs).astype(np.float64))
    return TTCloud(cores)


def save_tt(tt: TTCloud, path) -> None:
    with open(path, "wb") as fh:
        write_tt(tt, fh)


def load_tt(path) -> TTCloud:
    with open(path, "rb") as fh:
        return read_tt(fh)
