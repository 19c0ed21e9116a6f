"""Training objectives for TT point clouds with analytic core gradients.

Every loss is first differentiated w.r.t. the TT leaves (an ``N x D``
matrix, or a subset of its rows) and then pulled back to the cores with
:func:`ttcloud.tt.tt_backward` / :func:`tt_backward_rows`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .search import NNSearcher, beam_search_batch
from .tt import TTCloud, flat_to_multi, marginal_cores, materialize, rows, tt_backward

__all__ = [
    "LossConfig",
    "LossValueAndGrad",
    "w1_1d",
    "w1_1d_grad",
    "w1_empirical",
    "random_directions",
    "sliced_wasserstein",
    "sliced_wasserstein_distance",
    "nn_loss_forward",
    "nn_loss_inverse",
    "nn_loss_total",
    "combined_step_loss",
    "tt_backward_rows",
]


@dataclass
class LossConfig:
    """Weights and sampling sizes of the combined training loss.

    ``nn_ref_sample_size`` subsamples the reference cloud of the inverse NN
    term; ``None`` uses every row, which is exact but costs ``O(N |X| D)``
    per step.
    """

    sw_weight: float = 1.0
    sw_projections: int = 32
    nn_weight: float = 0.1
    nn_alpha: float = 0.1
    nn_sample_size: int = 2048
    nn_ref_sample_size: int | None = None
    sw_normalize: bool = False
    exact_nn_cap: int = 1 << 20
    nn_beam: int = 8

    def __post_init__(self):
        if self.sw_weight < 0 or self.nn_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.sw_weight == 0 and self.nn_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 <= self.nn_alpha <= 1.0:
            raise ValueError(f"nn_alpha must lie in [0, 1], got {self.nn_alpha}")
        if self.sw_projections < 1 or self.nn_sample_size < 1:
            raise ValueError("projection count and NN sample size must be positive")


@dataclass
class LossValueAndGrad:
    value: float
    core_grads: list[np.ndarray]
    components: dict[str, float] = field(default_factory=dict)

    def scaled(self, w: float) -> "LossValueAndGrad":
        return LossValueAndGrad(
            w * self.value, [w * g for g in self.core_grads], {k: v for k, v in self.components.items()}
        )

    def __add__(self, other: "LossValueAndGrad") -> "LossValueAndGrad":
        comps = dict(self.components)
        comps.update(other.components)
        return LossValueAndGrad(
            self.value + other.value,
            [a + b for a, b in zip(self.core_grads, other.core_grads)],
            comps,
        )


def _pair(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if len(xs) != len(ys):
        raise ValueError(f"W1 needs equal sample counts, got {len(xs)} and {len(ys)}")
    if len(xs) == 0:
        raise ValueError("W1 needs at least one sample")
    return xs, ys


def w1_1d(xs, ys) -> float:
    """Sum of absolute differences between the order statistics."""
    xs, ys = _pair(xs, ys)
    return float(np.abs(np.sort(xs) - np.sort(ys)).sum())


def w1_1d_grad(xs, ys) -> tuple[float, np.ndarray]:
    """W1 value and its (sub)gradient w.r.t. ``ys``; ties follow stable sort order."""
    xs, ys = _pair(xs, ys)
    oy = np.argsort(ys, kind="stable")
    diff = ys[oy] - np.sort(xs, kind="stable")
    grad = np.empty_like(ys)
    grad[oy] = np.sign(diff)
    return float(np.abs(diff).sum()), grad


def w1_empirical(xs, ys) -> float:
    """W1 between two empirical measures of any sizes (mean-normalized).

    Integrates ``|F_x - F_y|`` over the merged support; equals
    ``w1_1d(xs, ys) / n`` when both samples have ``n`` points.
    """
    xs = np.sort(np.asarray(xs, dtype=np.float64).ravel())
    ys = np.sort(np.asarray(ys, dtype=np.float64).ravel())
    if len(xs) == 0 or len(ys) == 0:
        raise ValueError("W1 needs nonempty samples")
    allv = np.concatenate([xs, ys])
    allv.sort(kind="mergesort")
    widths = np.diff(allv)
    fx = np.searchsorted(xs, allv[:-1], side="right") / len(xs)
    fy = np.searchsorted(ys, allv[:-1], side="right") / len(ys)
    return float(np.sum(np.abs(fx - fy) * widths))


def random_directions(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` unit vectors uniform on the sphere, as columns of a ``(d, n)`` matrix."""
    u = rng.standard_normal((d, n))
    return u / np.linalg.norm(u, axis=0, keepdims=True)


def sliced_wasserstein_distance(
    a: np.ndarray, b: np.ndarray, n_proj: int = 512, seed: int = 0, directions: np.ndarray | None = None
) -> float:
    """Held-out SW diagnostic: mean over fixed directions of :func:`w1_empirical`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if directions is None:
        directions = random_directions(a.shape[1], n_proj, np.random.default_rng(seed))
    pa, pb = a @ directions, b @ directions
    return float(np.mean([w1_empirical(pa[:, j], pb[:, j]) for j in range(directions.shape[1])]))


def tt_backward_rows(tt: TTCloud, flat_ids: np.ndarray, grad_rows: np.ndarray) -> list[np.ndarray]:
    """Core gradients when only the listed leaves carry a gradient.

    Equivalent to :func:`tt_backward` on a dense gradient that is zero
    outside ``flat_ids`` (repeated ids accumulate), without materializing.
    """
    flat_ids = np.asarray(flat_ids, dtype=np.int64)
    grads = [np.zeros_like(c) for c in tt.cores]
    if flat_ids.size == 0:
        return grads
    mi = flat_to_multi(flat_ids, tt.shape).reshape(-1, tt.k)
    k = tt.k
    # left[l]: (B, D, r_l) chain of cores 0..l-1 ; right[l]: (B, r_l) chain of cores l+1..k-1
    sl = [np.transpose(c[:, mi[:, j], :], (1, 0, 2)) for j, c in enumerate(tt.cores)]
    left = [None] * k
    acc = sl[0]
    for l in range(1, k):
        left[l] = acc
        acc = np.einsum("bda,bac->bdc", acc, sl[l])
    right = [None] * k
    acc_r = np.ones((len(flat_ids), 1))
    for l in range(k - 1, -1, -1):
        right[l] = acc_r
        if l > 0:
            acc_r = np.einsum("bac,bc->ba", sl[l], acc_r)
    g = np.asarray(grad_rows, dtype=np.float64)
    # first core: Y[d] = sum_b G1[d, i1, b] right0[b]
    np.add.at(grads[0], (slice(None), mi[:, 0], slice(None)),
              np.transpose(np.einsum("bd,bc->bdc", g, right[0]), (1, 0, 2)))
    for l in range(1, k):
        gl = np.einsum("bd,bda,bc->bac", g, left[l], right[l])
        np.add.at(grads[l], (slice(None), mi[:, l], slice(None)), np.transpose(gl, (1, 0, 2)))
    return grads


def _pull_back(tt: TTCloud, ids, grad_y: np.ndarray) -> list[np.ndarray]:
    if ids is None:
        return tt_backward(tt, grad_y)
    return tt_backward_rows(tt, ids, grad_y)


def sliced_wasserstein(
    X: np.ndarray,
    tt: TTCloud,
    n_proj: int,
    rng: np.random.Generator,
    normalize: bool = False,
    resample: bool = True,
    cap: int = 1 << 20,
) -> LossValueAndGrad:
    """Monte-Carlo sliced W1 between ``X`` and the TT leaves, with core gradients.

    Averages :func:`w1_1d` (a sum over matched order statistics) over
    ``n_proj`` random unit directions; ``normalize`` divides by the sample
    count.  When the sample counts differ and ``resample`` is set, the
    larger side is subsampled uniformly without replacement each call.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tt.feature_dim:
        raise ValueError(f"X has shape {X.shape}, TT has D={tt.feature_dim}")
    n, N = len(X), tt.n_leaves
    if n != N and not resample:
        raise ValueError(f"SW needs equal counts: |X|={n}, TT leaves={N}")
    u = random_directions(tt.feature_dim, n_proj, rng)
    if n > N:
        X = X[np.sort(rng.choice(n, size=N, replace=False))]
    m = min(n, N)
    if N > m:
        ids = np.sort(rng.choice(N, size=m, replace=False))
        Y = rows(tt, ids)
    else:
        ids = None
        Y = materialize(tt, limit=max(cap, N) * tt.feature_dim)
    # (n_proj, m) layout keeps each projection contiguous for sorting
    px, py = u.T @ X.T, u.T @ Y.T
    sx = np.sort(px, axis=1)
    oy = np.argsort(py, axis=1)
    diff = np.take_along_axis(py, oy, axis=1) - sx
    scale = 1.0 / (n_proj * (m if normalize else 1))
    value = float(np.abs(diff).sum() * scale)
    gpy = np.empty_like(py)
    np.put_along_axis(gpy, oy, np.sign(diff) * scale, axis=1)
    grad_y = gpy.T @ u.T
    return LossValueAndGrad(value, _pull_back(tt, ids, grad_y), {"sw": value})


def _leaf_assignment(tt: TTCloud, X: np.ndarray, cap: int, beam: int) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Nearest leaf of each row of X: (flat ids, squared dists, materialized leaves or None)."""
    if tt.n_leaves <= cap:
        Y = materialize(tt, limit=max(cap, tt.n_leaves) * tt.feature_dim)
        idx, d2 = NNSearcher(Y).query(X)
        return idx, d2, Y
    ids, d2 = beam_search_batch(tt, marginal_cores(tt), X, beam)
    return ids[:, 0], d2[:, 0], None


def nn_loss_forward(
    X_batch: np.ndarray, tt: TTCloud, cap: int = 1 << 20, beam: int = 8
) -> LossValueAndGrad:
    """``sum_i min_j |X[i] - Y[j]|^2``; only the assigned leaves receive gradient."""
    X_batch = np.asarray(X_batch, dtype=np.float64)
    if X_batch.ndim != 2 or len(X_batch) == 0:
        raise ValueError("forward NN loss needs a nonempty batch")
    if X_batch.shape[1] != tt.feature_dim:
        raise ValueError(f"batch has D={X_batch.shape[1]}, TT has D={tt.feature_dim}")
    idx, d2, Y = _leaf_assignment(tt, X_batch, cap, beam)
    value = float(d2.sum())
    if Y is not None:
        grad_y = np.zeros_like(Y)
        np.add.at(grad_y, idx, 2.0 * (Y[idx] - X_batch))
        grads = tt_backward(tt, grad_y)
    else:
        grads = tt_backward_rows(tt, idx, 2.0 * (rows(tt, idx) - X_batch))
    return LossValueAndGrad(value, grads, {"nn_fwd": value})


def nn_loss_inverse(
    X_ref: np.ndarray | NNSearcher, tt: TTCloud, cap: int = 1 << 20
) -> LossValueAndGrad:
    """``sum_j min_i |X[i] - Y[j]|^2`` over every TT leaf; all leaves receive gradient.

    ``X_ref`` may be a prebuilt :class:`NNSearcher` to reuse its index.
    """
    searcher = X_ref if isinstance(X_ref, NNSearcher) else NNSearcher(_nonempty(X_ref))
    if searcher.points.shape[1] != tt.feature_dim:
        raise ValueError(f"reference has D={searcher.points.shape[1]}, TT has D={tt.feature_dim}")
    Y = materialize(tt, limit=max(cap, tt.n_leaves) * tt.feature_dim)
    idx, d2 = searcher.query(Y)
    value = float(d2.sum())
    grad_y = 2.0 * (Y - searcher.points[idx])
    return LossValueAndGrad(value, tt_backward(tt, grad_y), {"nn_inv": value})


def _nonempty(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("reference cloud must be a nonempty 2-d array")
    return X


def nn_loss_total(
    X_batch: np.ndarray,
    X_ref: np.ndarray | NNSearcher,
    tt: TTCloud,
    alpha: float,
    cap: int = 1 << 20,
    beam: int = 8,
) -> LossValueAndGrad:
    """``alpha * forward + (1 - alpha) * inverse``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    parts = []
    comps = {}
    if alpha > 0:
        f = nn_loss_forward(X_batch, tt, cap, beam)
        parts.append(f.scaled(alpha))
        comps["nn_fwd"] = f.value
    if alpha < 1:
        inv = nn_loss_inverse(X_ref, tt, cap)
        parts.append(inv.scaled(1.0 - alpha))
        comps["nn_inv"] = inv.value
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    total.components = comps
    return total


def combined_step_loss(
    X: np.ndarray,
    tt: TTCloud,
    cfg: LossConfig,
    rng: np.random.Generator,
    ref: NNSearcher | None = None,
) -> LossValueAndGrad:
    """``sw_weight * SW + nn_weight * NN_total`` for one training step.

    The single ``rng`` draws, in order: SW directions and subsample, the
    forward-term batch of ``nn_sample_size`` rows, and (if configured) the
    inverse-term reference subsample.  ``ref`` caches a searcher over the
    full ``X`` for the inverse term.
    """
    X = np.asarray(X, dtype=np.float64)
    zero = LossValueAndGrad(0.0, [np.zeros_like(c) for c in tt.cores], {})
    out = zero
    comps: dict[str, float] = {}
    if cfg.sw_weight > 0:
        sw = sliced_wasserstein(X, tt, cfg.sw_projections, rng, normalize=cfg.sw_normalize, cap=cfg.exact_nn_cap)
        out = out + sw.scaled(cfg.sw_weight)
        comps["sw"] = sw.value
    if cfg.nn_weight > 0:
        bs = min(cfg.nn_sample_size, len(X))
        batch = X[np.sort(rng.choice(len(X), size=bs, replace=False))]
        if cfg.nn_ref_sample_size is not None and cfg.nn_ref_sample_size < len(X):
            r_ids = np.sort(rng.choice(len(X), size=cfg.nn_ref_sample_size, replace=False))
            reference: np.ndarray | NNSearcher = X[r_ids]
        else:
            reference = ref if ref is not None else X
        nn = nn_loss_total(batch, reference, tt, cfg.nn_alpha, cfg.exact_nn_cap, cfg.nn_beam)
        out = out + nn.scaled(cfg.nn_weight)
        comps.update(nn.components)
    out.components = comps
    return out
