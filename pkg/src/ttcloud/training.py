"""Fitting TT point clouds to data.

Stage 1 is plain SGD on the cores with optional gradient normalization and a
step-decay learning rate.  Stage 2 (:func:`als_refine`) is block-coordinate
least squares on one core at a time with the nearest-neighbor assignments
held fixed.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import LossConfig, combined_step_loss, sliced_wasserstein_distance
from .search import NNSearcher
from .tt import TTCloud, _prefix_partials, _suffix_partials, materialize, save_tt

__all__ = [
    "TrainConfig",
    "TrainReport",
    "PRESETS",
    "preset",
    "lr_at",
    "sgd_train",
    "als_refine",
    "als_objective",
    "train",
    "heldout_sw",
]

log = logging.getLogger(__name__)

HELDOUT_PROJECTIONS = 512
HELDOUT_SEED = 12345
HELDOUT_MAX_ROWS = 16384


@dataclass
class TrainConfig:
    iterations: int = 1 << 13
    lr0: float = 1e3
    decay_factor: float = 1.0 / 3.0
    decay_every: int = 256
    grad_normalize: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    als_iterations: int = 0
    als_alpha: float = 0.001
    checkpoint_every: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.als_iterations < 0 or not 0.0 <= self.als_alpha <= 1.0:
            raise ValueError("invalid ALS settings")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


# Stage-1/2 recipes.  "ood" and "ann" carry the published schedules; "toy"
# is tuned for small 2-d clouds with plain (non-Riemannian) SGD.
PRESETS: dict[str, TrainConfig] = {
    "ood": TrainConfig(
        iterations=1 << 13, lr0=1e3, decay_factor=1 / 3, decay_every=256,
        loss=LossConfig(sw_weight=1.0, sw_projections=32, nn_weight=0.1, nn_alpha=0.1, nn_sample_size=1 << 11),
    ),
    "ann": TrainConfig(
        iterations=1 << 13, lr0=1e2, decay_factor=1 / 3, decay_every=1 << 11,
        loss=LossConfig(sw_weight=1.0, sw_projections=32, nn_weight=0.1, nn_alpha=0.1, nn_sample_size=1 << 15),
        als_iterations=256, als_alpha=0.001,
    ),
    "toy": TrainConfig(
        iterations=1 << 13, lr0=1.0, decay_factor=1 / 3, decay_every=1024,
        loss=LossConfig(sw_weight=1.0, sw_projections=32, nn_weight=0.1, nn_alpha=0.1, nn_sample_size=1 << 11),
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    """A copy of a named preset with top-level or ``loss_*`` fields overridden."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]
    loss_kw = {k[5:]: v for k, v in overrides.items() if k.startswith("loss_")}
    top = {k: v for k, v in overrides.items() if not k.startswith("loss_")}
    return replace(base, loss=replace(base.loss, **loss_kw), **top)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """``lr0 * decay_factor ** (step // decay_every)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_every)


@dataclass
class TrainReport:
    steps: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    sw: list[float] = field(default_factory=list)
    nn_fwd: list[float] = field(default_factory=list)
    nn_inv: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    initial_sw: float = math.nan
    final_sw: float = math.nan
    als_history: list[tuple[int, int, float, float]] = field(default_factory=list)

    def record(self, step: int, lr: float, loss: float, comps: dict[str, float]) -> dict:
        rec = {
            "step": step,
            "lr": lr,
            "loss": loss,
            "sw": comps.get("sw", math.nan),
            "nn_fwd": comps.get("nn_fwd", math.nan),
            "nn_inv": comps.get("nn_inv", math.nan),
        }
        self.steps.append(step)
        self.lr.append(lr)
        self.loss.append(loss)
        self.sw.append(rec["sw"])
        self.nn_fwd.append(rec["nn_fwd"])
        self.nn_inv.append(rec["nn_inv"])
        return rec


def heldout_sw(X: np.ndarray, tt: TTCloud, n_proj: int = HELDOUT_PROJECTIONS, seed: int = HELDOUT_SEED) -> float:
    """Empirical SW distance between the TT leaves and ``X`` on fixed directions.

    Uses at most ``HELDOUT_MAX_ROWS`` rows from each side (fixed subsample),
    so it stays cheap for large clouds.
    """
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    if len(X) > HELDOUT_MAX_ROWS:
        X = X[np.sort(rng.choice(len(X), HELDOUT_MAX_ROWS, replace=False))]
    if tt.n_leaves > HELDOUT_MAX_ROWS:
        from .tt import rows

        Y = rows(tt, np.sort(rng.choice(tt.n_leaves, HELDOUT_MAX_ROWS, replace=False)))
    else:
        Y = materialize(tt)
    return sliced_wasserstein_distance(X, Y, n_proj=n_proj, seed=seed)


class NonFiniteError(FloatingPointError):
    pass


def sgd_train(
    X: np.ndarray,
    tt: TTCloud,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    diagnostics: bool = True,
) -> tuple[TTCloud, TrainReport]:
    """Stage-1 SGD.  Returns a new TTCloud; the input is not modified.

    With ``grad_normalize`` the concatenated core gradient is rescaled to unit
    norm, so every step moves the parameters by exactly ``lr_at(step)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tt.feature_dim:
        raise ValueError(f"data has shape {X.shape} but the TT has D={tt.feature_dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("training data contains non-finite values")
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    cores = [c.copy() for c in tt.cores]
    cur = TTCloud(cores)
    if diagnostics:
        report.initial_sw = heldout_sw(X, cur)
    ref = None
    if cfg.loss.nn_weight > 0 and cfg.loss.nn_alpha < 1 and cfg.loss.nn_ref_sample_size is None:
        ref = NNSearcher(X)
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for step in range(cfg.iterations):
            lr = lr_at(step, cfg)
            res = combined_step_loss(X, cur, cfg.loss, rng, ref)
            g = np.concatenate([x.ravel() for x in res.core_grads])
            if not (math.isfinite(res.value) and np.all(np.isfinite(g))):
                raise NonFiniteError(f"non-finite loss/gradient at step {step}: {res.components}")
            norm = float(np.linalg.norm(g))
            if norm > 0:
                scale = lr / norm if cfg.grad_normalize else lr
                for c, gc in zip(cores, res.core_grads):
                    c -= scale * gc
            if not all(np.all(np.isfinite(c)) for c in cores):
                raise NonFiniteError(f"cores became non-finite at step {step}: {res.components}")
            cur = TTCloud(cores)
            if step % cfg.checkpoint_every == 0 or step == cfg.iterations - 1:
                rec = report.record(step, lr, res.value, res.components)
                if sink is not None:
                    sink.write(json.dumps({k: rec[k] for k in ("step", "lr", "sw", "nn_fwd", "nn_inv")}) + "\n")
                if checkpoint_dir is not None:
                    save_tt(cur, Path(checkpoint_dir) / f"step{step:06d}.ttpc")
                log.debug("step %d lr %.3g loss %.6g %s", step, lr, res.value, res.components)
    finally:
        if sink is not None:
            sink.close()
    report.wall_time = time.perf_counter() - t0
    if diagnostics:
        report.final_sw = heldout_sw(X, cur)
    return cur, report


# ---------------------------------------------------------------------------
# ALS refinement
# ---------------------------------------------------------------------------


@dataclass
class _Assignment:
    fwd: np.ndarray  # nearest leaf of each data row
    inv: np.ndarray  # nearest data row of each leaf


def _assign(X: np.ndarray, Y: np.ndarray, searcher: NNSearcher) -> _Assignment:
    fwd, _ = NNSearcher(Y).query(X)
    inv, _ = searcher.query(Y)
    return _Assignment(fwd, inv)


def als_objective(X: np.ndarray, Y: np.ndarray, asg: _Assignment, alpha: float) -> float:
    """Frozen-assignment NN objective ``a*sum|X_i - Y_fwd(i)|^2 + (1-a)*sum|X_inv(j) - Y_j|^2``."""
    f = X - Y[asg.fwd]
    b = X[asg.inv] - Y
    return float(alpha * np.einsum("ij,ij->", f, f) + (1.0 - alpha) * np.einsum("ij,ij->", b, b))


def _targets(X: np.ndarray, n_leaves: int, asg: _Assignment, alpha: float):
    """Per-leaf weights and targets of the equivalent weighted least squares."""
    d = X.shape[1]
    counts = np.bincount(asg.fwd, minlength=n_leaves).astype(np.float64)
    sums = np.zeros((n_leaves, d))
    np.add.at(sums, asg.fwd, X)
    w = alpha * counts + (1.0 - alpha)
    num = alpha * sums + (1.0 - alpha) * X[asg.inv]
    t = np.divide(num, w[:, None], out=np.zeros_like(num), where=w[:, None] > 0)
    return w, t


def _solve_core(tt: TTCloud, l: int, w: np.ndarray, t: np.ndarray, ridge: float) -> np.ndarray:
    """Minimize ``sum_j w_j |Y_j - t_j|^2 + ridge*|G_l - G_l_old|^2`` over core ``l``."""
    dims = tt.shape.sample_dims
    d = tt.feature_dim
    old = tt.cores[l]
    right = _suffix_partials(tt)[l + 1]  # (r_l, R)
    n_l = dims[l]
    if l == 0:
        W = w.reshape(n_l, -1)  # (n1, R)
        T = t.reshape(n_l, -1, d)
        gram = np.einsum("ir,br,er->ibe", W, right, right)
        rhs = np.einsum("ir,ird,br->idb", W, T, right)  # (n1, D, r1)
        rb = right.shape[0]
        A = gram + ridge * np.eye(rb)
        b = rhs + ridge * np.transpose(old, (1, 0, 2))
        sol = np.linalg.solve(A[:, None, :, :], b[..., None])[..., 0]  # (n1, D, r1)
        return np.transpose(sol, (1, 0, 2))
    left = _prefix_partials(tt)[l - 1]  # (M, D, r_{l-1})
    M = left.shape[0]
    W = w.reshape(M, n_l, -1)
    T = t.reshape(M, n_l, -1, d)
    ra, rb = old.shape[0], old.shape[2]
    LL = np.einsum("mda,mdc->mac", left, left)
    tmp = np.einsum("mir,br,er->mibe", W, right, right)
    gram = np.einsum("mibe,mac->iabce", tmp, LL).reshape(n_l, ra * rb, ra * rb)
    u = np.einsum("mir,mird,mda->ira", W, T, left)
    rhs = np.einsum("ira,br->iab", u, right).reshape(n_l, ra * rb)
    A = gram + ridge * np.eye(ra * rb)
    b = rhs + ridge * np.transpose(old, (1, 0, 2)).reshape(n_l, ra * rb)
    sol = np.linalg.solve(A, b[..., None])[..., 0]
    return np.transpose(sol.reshape(n_l, ra, rb), (1, 0, 2))


def als_refine(
    X: np.ndarray,
    tt: TTCloud,
    als_iterations: int,
    alpha: float,
    ridge: float = 1e-8,
    history: list | None = None,
) -> TTCloud:
    """Stage-2 refinement under the NN objective.

    Each iteration recomputes both NN assignments, then sweeps the cores
    ``1..k`` and replaces each by the exact minimizer of the
    frozen-assignment objective (plus a small proximal ridge), so the
    objective never increases within a sweep.  ``history`` (if given)
    receives ``(iteration, core, before, after)`` tuples.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tt.feature_dim:
        raise ValueError(f"data has shape {X.shape} but the TT has D={tt.feature_dim}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    cur = tt.copy()
    if als_iterations == 0:
        return cur
    searcher = NNSearcher(X)
    for it in range(als_iterations):
        Y = materialize(cur)
        asg = _assign(X, Y, searcher)
        w, t = _targets(X, cur.n_leaves, asg, alpha)
        for l in range(cur.k):
            before = als_objective(X, Y, asg, alpha) if history is not None else None
            new_core = _solve_core(cur, l, w, t, ridge)
            if not np.all(np.isfinite(new_core)):
                raise FloatingPointError(f"ALS produced non-finite core {l} at iteration {it}")
            cores = list(cur.cores)
            cores[l] = new_core
            cur = TTCloud(cores)
            Y = materialize(cur)
            if history is not None:
                history.append((it, l, before, als_objective(X, Y, asg, alpha)))
    return cur


def train(
    X: np.ndarray,
    tt: TTCloud,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[TTCloud, TrainReport]:
    """SGD stage followed by ``cfg.als_iterations`` ALS sweeps."""
    out, report = sgd_train(X, tt, cfg, metrics_path, checkpoint_dir)
    if cfg.als_iterations:
        hist: list = []
        out = als_refine(X, out, cfg.als_iterations, cfg.als_alpha, history=hist)
        report.als_history = hist
        report.final_sw = heldout_sw(X, out)
    return out, report


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
