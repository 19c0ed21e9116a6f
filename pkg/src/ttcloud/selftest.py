"""Fast oracle checks behind ``ttcloud selftest``.

Each check compares a library routine against a brute-force reference on
small random instances and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import itertools
import os
import tempfile
from typing import Callable, Iterator

import numpy as np

from .io import load_vectors, save_vectors
from .losses import nn_loss_total, sliced_wasserstein, w1_1d
from .search import beam_search, exhaustive_knn
from .training import als_refine
from .tt import TTCloud, TTShape, centroid, init_tt, marginal_cores, materialize

Check = tuple[str, bool, str]


def _random_shape(rng: np.random.Generator, max_leaves: int = 256) -> TTShape:
    while True:
        k = int(rng.integers(1, 4))
        dims = [int(x) for x in rng.integers(1, 9, size=k)]
        if np.prod(dims) <= max_leaves:
            ranks = [int(x) for x in rng.integers(1, 5, size=k - 1)] + [1]
            return TTShape(dims, int(rng.integers(1, 6)), ranks)


def check_centroids(rng: np.random.Generator, trials: int = 10) -> Check:
    worst = 0.0
    for _ in range(trials):
        shape = _random_shape(rng)
        tt = init_tt(shape, seed=rng)
        mc = marginal_cores(tt)
        Y = materialize(tt).reshape(*shape.sample_dims, shape.feature_dim)
        for level in range(1, tt.k + 1):
            means = Y.mean(axis=tuple(range(level, tt.k))) if level < tt.k else Y
            for prefix in itertools.product(*(range(n) for n in shape.sample_dims[:level])):
                ref = means[prefix]
                err = np.abs(centroid(tt, mc, prefix) - ref).max() / max(np.abs(ref).max(), 1e-300)
                worst = max(worst, err)
    return "centroids", worst <= 1e-9, f"max rel err {worst:.2e}"


def check_full_beam(rng: np.random.Generator, trials: int = 5) -> Check:
    for _ in range(trials):
        tt = init_tt(_random_shape(rng), seed=rng)
        q = rng.standard_normal(tt.feature_dim)
        res = beam_search(tt, marginal_cores(tt), q, tt.n_leaves)
        ref = exhaustive_knn(materialize(tt), q, tt.n_leaves)
        if res.flat.tolist() != [i for i, _ in ref] or not np.allclose(res.distances, [d for _, d in ref], rtol=1e-12, atol=1e-12):
            return "full-beam", False, f"mismatch on shape {tt.shape}"
    return "full-beam", True, f"{trials} instances equal exhaustive search"


def _fd_worst(tt: TTCloud, f: Callable[[TTCloud], float], grads: list[np.ndarray], h: float = 1e-5) -> float:
    worst = 0.0
    for l, core in enumerate(tt.cores):
        for idx in np.ndindex(core.shape):
            plus, minus = tt.copy(), tt.copy()
            plus.cores[l][idx] += h
            minus.cores[l][idx] -= h
            fd = (f(plus) - f(minus)) / (2 * h)
            worst = max(worst, abs(fd - grads[l][idx]) / max(abs(fd), abs(grads[l][idx]), 1e-8))
    return worst


def check_gradients(rng: np.random.Generator) -> Check:
    tt = init_tt(TTShape([3, 4], 3, [2, 1]), seed=rng)
    X = rng.standard_normal((tt.n_leaves, 3))
    s = int(rng.integers(1 << 31))

    def sw(t):
        return sliced_wasserstein(X, t, 8, np.random.default_rng(s))

    def nn(t):
        return nn_loss_total(X[:5], X, t, 0.3)

    worst_sw = _fd_worst(tt, lambda t: sw(t).value, sw(tt).core_grads)
    worst_nn = _fd_worst(tt, lambda t: nn(t).value, nn(tt).core_grads)
    worst = max(worst_sw, worst_nn)
    return "gradients", worst <= 1e-4, f"SW {worst_sw:.1e}, NN total {worst_nn:.1e}"


def check_w1(rng: np.random.Generator, trials: int = 20) -> Check:
    for _ in range(trials):
        n = int(rng.integers(1, 7))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        brute = min(np.abs(a - b[list(p)]).sum() for p in itertools.permutations(range(n)))
        if abs(w1_1d(a, b) - brute) > 1e-12:
            return "w1-matching", False, f"n={n}: {w1_1d(a, b)} vs {brute}"
    return "w1-matching", True, f"{trials} trials equal the best permutation"


def check_als(rng: np.random.Generator) -> Check:
    X = rng.standard_normal((64, 2))
    tt = init_tt(TTShape([4, 4], 2, [3, 1]), seed=rng, calibrate=X)
    hist: list = []
    als_refine(X, tt, 8, 0.3, history=hist)
    bad = sum(after > before * (1 + 1e-12) + 1e-12 for _, _, before, after in hist)
    return "als-monotone", bad == 0, f"{len(hist)} core updates, {bad} increases"


def check_io_roundtrip(rng: np.random.Generator) -> Check:
    A = rng.standard_normal((7, 3))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "a.raw")
        save_vectors(A, path, "raw-f64")
        ok = np.array_equal(load_vectors(path, "raw-f64"), A)
    return "raw-f64-roundtrip", ok, "bit-identical" if ok else "differs"


CHECKS = (check_centroids, check_full_beam, check_gradients, check_w1, check_als, check_io_roundtrip)


def run_all(seed: int = 0) -> Iterator[Check]:
    rng = np.random.default_rng(seed)
    for check in CHECKS:
        yield check(rng)
