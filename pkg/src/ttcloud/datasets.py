"""Synthetic point clouds: the 2-d toy shapes and Gaussian-mixture benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ToySpec", "TOY_KINDS", "gen_toy", "gaussian_mixture", "ood_benchmark"]

TOY_KINDS = ("circles-grid", "semicircle", "mixture")

GRID_RADIUS = 0.3
DISC_RADIUS = 0.4
BLOB_CENTER = (0.0, 1.8)
BLOB_SIGMA = 0.2


@dataclass(frozen=True)
class ToySpec:
    kind: str
    n_points: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ValueError(f"unknown toy kind {self.kind!r}; choose from {TOY_KINDS}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")


def _on_circle(theta: np.ndarray, radius: float = 1.0) -> np.ndarray:
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _loop_angles(n: int, rng: np.random.Generator) -> np.ndarray:
    # density (1 + cos t) / (2 pi) on [0, 2 pi), by rejection against 2 / (2 pi)
    out = np.empty(0)
    while len(out) < n:
        t = rng.uniform(0.0, 2 * np.pi, size=2 * (n - len(out)) + 16)
        keep = rng.uniform(0.0, 2.0, size=len(t)) < 1.0 + np.cos(t)
        out = np.concatenate([out, t[keep]])
    return out[:n]


def gen_toy(spec: ToySpec) -> np.ndarray:
    """One of the three 2-d toy clouds, deterministic per seed.

    ``circles-grid``: 16 circles of radius 0.3 centered on ``{0,1,2,3}^2``,
    circle chosen uniformly, uniform angle.  ``semicircle``: unit circle,
    angle uniform on ``[0, pi]``.  ``mixture``: equal-weight mix of a unit
    loop with angle density ``(1 + cos t) / 2pi``, a uniform disc of radius
    0.4 inside it, and a Gaussian blob (sigma 0.2) centered at ``(0, 1.8)``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    if spec.kind == "semicircle":
        return _on_circle(rng.uniform(0.0, np.pi, size=n))
    if spec.kind == "circles-grid":
        which = rng.integers(0, 16, size=n)
        centers = np.stack([which // 4, which % 4], axis=1).astype(np.float64)
        return centers + _on_circle(rng.uniform(0.0, 2 * np.pi, size=n), GRID_RADIUS)
    comp = rng.integers(0, 3, size=n)
    out = np.empty((n, 2))
    m = comp == 0
    out[m] = _on_circle(_loop_angles(int(m.sum()), rng))
    m = comp == 1
    k = int(m.sum())
    out[m] = _on_circle(rng.uniform(0.0, 2 * np.pi, size=k), 1.0) * (
        DISC_RADIUS * np.sqrt(rng.uniform(size=k))
    )[:, None]
    m = comp == 2
    out[m] = np.asarray(BLOB_CENTER) + BLOB_SIGMA * rng.standard_normal((int(m.sum()), 2))
    return out


def toy_components(spec: ToySpec) -> np.ndarray:
    """Mixture component label of each point of ``gen_toy(spec)`` (mixture kind only)."""
    if spec.kind != "mixture":
        raise ValueError("components are only defined for the mixture toy")
    return np.random.default_rng(spec.seed).integers(0, 3, size=spec.n_points)


def gaussian_mixture(
    n: int,
    dim: int,
    n_components: int,
    seed: int = 0,
    center_scale: float = 4.0,
    sigma: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Isotropic Gaussian mixture with equal weights.

    Returns ``(points, labels, centers)``; centers are drawn from
    ``N(0, center_scale^2 I)``.
    """
    rng = np.random.default_rng(seed)
    centers = center_scale * rng.standard_normal((n_components, dim))
    labels = rng.integers(0, n_components, size=n)
    return centers[labels] + sigma * rng.standard_normal((n, dim)), labels, centers


def ood_benchmark(
    n_train: int = 50_000,
    n_test: int = 1000,
    dim: int = 64,
    n_components: int = 8,
    offset: float = 3.0,
    sigma: float = 1.0,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Normal bank, normal test queries and anomalies for an OOD experiment.

    Anomalies are normal-class draws shifted by ``offset * sigma`` along a
    random unit direction (one direction per anomaly).
    """
    rng = np.random.default_rng(seed)
    centers = 4.0 * rng.standard_normal((n_components, dim))

    def draw(m):
        lab = rng.integers(0, n_components, size=m)
        return centers[lab] + sigma * rng.standard_normal((m, dim))

    train = draw(n_train)
    normal = draw(n_test)
    u = rng.standard_normal((n_test, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    anomal = draw(n_test) + offset * sigma * u
    return {"train": train, "test_normal": normal, "test_anomal": anomal}
