"""Vector files, key=value configs and parameter-budget matching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tt import TTShape

__all__ = [
    "VectorFileError",
    "MalformedHeaderError",
    "DimMismatchError",
    "TruncatedFileError",
    "VectorFile",
    "read_vectors",
    "write_vectors",
    "load_vectors",
    "save_vectors",
    "read_config",
    "matched_budget",
]

FORMATS = ("fvecs", "raw-f32", "raw-f64")
_RAW_MAGIC = b"VECR"
_RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIQII")  # magic, version, count, dim, dtype
_DTYPE_CODES = {"raw-f32": (1, np.dtype("<f4")), "raw-f64": (2, np.dtype("<f8"))}


class VectorFileError(ValueError):
    """Base class for unreadable vector files."""


class MalformedHeaderError(VectorFileError):
    pass


class DimMismatchError(VectorFileError):
    pass


class TruncatedFileError(VectorFileError):
    pass


@dataclass
class VectorFile:
    """A vector file on disk.

    ``fmt="auto"`` picks ``fvecs`` for a ``.fvecs`` suffix, ``raw-f32`` for
    ``.f32`` and ``raw-f64`` otherwise.  ``count`` and ``dim`` are filled in
    by :func:`read_vectors`.
    """

    path: str | os.PathLike
    fmt: str = "auto"
    count: int | None = None
    dim: int | None = None

    def __post_init__(self):
        if self.fmt == "auto":
            p = str(self.path)
            self.fmt = "fvecs" if p.endswith(".fvecs") else "raw-f32" if p.endswith(".f32") else "raw-f64"
        if self.fmt not in FORMATS:
            raise ValueError(f"unknown vector format {self.fmt!r}; choose from {FORMATS}")


def _read_fvecs(buf: bytes, path) -> np.ndarray:
    if len(buf) == 0:
        return np.zeros((0, 0))
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is shorter than one fvecs dim field")
    d = struct.unpack_from("<i", buf)[0]
    if d <= 0:
        raise MalformedHeaderError(f"{path}: record dim {d} is not positive")
    rec = 4 * (d + 1)
    if len(buf) % rec:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is not a whole number of {rec}-byte records")
    raw = np.frombuffer(buf, dtype="<i4").reshape(-1, d + 1)
    bad = np.flatnonzero(raw[:, 0] != d)
    if len(bad):
        raise DimMismatchError(f"{path}: record {bad[0]} has dim {raw[bad[0], 0]}, first record has {d}")
    return raw[:, 1:].view("<f4").astype(np.float64)


def _read_raw(buf: bytes, fmt: str, path) -> np.ndarray:
    if len(buf) < _RAW_HEADER.size:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is shorter than the {_RAW_HEADER.size}-byte header")
    magic, version, count, dim, code = _RAW_HEADER.unpack_from(buf)
    if magic != _RAW_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != _RAW_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    by_code = {c: (name, dt) for name, (c, dt) in _DTYPE_CODES.items()}
    if code not in by_code:
        raise MalformedHeaderError(f"{path}: unknown dtype code {code}")
    name, dt = by_code[code]
    if fmt != name:
        raise DimMismatchError(f"{path}: header says {name}, caller asked for {fmt}")
    need = _RAW_HEADER.size + count * dim * dt.itemsize
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: header declares {count}x{dim} but file has {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise MalformedHeaderError(f"{path}: {len(buf) - need} trailing bytes after {count}x{dim} payload")
    return np.frombuffer(buf, dtype=dt, offset=_RAW_HEADER.size).reshape(count, dim).astype(np.float64)


def read_vectors(vf: VectorFile) -> np.ndarray:
    """Load a ``(count, dim)`` float64 matrix and record its size on ``vf``."""
    with open(vf.path, "rb") as fh:
        buf = fh.read()
    out = _read_fvecs(buf, vf.path) if vf.fmt == "fvecs" else _read_raw(buf, vf.fmt, vf.path)
    vf.count, vf.dim = out.shape
    return out


def write_vectors(cloud: np.ndarray, vf: VectorFile) -> None:
    """Write ``cloud``; raw formats round-trip exactly at their precision."""
    cloud = np.asarray(cloud)
    if cloud.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {cloud.shape}")
    n, d = cloud.shape
    with open(vf.path, "wb") as fh:
        if vf.fmt == "fvecs":
            if n and d == 0:
                raise ValueError("fvecs cannot hold zero-dim records")
            rec = np.empty((n, d + 1), dtype="<i4")
            rec[:, 0] = d
            rec[:, 1:] = cloud.astype("<f4").view("<i4")
            fh.write(rec.tobytes())
        else:
            code, dt = _DTYPE_CODES[vf.fmt]
            fh.write(_RAW_HEADER.pack(_RAW_MAGIC, _RAW_VERSION, n, d, code))
            fh.write(np.ascontiguousarray(cloud, dtype=dt).tobytes())
    vf.count, vf.dim = n, d


def load_vectors(path, fmt: str = "auto") -> np.ndarray:
    return read_vectors(VectorFile(path, fmt))


def save_vectors(cloud: np.ndarray, path, fmt: str = "auto") -> None:
    write_vectors(cloud, VectorFile(path, fmt))


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    Keys are normalized to underscores so ``probe-k`` and ``probe_k`` agree.
    """
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            out[key.replace("-", "_")] = value
    return out


def matched_budget(candidates: Sequence[TTShape], target_params: int) -> tuple[TTShape, int]:
    """The candidate with the most parameters not exceeding ``target_params``.

    Ties keep the earliest candidate.  Returns ``(shape, parameter count)``.
    """
    if not candidates:
        raise ValueError("no candidate shapes given")
    counts = [c.param_count() for c in candidates]
    fits = [i for i, c in enumerate(counts) if c <= target_params]
    if not fits:
        raise ValueError(
            f"no candidate fits a budget of {target_params} parameters; the smallest needs {min(counts)}"
        )
    best = max(fits, key=lambda i: (counts[i], -i))
    return candidates[best], counts[best]
