"""Sparse COO tensors, FROSTT ingestion and a brute-force MTTKRP oracle."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class TensorFormatError(ValueError):
    """Raised for malformed or empty tensor files."""


@dataclass(frozen=True)
class SparseTensorCoo:
    """Coordinate-list sparse tensor with zero-based coordinates.

    ``coords`` is an ``(nnz, order)`` int64 array and ``values`` the aligned
    float64 array. Duplicate coordinates are not allowed; use
    :meth:`from_entries` to build one with duplicates summed.
    """

    dims: tuple[int, ...]
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        if coords.ndim != 2 or coords.shape[1] != len(dims):
            raise ValueError(f"coords must have shape (nnz, {len(dims)})")
        if values.shape != (coords.shape[0],):
            raise ValueError("values must align with coords")
        if coords.size and (coords.min() < 0 or np.any(coords >= np.asarray(dims))):
            raise ValueError("coordinate out of range for dims")
        coords.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_entries(cls, dims, coords, values) -> "SparseTensorCoo":
        """Build a tensor, summing values that share a coordinate tuple."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(dims))
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if coords.shape[0] == 0:
            return cls(dims, coords, values)
        uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
        summed = np.zeros(uniq.shape[0], dtype=np.float64)
        np.add.at(summed, inverse.reshape(-1), values)
        return cls(dims, uniq, summed)

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def density(self) -> float:
        return density(self.dims, self.nnz)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dims)
        out[tuple(self.coords.T)] = self.values
        return out


def density(dims: Sequence[int], nnz: int) -> float:
    """Fraction of the index box occupied by nonzeros."""
    return nnz / math.prod(int(d) for d in dims)


@dataclass(frozen=True)
class FactorMatrices:
    """One dense ``I_n x rank`` matrix per mode."""

    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        mats = tuple(np.ascontiguousarray(m, dtype=np.float64) for m in self.matrices)
        if not mats:
            raise ValueError("need at least one factor matrix")
        rank = mats[0].shape[1] if mats[0].ndim == 2 else -1
        for m in mats:
            if m.ndim != 2 or m.shape[1] != rank or rank < 1:
                raise ValueError("factor matrices must be 2-D with a common rank")
            if not np.all(np.isfinite(m)):
                raise ValueError("factor matrices must be finite")
        object.__setattr__(self, "matrices", mats)

    @property
    def rank(self) -> int:
        return self.matrices[0].shape[1]

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, n):
        return self.matrices[n]

    @classmethod
    def random(cls, dims: Sequence[int], rank: int, seed: int = 0x5EED) -> "FactorMatrices":
        """Uniform [0, 1) factors from a seeded generator."""
        rng = np.random.default_rng(seed)
        return cls(tuple(rng.random((int(d), rank)) for d in dims))

    def check_dims(self, dims: Sequence[int]) -> None:
        if len(self.matrices) != len(dims):
            raise ValueError(f"expected {len(dims)} factor matrices, got {len(self.matrices)}")
        for n, (m, d) in enumerate(zip(self.matrices, dims)):
            if m.shape[0] != d:
                raise ValueError(f"factor {n} has {m.shape[0]} rows, mode length is {d}")


def load_frostt(path: str | os.PathLike, dims: Sequence[int] | None = None) -> SparseTensorCoo:
    """Read a FROSTT ``.tns`` file (1-based indices followed by a value).

    Lines starting with ``#`` and blank lines are skipped. Mode lengths are the
    per-mode maximum index unless ``dims`` is given.
    """
    rows: list[list[int]] = []
    vals: list[float] = []
    order = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if order is None:
                order = len(parts) - 1
                if order < 1:
                    raise TensorFormatError(f"{path}:{lineno}: expected indices and a value")
            if len(parts) != order + 1:
                raise TensorFormatError(
                    f"{path}:{lineno}: expected {order + 1} fields, got {len(parts)}")
            try:
                idx = [int(p) for p in parts[:-1]]
                val = float(parts[-1])
            except ValueError as exc:
                raise TensorFormatError(f"{path}:{lineno}: {exc}") from None
            if min(idx) < 1:
                raise TensorFormatError(f"{path}:{lineno}: indices are 1-based, got {min(idx)}")
            rows.append(idx)
            vals.append(val)
    if not rows:
        raise TensorFormatError(f"{path}: tensor file has no entries")
    coords = np.asarray(rows, dtype=np.int64) - 1
    if dims is None:
        dims = tuple(int(d) for d in coords.max(axis=0) + 1)
    else:
        dims = tuple(int(d) for d in dims)
        if len(dims) != order:
            raise TensorFormatError(f"{path}: dims override has {len(dims)} modes, file has {order}")
        if np.any(coords >= np.asarray(dims)):
            raise TensorFormatError(f"{path}: index exceeds dims override {dims}")
    return SparseTensorCoo.from_entries(dims, coords, np.asarray(vals))


def save_frostt(t: SparseTensorCoo, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for c, v in zip(t.coords, t.values):
            fh.write(" ".join(str(int(i) + 1) for i in c) + f" {float(v)!r}\n")


def dense_mttkrp_oracle(t: SparseTensorCoo, factors: FactorMatrices, mode: int) -> np.ndarray:
    """Mode-``mode`` MTTKRP by direct summation over nonzeros and rank columns."""
    factors.check_dims(t.dims)
    rank = factors.rank
    out = np.zeros((t.dims[mode], rank))
    mats = [m.tolist() for m in factors.matrices]
    for c, v in zip(t.coords.tolist(), t.values.tolist()):
        row = out[c[mode]]
        for f in range(rank):
            acc = v
            for k, ik in enumerate(c):
                if k != mode:
                    acc *= mats[k][ik][f]
            row[f] += acc
    return out


def random_tensor(dims: Sequence[int], nnz: int, seed: int = 0, skew: float = 0.0) -> SparseTensorCoo:
    """Random sparse tensor with ``nnz`` distinct coordinates.

    ``skew > 0`` draws each coordinate from a power-law over the mode, which
    concentrates nonzeros in low indices the way real data sets do.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    total = math.prod(dims)
    if nnz > total:
        raise ValueError(f"cannot place {nnz} nonzeros in {total} cells")
    seen: set[tuple[int, ...]] = set()
    out: list[tuple[int, ...]] = []
    while len(out) < nnz:
        need = nnz - len(out)
        batch = np.empty((2 * need + 16, len(dims)), dtype=np.int64)
        for n, d in enumerate(dims):
            if skew > 0:
                u = rng.random(batch.shape[0])
                batch[:, n] = np.minimum((d * u ** (1.0 + skew)).astype(np.int64), d - 1)
            else:
                batch[:, n] = rng.integers(0, d, size=batch.shape[0])
        for row in map(tuple, batch.tolist()):
            if row not in seen:
                seen.add(row)
                out.append(row)
                if len(out) == nnz:
                    break
    values = rng.random(nnz) + 0.5
    return SparseTensorCoo(dims, np.asarray(out, dtype=np.int64), values)
