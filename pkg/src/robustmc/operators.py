"""Sparse / low-rank matrix types and the elementary operators used by the solvers.

Index sets are plain ``(rows, cols)`` pairs of integer arrays.  Everything here is
immutable after construction: arrays are stored read-only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

ORTHO_TOL = 1e-10

IndexSet = Tuple[np.ndarray, np.ndarray]


class DimensionError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.asarray(a, dtype=dtype)
    if a.flags.writeable or not a.flags.c_contiguous:
        a = np.array(a, dtype=dtype, order="C")
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseCoo:
    """Coordinate-format sparse matrix with sorted, duplicate-free entries."""

    shape: Tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        m, n = (int(d) for d in self.shape)
        if m < 0 or n < 0:
            raise DimensionError(f"negative shape {self.shape}")
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        vals = np.asarray(self.vals, dtype=np.float64).ravel()
        if not (rows.size == cols.size == vals.size):
            raise DimensionError("rows, cols and vals must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n:
                raise DimensionError(f"index out of range for shape {(m, n)}")
            keys = rows * n + cols
            order = np.argsort(keys, kind="stable")
            keys = keys[order]
            if np.any(keys[1:] == keys[:-1]):
                raise ValueError("duplicate (row, col) entries")
            rows, cols, vals = rows[order], cols[order], vals[order]
        object.__setattr__(self, "shape", (m, n))
        object.__setattr__(self, "rows", _frozen(rows, np.int64))
        object.__setattr__(self, "cols", _frozen(cols, np.int64))
        object.__setattr__(self, "vals", _frozen(vals, np.float64))

    @classmethod
    def _trusted(cls, shape, rows, cols, vals) -> "SparseCoo":
        # caller guarantees sorted, unique, in-range indices
        obj = object.__new__(cls)
        object.__setattr__(obj, "shape", (int(shape[0]), int(shape[1])))
        object.__setattr__(obj, "rows", _frozen(rows, np.int64))
        object.__setattr__(obj, "cols", _frozen(cols, np.int64))
        object.__setattr__(obj, "vals", _frozen(vals, np.float64))
        return obj

    @classmethod
    def empty(cls, m: int, n: int) -> "SparseCoo":
        z = np.zeros(0)
        return cls._trusted((m, n), z, z, z)

    @classmethod
    def from_dense(cls, a, keep_zeros: bool = False) -> "SparseCoo":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise DimensionError("expected a 2-d array")
        if keep_zeros:
            r, c = np.indices(a.shape)
            r, c = r.ravel(), c.ravel()
        else:
            r, c = np.nonzero(a)
        return cls._trusted(a.shape, r, c, a[r, c])

    @property
    def nrows(self) -> int:
        return self.shape[0]

    @property
    def ncols(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    @property
    def indices(self) -> IndexSet:
        return self.rows, self.cols

    def entries(self) -> Iterator[Tuple[int, int, float]]:
        for i, j, v in zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()):
            yield i, j, v

    def with_values(self, vals) -> "SparseCoo":
        vals = np.asarray(vals, dtype=np.float64)
        if vals.shape != self.vals.shape:
            raise DimensionError("value array does not match support")
        return SparseCoo._trusted(self.shape, self.rows, self.cols, vals)

    def subset(self, mask_or_positions) -> "SparseCoo":
        sel = np.asarray(mask_or_positions)
        if sel.dtype != bool:
            sel = np.sort(sel)
        return SparseCoo._trusted(self.shape, self.rows[sel], self.cols[sel], self.vals[sel])

    def scaled(self, c: float) -> "SparseCoo":
        return self.with_values(c * self.vals)

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    @cached_property
    def csr_t(self) -> sp.csr_matrix:
        return self.csr.T.tocsr()

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.shape[0])

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.shape[1])

    def __repr__(self):
        return f"SparseCoo(shape={self.shape}, nnz={self.nnz})"


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed entries P_Omega(M) together with the sampling rate they were drawn at."""

    nrows: int
    ncols: int
    samples: SparseCoo
    p: float

    def __post_init__(self):
        if self.samples.shape != (self.nrows, self.ncols):
            raise DimensionError(
                f"samples shape {self.samples.shape} != {(self.nrows, self.ncols)}"
            )
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.p}")

    @classmethod
    def from_samples(cls, samples: SparseCoo, p: Optional[float] = None) -> "ObservationSet":
        m, n = samples.shape
        if p is None:
            p = samples.nnz / float(m * n)
        return cls(m, n, samples, float(p))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.nrows, self.ncols

    @property
    def empirical_rate(self) -> float:
        return self.samples.nnz / float(self.nrows * self.ncols)


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """``u @ diag(sigma) @ v.T`` with orthonormal ``u``, ``v`` and nonincreasing ``sigma``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        s = np.asarray(self.sigma, dtype=np.float64).ravel()
        if u.shape[1] != s.size or v.shape[1] != s.size:
            raise DimensionError(f"factor widths {u.shape[1]}, {s.size}, {v.shape[1]} disagree")
        if np.any(s < 0):
            raise ValueError("singular values must be nonnegative")
        if np.any(np.diff(s) > 0):
            raise ValueError("singular values must be nonincreasing")
        k = s.size
        eye = np.eye(k)
        if k and (np.abs(u.T @ u - eye).max() > ORTHO_TOL or np.abs(v.T @ v - eye).max() > ORTHO_TOL):
            raise ValueError("factor columns are not orthonormal")
        object.__setattr__(self, "u", _frozen(u, np.float64))
        object.__setattr__(self, "sigma", _frozen(s, np.float64))
        object.__setattr__(self, "v", _frozen(v, np.float64))

    @classmethod
    def _trusted(cls, u, sigma, v) -> "LowRankFactors":
        obj = object.__new__(cls)
        object.__setattr__(obj, "u", _frozen(u, np.float64))
        object.__setattr__(obj, "sigma", _frozen(sigma, np.float64))
        object.__setattr__(obj, "v", _frozen(v, np.float64))
        return obj

    @classmethod
    def zeros(cls, m: int, n: int) -> "LowRankFactors":
        return cls._trusted(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    def scaled(self, c: float) -> "LowRankFactors":
        if c < 0:
            return LowRankFactors._trusted(-self.u, -c * self.sigma, self.v)
        return LowRankFactors._trusted(self.u, c * self.sigma, self.v)

    def truncated(self, k: int) -> "LowRankFactors":
        return LowRankFactors._trusted(self.u[:, :k], self.sigma[:k], self.v[:, :k])

    def toarray(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def __repr__(self):
        return f"LowRankFactors(shape={self.shape}, rank={self.rank})"


@dataclass(frozen=True, eq=False)
class StructuredMatrix:
    """Implicit ``lowrank_coeff * (U S V^T) + sparse_coeff * S_sparse``."""

    shape: Tuple[int, int]
    lowrank: Optional[LowRankFactors] = None
    sparse: Optional[SparseCoo] = None
    lowrank_coeff: float = 1.0
    sparse_coeff: float = 1.0

    def __post_init__(self):
        shape = (int(self.shape[0]), int(self.shape[1]))
        object.__setattr__(self, "shape", shape)
        if self.lowrank is not None and self.lowrank.shape != shape:
            raise DimensionError(f"low-rank part {self.lowrank.shape} != {shape}")
        if self.sparse is not None and self.sparse.shape != shape:
            raise DimensionError(f"sparse part {self.sparse.shape} != {shape}")

    @classmethod
    def from_sparse(cls, s: SparseCoo, coeff: float = 1.0) -> "StructuredMatrix":
        return cls(s.shape, sparse=s, sparse_coeff=coeff)

    @classmethod
    def from_lowrank(cls, f: LowRankFactors, coeff: float = 1.0) -> "StructuredMatrix":
        return cls(f.shape, lowrank=f, lowrank_coeff=coeff)

    def matmat(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.shape[0], x.shape[1]))
        f = self.lowrank
        if f is not None and f.rank:
            out += (self.lowrank_coeff * f.u) @ (f.sigma[:, None] * (f.v.T @ x))
        if self.sparse is not None and self.sparse.nnz:
            out += self.sparse_coeff * (self.sparse.csr @ x)
        return out

    def rmatmat(self, y: np.ndarray) -> np.ndarray:
        out = np.zeros((self.shape[1], y.shape[1]))
        f = self.lowrank
        if f is not None and f.rank:
            out += (self.lowrank_coeff * f.v) @ (f.sigma[:, None] * (f.u.T @ y))
        if self.sparse is not None and self.sparse.nnz:
            out += self.sparse_coeff * (self.sparse.csr_t @ y)
        return out

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        if self.lowrank is not None:
            out += self.lowrank_coeff * self.lowrank.toarray()
        if self.sparse is not None:
            out += self.sparse_coeff * self.sparse.toarray()
        return out


def _check_indices(indices: IndexSet, shape) -> Tuple[np.ndarray, np.ndarray]:
    rows = np.asarray(indices[0], dtype=np.int64).ravel()
    cols = np.asarray(indices[1], dtype=np.int64).ravel()
    if rows.size != cols.size:
        raise DimensionError("row and column index arrays differ in length")
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]):
        raise DimensionError(f"index out of range for shape {tuple(shape)}")
    return rows, cols


Source = Union[np.ndarray, SparseCoo, LowRankFactors, StructuredMatrix, Callable]


def _entries_of(source, rows, cols) -> np.ndarray:
    if isinstance(source, LowRankFactors):
        return _lowrank_values(source, rows, cols)
    if isinstance(source, SparseCoo):
        return source.csr[rows, cols].A1 if rows.size else np.zeros(0)
    if isinstance(source, StructuredMatrix):
        vals = np.zeros(rows.size)
        if source.lowrank is not None:
            vals += source.lowrank_coeff * _lowrank_values(source.lowrank, rows, cols)
        if source.sparse is not None and rows.size:
            vals += source.sparse_coeff * source.sparse.csr[rows, cols].A1
        return vals
    if callable(source):
        return np.asarray(source(rows, cols), dtype=np.float64)
    return np.asarray(source, dtype=np.float64)[rows, cols]


def _source_shape(source):
    if isinstance(source, (LowRankFactors, SparseCoo, StructuredMatrix)):
        return source.shape
    if callable(source):
        return None
    return np.shape(source)


def project_observed(indices: IndexSet, source: Source, shape=None) -> SparseCoo:
    """Sampling projection: the entries of ``source`` at ``indices``, as a SparseCoo.

    ``source`` may be a dense array, a SparseCoo, LowRankFactors, a
    StructuredMatrix or a callable ``f(rows, cols) -> values`` (then ``shape``
    is required).  Every requested index is present in the output, zeros included.
    """
    src_shape = _source_shape(source)
    shape = tuple(shape) if shape is not None else src_shape
    if shape is None:
        raise DimensionError("shape is required for callable sources")
    if src_shape is not None and tuple(src_shape) != tuple(shape):
        raise DimensionError(f"source shape {src_shape} != {shape}")
    rows, cols = _check_indices(indices, shape)
    return SparseCoo(shape, rows, cols, _entries_of(source, rows, cols))


def hard_threshold(a: Union[SparseCoo, np.ndarray], zeta: float) -> SparseCoo:
    """Keep entries with ``|value| >= zeta``, drop the rest."""
    if zeta < 0 or np.isnan(zeta):
        raise ValueError(f"threshold must be >= 0, got {zeta}")
    if not isinstance(a, SparseCoo):
        a = SparseCoo.from_dense(a, keep_zeros=True)
    if zeta == 0:
        return a
    return a.subset(np.abs(a.vals) >= zeta)


def _lowrank_values(f: LowRankFactors, rows, cols) -> np.ndarray:
    if f.rank == 0 or rows.size == 0:
        return np.zeros(rows.size)
    return np.einsum("ik,ik->i", f.u[rows] * f.sigma, f.v[cols])


def eval_lowrank_entries(f: LowRankFactors, indices: IndexSet) -> SparseCoo:
    """Entries of ``U diag(sigma) V^T`` at the given indices in O(|indices| * k)."""
    rows, cols = _check_indices(indices, f.shape)
    return SparseCoo(f.shape, rows, cols, _lowrank_values(f, rows, cols))


def _as_vector(x, length, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != length:
        raise DimensionError(f"{what} has shape {x.shape}, expected ({length},)")
    return x


def structured_matvec(msm: StructuredMatrix, x) -> np.ndarray:
    x = _as_vector(x, msm.shape[1], "x")
    return msm.matmat(x[:, None])[:, 0]


def structured_rmatvec(msm: StructuredMatrix, y) -> np.ndarray:
    y = _as_vector(y, msm.shape[0], "y")
    return msm.rmatmat(y[:, None])[:, 0]


def incoherence(f: LowRankFactors) -> float:
    """max of the scaled row norms of U and V."""
    if f.rank == 0:
        raise ValueError("incoherence of a rank-0 factorization is undefined")
    m, n = f.shape
    r = f.rank
    mu_u = np.sqrt((f.u ** 2).sum(axis=1).max() * m / r)
    mu_v = np.sqrt((f.v ** 2).sum(axis=1).max() * n / r)
    return float(max(mu_u, mu_v))


def frob_norm(x) -> float:
    if isinstance(x, LowRankFactors):
        return float(np.linalg.norm(x.sigma))
    if isinstance(x, SparseCoo):
        return float(np.linalg.norm(x.vals))
    if isinstance(x, StructuredMatrix):
        total = 0.0
        lr = x.lowrank
        if lr is not None:
            total += (x.lowrank_coeff ** 2) * np.dot(lr.sigma, lr.sigma)
        if x.sparse is not None and x.sparse.nnz:
            s = x.sparse_coeff * x.sparse.vals
            total += np.dot(s, s)
            if lr is not None and lr.rank:
                lv = _lowrank_values(lr, x.sparse.rows, x.sparse.cols)
                total += 2.0 * x.lowrank_coeff * np.dot(s, lv)
        return float(np.sqrt(max(total, 0.0)))
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def frob_error(a: LowRankFactors, b: LowRankFactors) -> float:
    """||A - B||_F from factors only, O((m+n) k^2), without cancellation of squares."""
    if a.shape != b.shape:
        raise DimensionError(f"shapes {a.shape} and {b.shape} differ")
    if a.rank + b.rank == 0:
        return 0.0
    qu, ru = np.linalg.qr(np.hstack([a.u, b.u]))
    qv, rv = np.linalg.qr(np.hstack([a.v, b.v]))
    d = np.concatenate([a.sigma, -b.sigma])
    return float(np.linalg.norm((ru * d) @ rv.T))


def inf_norm(x, block_rows: int = 512) -> float:
    """Exact max-abs entry.  For LowRankFactors this evaluates every entry blockwise."""
    if isinstance(x, SparseCoo):
        return float(np.abs(x.vals).max()) if x.nnz else 0.0
    if isinstance(x, LowRankFactors):
        if x.rank == 0:
            return 0.0
        us = x.u * x.sigma
        best = 0.0
        for start in range(0, x.shape[0], block_rows):
            best = max(best, float(np.abs(us[start:start + block_rows] @ x.v.T).max()))
        return best
    if isinstance(x, StructuredMatrix):
        return float(np.abs(x.toarray()).max()) if x.shape[0] * x.shape[1] else 0.0
    x = np.asarray(x, dtype=np.float64)
    return float(np.abs(x).max()) if x.size else 0.0


def inf_norm_sampled(f: LowRankFactors, n_samples: int, rng) -> float:
    """Lower bound on ||f||_inf from ``n_samples`` uniformly random entries."""
    m, n = f.shape
    rows = rng.integers(0, m, n_samples)
    cols = rng.integers(0, n, n_samples)
    vals = _lowrank_values(f, rows, cols)
    return float(np.abs(vals).max()) if vals.size else 0.0


def spectral_density(s: SparseCoo) -> float:
    """Measured row/column sparsity: the largest fraction of nonzeros in any row or column."""
    m, n = s.shape
    if s.nnz == 0:
        return 0.0
    return float(max(s.row_counts().max() / n, s.col_counts().max() / m))


# ---------------------------------------------------------------- text format

def format_real(v: float) -> str:
    return f"{v:.17g}"


def write_coo(path, s: SparseCoo) -> None:
    """Header ``m n nnz`` then one ``i j value`` line per entry, sorted by (i, j)."""
    lines = [f"{s.nrows} {s.ncols} {s.nnz}"]
    lines.extend(f"{i} {j} {format_real(v)}" for i, j, v in s.entries())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_coo(path) -> SparseCoo:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: malformed header")
        m, n, nnz = (int(t) for t in header)
        body = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if body.shape != (nnz, 3):
        raise ValueError(f"{path}: expected {nnz} entries, found {body.shape[0]}")
    return SparseCoo((m, n), body[:, 0].astype(np.int64), body[:, 1].astype(np.int64), body[:, 2])


def write_dense(path, a) -> None:
    write_coo(path, SparseCoo.from_dense(np.atleast_2d(a), keep_zeros=True))


def read_dense(path) -> np.ndarray:
    return read_coo(path).toarray()


FACTOR_FILES = ("u.txt", "sigma.txt", "v.txt")


def write_factors(directory, f: LowRankFactors) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = [os.path.join(directory, name) for name in FACTOR_FILES]
    write_dense(paths[0], f.u)
    write_dense(paths[1], f.sigma[None, :])
    write_dense(paths[2], f.v)
    return paths


def read_factors(directory) -> LowRankFactors:
    u, s, v = (read_dense(os.path.join(directory, name)) for name in FACTOR_FILES)
    return LowRankFactors(u, s.ravel(), v)


def write_observations(path, obs: ObservationSet) -> None:
    write_coo(path, obs.samples)


def read_observations(path, p: Optional[float] = None) -> ObservationSet:
    return ObservationSet.from_samples(read_coo(path), p)


__all__: Sequence[str] = [
    "DimensionError", "SparseCoo", "ObservationSet", "LowRankFactors", "StructuredMatrix",
    "project_observed", "hard_threshold", "eval_lowrank_entries", "structured_matvec",
    "structured_rmatvec", "incoherence", "frob_norm", "frob_error", "inf_norm",
    "inf_norm_sampled", "spectral_density", "write_coo", "read_coo", "write_dense", "read_dense",
    "write_factors", "read_factors", "write_observations", "read_observations",
]
