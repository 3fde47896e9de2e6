"""Dense/sparse numeric kernels shared by every stage of the pipeline.

Dense matrices are plain ``float64`` numpy arrays. Sparse operators use a
row-compressed layout with sorted column indices, backed by scipy for the
product itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by PCG64 (the published PCG-XSL-RR 128/64 algorithm).

    numpy guarantees the PCG64 bit stream for a given seed across platforms,
    so draws made through ``integers``/``random``/``standard_normal`` are
    reproducible everywhere the same numpy major version is installed.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_dense(m) -> np.ndarray:
    out = np.ascontiguousarray(m, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class SparseRowMatrix:
    """Row-compressed sparse matrix with sorted, unique column indices per row."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    row_stochastic: bool = False
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ShapeError("row offsets do not match the number of stored entries")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("row offsets must be non-decreasing")
        if len(data) != len(indices):
            raise ShapeError("values and column indices differ in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise ValueError("column index out of range")
        row_of = np.repeat(np.arange(self.rows), np.diff(indptr))
        if len(indices) > 1:
            same_row = row_of[1:] == row_of[:-1]
            if np.any(same_row & (indices[1:] <= indices[:-1])):
                raise ValueError("column indices must be strictly increasing within a row")
        if self.row_stochastic:
            check_row_stochastic(self, allow_empty=False)
        csr = sp.csr_matrix((data, indices, indptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_coo(cls, rows, cols, target, source, values, *, row_stochastic=False):
        target = np.asarray(target, dtype=np.int64)
        source = np.asarray(source, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((source, target))
        target, source, values = target[order], source[order], values[order]
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(target, minlength=rows), out=indptr[1:])
        return cls(rows, cols, indptr, source, values, row_stochastic)

    @classmethod
    def identity(cls, n: int) -> "SparseRowMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n), True)

    @classmethod
    def from_dense(cls, m, *, row_stochastic=False) -> "SparseRowMatrix":
        m = as_dense(m)
        t, s = np.nonzero(m)
        return cls.from_coo(m.shape[0], m.shape[1], t, s, m[t, s], row_stochastic=row_stochastic)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_ids, weights=self.data, minlength=self.rows)

    def with_data(self, data, *, row_stochastic=None) -> "SparseRowMatrix":
        flag = self.row_stochastic if row_stochastic is None else row_stochastic
        return SparseRowMatrix(self.rows, self.cols, self.indptr, self.indices, data, flag)

    def scaled(self, c: float) -> "SparseRowMatrix":
        return self.with_data(self.data * c, row_stochastic=False)

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose_matmul(self, b: np.ndarray) -> np.ndarray:
        """``self.T @ b`` without materializing the transpose pattern."""
        b = as_dense(b)
        if b.shape[0] != self.rows:
            raise ShapeError(f"cannot multiply ({self.cols}x{self.rows}) by {b.shape}")
        return np.asarray(self._csr.T @ b)


def check_row_stochastic(m: SparseRowMatrix, *, allow_empty: bool, tol: float = 1e-9) -> None:
    counts = np.diff(m.indptr)
    if not allow_empty and np.any(counts == 0):
        raise ValueError("row-stochastic matrix has an empty row")
    if np.any(m.data < 0):
        raise ValueError("row-stochastic matrix has a negative entry")
    sums = m.row_sums()
    bad = (counts > 0) & (np.abs(sums - 1.0) > tol)
    if np.any(bad):
        raise ValueError(f"row {int(np.argmax(bad))} sums to {sums[bad][0]!r}, not 1")


def spmm(a: SparseRowMatrix, b) -> np.ndarray:
    """Exact sparse x dense product, accumulated row by row in stored order."""
    b = as_dense(b)
    if a.cols != b.shape[0]:
        raise ShapeError(f"cannot multiply ({a.rows}x{a.cols}) by {b.shape}")
    return np.asarray(a.to_scipy() @ b)


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def l2_normalize_rows(m, eps: float = 1e-12) -> np.ndarray:
    """Scale rows to unit length; rows with norm below ``eps`` pass through unchanged."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = as_dense(m)
    norms = row_norms(m)
    scale = np.where(norms < eps, 1.0, norms)
    return m / scale[:, None]


def l2_normalize_rows_backward(x: np.ndarray, y: np.ndarray, grad_y: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize_rows` given input ``x`` and output ``y``."""
    norms = row_norms(x)
    live = norms >= eps
    scale = np.where(live, norms, 1.0)
    proj = np.einsum("ij,ij->i", y, grad_y)
    gx = (grad_y - np.where(live, proj, 0.0)[:, None] * y) / scale[:, None]
    return gx


def _check_groups(n: int, offsets: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0 or offsets[-1] != n:
        raise ValueError("group offsets must start at 0 and end at len(logits)")
    if np.any(np.diff(offsets) <= 0):
        raise ValueError("empty group in grouped softmax")
    return offsets


def row_softmax_grouped(logits, offsets, *, allow_empty: bool = False) -> np.ndarray:
    """Softmax within each contiguous group ``logits[offsets[g]:offsets[g+1]]``.

    With ``allow_empty`` set, zero-length groups are skipped instead of raising
    (cross-modal operators may carry empty rows).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logit")
    offsets = np.asarray(offsets, dtype=np.int64)
    if allow_empty:
        counts = np.diff(offsets)
        if offsets[0] != 0 or offsets[-1] != len(logits) or np.any(counts < 0):
            raise ValueError("group offsets must start at 0 and end at len(logits)")
        starts = offsets[:-1][counts > 0]
        sizes = counts[counts > 0]
    else:
        offsets = _check_groups(len(logits), offsets)
        starts = offsets[:-1]
        sizes = np.diff(offsets)
    if len(logits) == 0:
        return logits.copy()
    group = np.repeat(np.arange(len(starts)), sizes)
    peak = np.maximum.reduceat(logits, starts)
    ex = np.exp(logits - peak[group])
    total = np.add.reduceat(ex, starts)
    return ex / total[group]


def row_softmax_grouped_backward(weights: np.ndarray, grad_w: np.ndarray, offsets) -> np.ndarray:
    """Gradient w.r.t. logits given softmax ``weights`` and upstream ``grad_w``."""
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if len(weights) == 0:
        return np.zeros(0)
    starts = offsets[:-1][counts > 0]
    group = np.repeat(np.arange(len(starts)), counts[counts > 0])
    inner = np.add.reduceat(weights * grad_w, starts)
    return weights * (grad_w - inner[group])


def scatter_add_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[index[e]] += values[e]`` with a fixed accumulation order."""
    index = np.asarray(index)
    sel = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
    return np.asarray(sel @ values)


def rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)
