"""Row-compressed sparse matrices and the dense/sparse products used by the
reconstruction pipeline.

Every product has a numba kernel and a pure-numpy twin; the active one is
chosen by :mod:`mkrem._accel`. Both produce results in the same summation
order for ``matvec``/``matvec_transpose``, so they agree bit for bit.
"""

import warnings

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from ._accel import njit, pick
from .errors import DimensionError, NumericError

__all__ = [
    "CSRMatrix",
    "as_vector",
    "matvec",
    "matvec_transpose",
    "spmm",
    "solve_sparse",
    "hadamard",
    "hadamard_div",
]

DEFAULT_FLOOR = 1e-12


def as_vector(v, n=None, name="vector"):
    """Coerce ``v`` to a contiguous 1-D float64 array, optionally of length ``n``."""
    out = np.ascontiguousarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {out.shape}")
    if n is not None and out.shape[0] != n:
        raise DimensionError(f"{name} has length {out.shape[0]}, expected {n}")
    return out


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.flags.writeable:
        a = a.view()
        a.flags.writeable = False
    return a


class CSRMatrix:
    """Immutable compressed-sparse-row matrix of float64 values.

    Column indices are strictly increasing within each row and all stored
    values are finite. Construct from raw arrays, :meth:`from_dense` or
    :meth:`from_coo`.
    """

    __slots__ = ("shape", "indptr", "indices", "data", "_row_ids")

    def __init__(self, indptr, indices, data, shape, check=True):
        n_rows, n_cols = (int(shape[0]), int(shape[1]))
        if n_rows < 0 or n_cols < 0:
            raise DimensionError(f"invalid shape {shape}")
        self.shape = (n_rows, n_cols)
        self.indptr = _readonly(indptr, np.int64)
        self.indices = _readonly(indices, np.int64)
        self.data = _readonly(data, np.float64)
        self._row_ids = None
        if check:
            self._validate()

    def _validate(self):
        n_rows, n_cols = self.shape
        indptr, indices, data = self.indptr, self.indices, self.data
        if indptr.shape != (n_rows + 1,) or indptr[0] != 0:
            raise ValueError("indptr must have length n_rows + 1 and start at 0")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        nnz = int(indptr[-1])
        if indices.shape != (nnz,) or data.shape != (nnz,):
            raise ValueError("indices/data length must equal indptr[-1]")
        if nnz:
            if indices.min() < 0 or indices.max() >= n_cols:
                raise ValueError("column index out of bounds")
            rows = self.row_ids()
            same_row = rows[1:] == rows[:-1]
            if np.any(np.diff(indices)[same_row] <= 0):
                raise ValueError("column indices must strictly increase within a row")
            if not np.all(np.isfinite(data)):
                raise ValueError("stored values must be finite")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise DimensionError("from_dense expects a 2-D array")
        rows, cols = np.nonzero(a)
        indptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=a.shape[0]), out=indptr[1:])
        return cls(indptr, cols, a[rows, cols], a.shape, check=False)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        """Build from triplets; duplicates are summed and exact zeros dropped."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        n_rows, n_cols = shape
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                          or cols.min() < 0 or cols.max() >= n_cols):
            raise DimensionError("triplet index out of bounds")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            key = rows * n_cols + cols
            first = np.ones(key.size, dtype=bool)
            first[1:] = key[1:] != key[:-1]
            starts = np.flatnonzero(first)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
            keep = vals != 0.0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
        return cls(indptr, cols, vals, shape)

    @classmethod
    def identity(cls, n, scale=1.0):
        idx = np.arange(n, dtype=np.int64)
        return cls(np.arange(n + 1), idx, np.full(n, float(scale)), (n, n), check=False)

    @classmethod
    def from_scipy(cls, m):
        m = scipy.sparse.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape, check=False)

    # -- conversion / inspection -----------------------------------------

    @property
    def n_rows(self):
        return self.shape[0]

    @property
    def n_cols(self):
        return self.shape[1]

    @property
    def nnz(self):
        return int(self.indptr[-1])

    def row_ids(self):
        """Row index of every stored entry (cached)."""
        if self._row_ids is None:
            ids = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
            ids.flags.writeable = False
            self._row_ids = ids
        return self._row_ids

    def row_nnz(self):
        return np.diff(self.indptr)

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.data
        return out

    def to_scipy(self):
        return scipy.sparse.csr_matrix(
            (self.data, self.indices, self.indptr), shape=self.shape, copy=False)

    def transpose(self):
        """Explicit transpose. Products with the transpose should use
        :func:`matvec_transpose` instead."""
        return CSRMatrix.from_coo(self.indices, self.row_ids(), self.data,
                                  (self.n_cols, self.n_rows))

    @property
    def T(self):
        return self.transpose()

    def row_sums(self):
        return matvec(self, np.ones(self.n_cols))

    def scale_rows(self, factors):
        factors = as_vector(factors, self.n_rows, "row factors")
        data = self.data * factors[self.row_ids()]
        keep = data != 0.0
        if keep.all():
            return CSRMatrix(self.indptr, self.indices, data, self.shape, check=False)
        return CSRMatrix.from_coo(self.row_ids()[keep], self.indices[keep], data[keep],
                                  self.shape)

    def prune(self, threshold):
        """Drop entries with ``|value| < threshold``."""
        keep = np.abs(self.data) >= threshold
        return CSRMatrix.from_coo(self.row_ids()[keep], self.indices[keep],
                                  self.data[keep], self.shape)

    def __repr__(self):
        return f"CSRMatrix(shape={self.shape}, nnz={self.nnz})"


# -- kernels ---------------------------------------------------------------

@njit
def _matvec_nb(indptr, indices, data, v, n_rows):
    out = np.zeros(n_rows)
    for i in range(n_rows):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * v[indices[k]]
        out[i] = s
    return out


def _matvec_np(A, v):
    return np.bincount(A.row_ids(), weights=A.data * v[A.indices], minlength=A.n_rows)


@njit
def _rmatvec_nb(indptr, indices, data, v, n_cols):
    out = np.zeros(n_cols)
    for i in range(indptr.shape[0] - 1):
        vi = v[i]
        for k in range(indptr[i], indptr[i + 1]):
            out[indices[k]] += data[k] * vi
    return out


def _rmatvec_np(A, v):
    return np.bincount(A.indices, weights=A.data * v[A.row_ids()], minlength=A.n_cols)


@njit
def _spmm_nb(a_indptr, a_indices, a_data, b_indptr, b_indices, b_data, n_rows, n_cols):
    marker = np.full(n_cols, -1, dtype=np.int64)
    bound = 0
    for i in range(n_rows):
        for ka in range(a_indptr[i], a_indptr[i + 1]):
            k = a_indices[ka]
            for kb in range(b_indptr[k], b_indptr[k + 1]):
                j = b_indices[kb]
                if marker[j] != i:
                    marker[j] = i
                    bound += 1
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    indices = np.empty(bound, dtype=np.int64)
    data = np.empty(bound)
    acc = np.zeros(n_cols)
    cols = np.empty(n_cols, dtype=np.int64)
    marker[:] = -1
    pos = 0
    for i in range(n_rows):
        cnt = 0
        for ka in range(a_indptr[i], a_indptr[i + 1]):
            k = a_indices[ka]
            av = a_data[ka]
            for kb in range(b_indptr[k], b_indptr[k + 1]):
                j = b_indices[kb]
                if marker[j] != i:
                    marker[j] = i
                    cols[cnt] = j
                    cnt += 1
                    acc[j] = av * b_data[kb]
                else:
                    acc[j] += av * b_data[kb]
        row_cols = np.sort(cols[:cnt])
        for c in row_cols:
            val = acc[c]
            if val != 0.0:
                indices[pos] = c
                data[pos] = val
                pos += 1
        indptr[i + 1] = pos
    return indptr, indices[:pos].copy(), data[:pos].copy()


def _spmm_np(A, B):
    return CSRMatrix.from_scipy(A.to_scipy() @ B.to_scipy())


def _matvec_numba(A, v):
    return _matvec_nb(A.indptr, A.indices, A.data, v, A.n_rows)


def _rmatvec_numba(A, v):
    return _rmatvec_nb(A.indptr, A.indices, A.data, v, A.n_cols)


def _spmm_numba(A, B):
    indptr, indices, data = _spmm_nb(A.indptr, A.indices, A.data,
                                     B.indptr, B.indices, B.data, A.n_rows, B.n_cols)
    return CSRMatrix(indptr, indices, data, (A.n_rows, B.n_cols), check=False)


_matvec_impl = pick(_matvec_numba, _matvec_np)
_rmatvec_impl = pick(_rmatvec_numba, _rmatvec_np)
_spmm_impl = pick(_spmm_numba, _spmm_np)


# -- public operations -------------------------------------------------------

def matvec(A, v):
    """Return ``A @ v``."""
    v = as_vector(v, A.n_cols, "v")
    return _matvec_impl(A, v)


def matvec_transpose(A, v):
    """Return ``A.T @ v`` by scattering rows; the transpose is never formed."""
    v = as_vector(v, A.n_rows, "v")
    return _rmatvec_impl(A, v)


def spmm(A, B):
    """Sparse-sparse product ``A @ B`` with explicit zeros removed."""
    if A.n_cols != B.n_rows:
        raise DimensionError(f"cannot multiply {A.shape} by {B.shape}")
    return _spmm_impl(A, B)


def _apply_dense(A, X):
    return A.to_scipy() @ X


def solve_sparse(A, B, ridge=0.0, tol=1e-8, dense_threshold=0.02):
    """Solve ``(A + ridge*I) X = B``.

    ``B`` may be a vector, a dense 2-D array or a :class:`CSRMatrix`; the
    result has the same kind. Fairly dense systems are solved with a dense
    LU factorization, sparse ones with SuperLU. The relative Frobenius
    residual is checked against ``tol`` and a :class:`NumericError` carrying
    it is raised on failure.
    """
    n = A.n_rows
    if A.n_cols != n:
        raise DimensionError(f"solve_sparse needs a square matrix, got {A.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")

    sparse_rhs = isinstance(B, CSRMatrix)
    rhs = B.to_dense() if sparse_rhs else np.asarray(B, dtype=np.float64)
    if rhs.shape[0] != n:
        raise DimensionError(f"right-hand side has {rhs.shape[0]} rows, expected {n}")

    with np.errstate(all="ignore"):
        if n <= 256 or A.nnz > dense_threshold * n * n:
            M = A.to_dense()
            if ridge:
                M[np.diag_indices(n)] += ridge
            try:
                # singular factors surface through the residual check below
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                    lu = scipy.linalg.lu_factor(M, check_finite=False)
                X = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise NumericError(f"dense factorization failed: {exc}", np.inf) from exc
        else:
            S = A.to_scipy().tocsc()
            if ridge:
                S = S + ridge * scipy.sparse.identity(n, format="csc")
            try:
                lu = scipy.sparse.linalg.splu(S)
                X = lu.solve(rhs)
            except RuntimeError as exc:
                raise NumericError(f"sparse factorization failed: {exc}", np.inf) from exc

        if not np.all(np.isfinite(X)):
            raise NumericError("solution contains non-finite values", np.inf)
        resid = _apply_dense(A, X) + ridge * X - rhs
        bnorm = np.linalg.norm(rhs)
        rel = np.linalg.norm(resid) / bnorm if bnorm > 0 else np.linalg.norm(resid)
    if not rel <= tol:
        raise NumericError(f"solve residual {rel:.3e} exceeds {tol:.1e}", rel)

    if sparse_rhs:
        return CSRMatrix.from_dense(X if X.ndim == 2 else X[:, None])
    return X


def hadamard(u, v):
    u = as_vector(u, name="u")
    v = as_vector(v, u.shape[0], "v")
    return u * v


def hadamard_div(u, v, floor=DEFAULT_FLOOR):
    """Elementwise ``u / v`` with denominators below ``floor`` raised to it."""
    if not floor > 0:
        raise ValueError("floor must be positive")
    u = as_vector(u, name="u")
    v = as_vector(v, u.shape[0], "v")
    return u / np.maximum(v, floor)
