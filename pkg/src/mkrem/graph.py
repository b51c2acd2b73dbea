"""Image-graph Laplacian from prior images.

Each voxel is described by the window of prior values around it. Window
distances give an adaptive-bandwidth affinity, which is symmetrized and
row-normalized into a Markov matrix ``Z``. The Laplacian is ``Q = I - Z^t``
and its kernel-space counterpart ``Q_a = K^T Q K``.

``Z^t`` and ``Q_a`` fill in quickly, so :class:`LaplacianPack` applies them
matrix-free. The explicit sparse matrices can still be assembled for small
images.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError
from .linalg import CSRMatrix, as_vector, matvec, matvec_transpose, spmm

__all__ = ["GraphSpec", "LaplacianPack", "feature_windows", "markov_matrix",
           "select_power", "build_laplacian"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphSpec:
    window_m: int = 9
    knn: int = 7
    knn_graph: int = 32
    eps_t: float = 1e-4
    t_max: int = 20
    dense: bool = False
    symmetrize_Q: bool = False

    def __post_init__(self):
        w = int(round(np.sqrt(self.window_m)))
        if self.window_m < 1 or w * w != self.window_m:
            raise ValueError("window_m must be a perfect square >= 1")
        if self.knn < 1:
            raise ValueError("knn must be >= 1")
        if not self.dense and self.knn_graph < self.knn + 1:
            raise ValueError("knn_graph must be at least knn + 1")
        if not self.eps_t > 0:
            raise ValueError("eps_t must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


def feature_windows(img, window_m=9):
    """Rows are the zero-padded ``sqrt(m) x sqrt(m)`` windows around each voxel."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError("feature_windows needs a 2-D image")
    w = int(round(np.sqrt(window_m)))
    if w * w != window_m:
        raise ValueError("window_m must be a perfect square")
    h = w // 2
    H, W = img.shape
    pad = np.pad(img, ((h, w - 1 - h), (h, w - 1 - h)))
    cols = [pad[dy:dy + H, dx:dx + W].ravel() for dy in range(w) for dx in range(w)]
    return np.stack(cols, axis=1)


def _bandwidth(sorted_rows, knn, emax):
    b = sorted_rows[:, knn].copy()
    floor = 1e-12 * emax
    b[b <= floor] = floor if floor > 0 else 1.0
    return b


def markov_matrix(Y, knn=7, knn_graph=32, dense=False):
    """Row-stochastic ``Z`` from window features ``Y`` (``M x m``).

    ``b_i`` is the ``(knn + 1)``-th smallest distance from row ``i``, counting
    the zero self-distance. The sparse mode keeps only each row's
    ``knn_graph`` nearest windows before symmetrization.
    """
    Y = np.asarray(Y, dtype=np.float64)
    M = Y.shape[0]
    if knn + 1 > M:
        raise ValueError("knn + 1 exceeds the number of voxels")
    if dense:
        E = np.sqrt(np.maximum(np.sum(Y ** 2, 1)[:, None] + np.sum(Y ** 2, 1)[None, :]
                               - 2.0 * Y @ Y.T, 0.0))
        np.fill_diagonal(E, 0.0)
        b = _bandwidth(np.sort(E, axis=1), knn, E.max())
        W = np.exp(-(E / b[:, None]) ** 2)
        Wt = W + W.T
        return CSRMatrix.from_dense(Wt / Wt.sum(axis=1, keepdims=True))

    k = min(knn_graph, M)
    dist, nbr = cKDTree(Y).query(Y, k=k)
    dist = np.asarray(dist).reshape(M, k)
    nbr = np.asarray(nbr).reshape(M, k)
    b = _bandwidth(dist, knn, dist.max())
    rows = np.repeat(np.arange(M), k)
    vals = np.exp(-(dist / b[:, None]) ** 2).ravel()
    W = CSRMatrix.from_coo(rows, nbr.ravel(), vals, (M, M)).to_scipy()
    Wt = (W + W.T).tocsr()
    Wt = Wt.multiply(1.0 / np.asarray(Wt.sum(axis=1)).ravel()[:, None]).tocsr()
    return CSRMatrix.from_scipy(Wt)


def select_power(Z, Y, eps_t=1e-4, t_max=20):
    """Smallest ``t >= 1`` with ``||Z^t Y - Z^(t-1) Y||^2 <= eps_t ||Z^(t-1) Y||^2``."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    prev = Y
    for t in range(1, int(t_max) + 1):
        cur = np.column_stack([matvec(Z, prev[:, j]) for j in range(prev.shape[1])])
        den = np.sum(prev ** 2)
        ratio = np.sum((cur - prev) ** 2) / den if den > 0 else 0.0
        log.debug("graph power t=%d ratio %.3e", t, ratio)
        if ratio <= eps_t:
            return t
        prev = cur
    warnings.warn(f"power criterion not met up to t_max={t_max}", RuntimeWarning)
    return int(t_max)


def _average(mats):
    if len(mats) == 1:
        return mats[0]
    acc = mats[0].to_scipy()
    for m in mats[1:]:
        acc = acc + m.to_scipy()
    return CSRMatrix.from_scipy((acc / len(mats)).tocsr())


@dataclass(frozen=True, eq=False)
class LaplacianPack:
    """``Z``, the chosen power ``t`` and the coefficient-space matrix ``K``."""

    Z: CSRMatrix
    t: int
    K: CSRMatrix = None
    symmetrize: bool = False

    @property
    def n(self):
        return self.Z.n_rows

    def _zt(self, v, transpose=False):
        op = matvec_transpose if transpose else matvec
        for _ in range(self.t):
            v = op(self.Z, v)
        return v

    def apply_Q(self, v):
        """``Q v`` with ``Q = I - Z^t`` (or its symmetric part)."""
        v = as_vector(v, self.n, "vector")
        if self.symmetrize:
            return v - 0.5 * (self._zt(v) + self._zt(v, transpose=True))
        return v - self._zt(v)

    def apply_Qt(self, v):
        v = as_vector(v, self.n, "vector")
        if self.symmetrize:
            return self.apply_Q(v)
        return v - self._zt(v, transpose=True)

    def apply_Qa(self, a):
        """``K^T Q K a``; reduces to ``Q a`` when no kernel is attached."""
        if self.K is None:
            return self.apply_Q(a)
        return matvec_transpose(self.K, self.apply_Q(matvec(self.K, a)))

    def quadratic(self, a):
        """``a^T Q_a a``."""
        a = as_vector(a, name="coefficients")
        return float(a @ self.apply_Qa(a))

    def Q_matrix(self, threshold=1e-14):
        Zt = self.Z
        for _ in range(self.t - 1):
            Zt = spmm(Zt, self.Z)
        Q = CSRMatrix.identity(self.n).to_scipy() - Zt.to_scipy()
        if self.symmetrize:
            Q = 0.5 * (Q + Q.T)
        return CSRMatrix.from_scipy(Q.tocsr()).prune(threshold)

    def Qa_matrix(self, threshold=1e-14):
        Q = self.Q_matrix(threshold)
        if self.K is None:
            return Q
        return spmm(self.K.T, spmm(Q, self.K)).prune(threshold)


def build_laplacian(priors, K_Ma=None, spec=None):
    """Laplacian pack from one or more 2-D prior images.

    ``Z`` is averaged over the priors before ``t`` is chosen; the power
    criterion uses all priors' window features side by side.
    """
    spec = spec or GraphSpec()
    imgs = [np.asarray(p, dtype=np.float64) for p in priors]
    feats = [feature_windows(im, spec.window_m) for im in imgs]
    Z = _average([markov_matrix(Y, spec.knn, spec.knn_graph, spec.dense) for Y in feats])
    t = select_power(Z, np.hstack(feats), spec.eps_t, spec.t_max)
    if K_Ma is not None and K_Ma.shape != Z.shape:
        raise DimensionError("kernel matrix does not match the image size")
    log.info("graph Laplacian: t=%d, nnz(Z)=%d", t, Z.nnz)
    return LaplacianPack(Z, t, K_Ma, spec.symmetrize_Q)
