"""Kernel matrices built from anatomical prior images.

A kernel matrix ``K`` represents the image as ``x = K a``. Entry ``(i, j)``
is a kernel function of the feature vectors of voxels ``i`` and ``j``,
restricted to a spatial window around ``i`` (or to its k nearest neighbours
in feature space). Several such matrices multiply into a multi-kernel
matrix, and :func:`factorize` relates two multi-kernel matrices.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, NumericError
from .linalg import CSRMatrix, solve_sparse, spmm

__all__ = ["KernelSpec", "MultiKernelSpec", "kernel_value", "kernel_features",
           "build_single_kernel", "build_multi_kernel", "factorize", "default_ridge"]


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    sigma: float = 0.5
    gamma: float = 1.0
    degree: float = 2.0
    neighborhood: str = "window"
    J: int = 21
    knn: int = 48
    feature_window: int = 3
    normalize_rows: bool = True

    def __post_init__(self):
        if self.kind not in ("gaussian", "polynomial"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.neighborhood not in ("window", "knn"):
            raise ValueError(f"unknown neighborhood mode {self.neighborhood!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.neighborhood == "window" and (self.J < 1 or self.J % 2 == 0):
            raise ValueError("window size J must be odd and >= 1")
        if self.neighborhood == "knn" and self.knn < 1:
            raise ValueError("knn must be >= 1")
        if self.feature_window < 1 or self.feature_window % 2 == 0:
            raise ValueError("feature_window must be odd and >= 1")


@dataclass(frozen=True)
class MultiKernelSpec:
    factors: tuple = field(default_factory=lambda: (KernelSpec(),))

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if len(self.factors) < 1:
            raise ValueError("a multi-kernel needs at least one factor")

    @classmethod
    def repeated(cls, spec, G):
        return cls((spec,) * int(G))

    @property
    def G(self):
        return len(self.factors)


def _pairwise(spec, U, V):
    """Row-wise kernel between matching rows of ``U`` and ``V``."""
    if spec.kind == "gaussian":
        d2 = np.sum((U - V) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * spec.sigma ** 2))
    return np.power(np.sum(U * V, axis=-1) + spec.gamma, spec.degree)


def kernel_value(spec, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError("feature vectors differ in length")
    return float(_pairwise(spec, u.ravel(), v.ravel()))


def _as_images(priors):
    imgs = [np.asarray(p, dtype=np.float64) for p in priors]
    if not imgs:
        raise ValueError("at least one prior image is required")
    if any(im.ndim != 2 for im in imgs):
        raise DimensionError("prior images must be 2-D arrays")
    if any(im.shape != imgs[0].shape for im in imgs):
        raise DimensionError("prior images differ in shape")
    return imgs


def kernel_features(priors, feature_window=3):
    """Per-voxel feature vectors: z-scored ``w x w`` patches of every prior.

    Borders are edge-replicated. Returns an ``(M, T * w * w)`` array.
    """
    imgs = _as_images(priors)
    h = feature_window // 2
    cols = []
    for im in imgs:
        sd = im.std()
        z = (im - im.mean()) / (sd if sd > 0 else 1.0)
        pad = np.pad(z, h, mode="edge")
        H, W = im.shape
        for dy in range(feature_window):
            for dx in range(feature_window):
                cols.append(pad[dy:dy + H, dx:dx + W].ravel())
    return np.stack(cols, axis=1)


def _window_kernel(F, shape, spec):
    H, W = shape
    h = spec.J // 2
    iy, ix = np.divmod(np.arange(H * W), W)
    rows, cols, vals = [], [], []
    for dy in range(-h, h + 1):
        for dx in range(-h, h + 1):
            ok = (iy + dy >= 0) & (iy + dy < H) & (ix + dx >= 0) & (ix + dx < W)
            i = np.flatnonzero(ok)
            j = i + dy * W + dx
            rows.append(i)
            cols.append(j)
            vals.append(_pairwise(spec, F[i], F[j]))
    return (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def _knn_kernel(F, spec):
    M = F.shape[0]
    k = min(spec.knn, M)
    _, nbr = cKDTree(F).query(F, k=k)
    nbr = np.asarray(nbr).reshape(M, k)
    rows = np.repeat(np.arange(M), k)
    cols = nbr.ravel()
    return rows, cols, _pairwise(spec, F[rows], F[cols])


def build_single_kernel(priors, spec):
    """Sparse ``M x M`` kernel matrix from a list of 2-D prior images.

    Window mode keeps ``j`` within the ``J x J`` square centred on ``i``;
    kNN mode keeps the ``knn`` nearest voxels in feature space (self
    included), which is not symmetric in general.
    """
    imgs = _as_images(priors)
    shape = imgs[0].shape
    M = shape[0] * shape[1]
    F = kernel_features(imgs, spec.feature_window)
    if spec.neighborhood == "window":
        rows, cols, vals = _window_kernel(F, shape, spec)
    else:
        rows, cols, vals = _knn_kernel(F, spec)
    if not np.all(np.isfinite(vals)):
        raise NumericError("kernel produced non-finite values")
    K = CSRMatrix.from_coo(rows, cols, vals, (M, M))
    if np.any(K.row_nnz() == 0):
        raise ValueError("empty neighbourhood for at least one voxel")
    if spec.normalize_rows:
        sums = K.row_sums()
        if np.any(sums <= 0):
            raise NumericError("row normalization needs positive row sums")
        K = K.scale_rows(1.0 / sums)
    return K


def build_multi_kernel(priors, mspec):
    """Ordered product of the factor kernel matrices."""
    if isinstance(mspec, KernelSpec):
        mspec = MultiKernelSpec((mspec,))
    cache = {}
    out = None
    for spec in mspec.factors:
        if spec not in cache:
            cache[spec] = build_single_kernel(priors, spec)
        K = cache[spec]
        out = K if out is None else spmm(out, K)
    return out


def default_ridge(K):
    diag = K.to_scipy().diagonal()
    return 1e-8 * float(diag.sum()) / K.n_rows


def factorize(K_Ma, K_Mb, ridge=None, tol=1e-6, dense=False):
    """Solve ``K_Ma @ K_tilde = K_Mb`` for ``K_tilde``.

    With ``ridge=None`` an unregularized solve is tried first and the default
    ridge ``1e-8 * trace(K_Ma) / M`` is used only if that fails. The returned
    factor always satisfies ``||K_Ma K_tilde - K_Mb||_F / ||K_Mb||_F <= tol``;
    otherwise :class:`NumericError` is raised. ``dense=True`` returns an
    ndarray instead of a :class:`CSRMatrix`.
    """
    if K_Ma.shape != K_Mb.shape or K_Ma.n_rows != K_Ma.n_cols:
        raise DimensionError("factorize needs two square matrices of equal size")
    rhs = K_Mb.to_dense()
    ridges = [0.0, default_ridge(K_Ma)] if ridge is None else [float(ridge)]
    last = None
    for eps in ridges:
        try:
            X = solve_sparse(K_Ma, rhs, ridge=eps, tol=tol)
        except NumericError as exc:
            last = exc
            continue
        resid = K_Ma.to_scipy() @ X - rhs
        rel = np.linalg.norm(resid) / np.linalg.norm(rhs)
        if rel <= tol:
            return X if dense else CSRMatrix.from_dense(X)
        last = NumericError(f"factorization residual {rel:.3e} exceeds {tol:.1e}", rel)
    raise last


def with_window(spec, J):
    return replace(spec, J=int(J))
