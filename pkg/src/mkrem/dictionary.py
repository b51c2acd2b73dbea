"""Patch-based sparse dictionaries for the kernel coefficient field.

Sparse coding uses orthogonal matching pursuit; dictionaries are learned
with K-SVD. :func:`code_coefficients` is the per-iteration step that turns
the current coefficient field into its sparse approximation.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, pick
from .errors import DimensionError, NumericError
from .linalg import CSRMatrix, as_vector, solve_sparse

__all__ = ["PatchOperator", "Dictionary", "extract_patches", "reassemble_patches",
           "omp", "omp_batch", "ksvd_learn", "build_learning_data", "local_operator",
           "map_dictionary", "code_coefficients", "SparseCoder"]

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
RANK_TOL = 1e-10


@dataclass(frozen=True)
class PatchOperator:
    """Square ``patch_w x patch_w`` patches taken every ``stride`` voxels,
    fully inside a ``height x width`` image."""

    patch_w: int
    stride: int
    width: int
    height: int

    def __post_init__(self):
        if self.patch_w < 1 or self.stride < 1:
            raise ValueError("patch_w and stride must be >= 1")
        if self.patch_w > min(self.width, self.height):
            raise ValueError("patch larger than the image")

    @property
    def m_p(self):
        return self.patch_w * self.patch_w

    @property
    def n_voxels(self):
        return self.width * self.height

    def grid(self):
        rows = np.arange(0, self.height - self.patch_w + 1, self.stride)
        cols = np.arange(0, self.width - self.patch_w + 1, self.stride)
        return rows, cols

    @property
    def n_patches(self):
        rows, cols = self.grid()
        return rows.size * cols.size

    def index(self):
        """``(n_patches, m_p)`` voxel indices of every patch."""
        rows, cols = self.grid()
        corner = (rows[:, None] * self.width + cols[None, :]).ravel()
        w = np.arange(self.patch_w)
        offs = (w[:, None] * self.width + w[None, :]).ravel()
        return corner[:, None] + offs[None, :]

    def coverage(self):
        return np.bincount(self.index().ravel(), minlength=self.n_voxels).astype(np.float64)


@dataclass(eq=False)
class Dictionary:
    """Unit-norm atoms as columns of an ``m_p x S`` array."""

    atoms: np.ndarray
    patch_w: int = None
    history: list = field(default_factory=list)

    @property
    def S(self):
        return self.atoms.shape[1]

    @property
    def m_p(self):
        return self.atoms.shape[0]


def _atoms(D):
    return np.ascontiguousarray(D.atoms if isinstance(D, Dictionary) else D, dtype=np.float64)


def extract_patches(op, img):
    img = as_vector(np.asarray(img).ravel(), op.n_voxels, "image")
    return np.ascontiguousarray(img[op.index()].T)


def reassemble_patches(op, patches, fill=None):
    """Average overlapping patches back into an image.

    Voxels no patch covers take the value from ``fill`` (zero by default).
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (op.m_p, op.n_patches):
        raise DimensionError(f"expected patches of shape {(op.m_p, op.n_patches)}")
    idx = op.index()
    total = np.bincount(idx.ravel(), weights=patches.T.ravel(), minlength=op.n_voxels)
    count = op.coverage()
    out = np.zeros(op.n_voxels) if fill is None else as_vector(fill, op.n_voxels).copy()
    hit = count > 0
    out[hit] = total[hit] / count[hit]
    return out


# -- orthogonal matching pursuit ---------------------------------------------

@njit
def _omp_one_nb(D, G, y, s, tol, rank_tol, coef, r, corr, Dty, support, L, used, w, z, c):
    m, S = D.shape
    kmax = min(s, S)
    for j in range(S):
        coef[j] = 0.0
        used[j] = False
    for i in range(m):
        r[i] = y[i]
    if np.sqrt(np.dot(r, r)) < tol:
        return
    for j in range(S):
        acc = 0.0
        for i in range(m):
            acc += D[i, j] * y[i]
        Dty[j] = acc
    k = 0
    while k < kmax:
        # D^T r from the Gram matrix, since r = y - D_S c
        best = -1
        bestv = 0.0
        for j in range(S):
            if used[j]:
                continue
            acc = Dty[j]
            for q in range(k):
                acc -= G[j, support[q]] * c[q]
            v = abs(acc)
            if v > bestv:
                bestv = v
                best = j
        if best < 0:
            break
        used[best] = True
        dd = G[best, best]
        for i in range(k):
            acc = G[support[i], best]
            for q in range(i):
                acc -= L[i, q] * w[q]
            w[i] = acc / L[i, i]
            dd -= w[i] * w[i]
        if dd <= rank_tol * G[best, best]:
            continue
        for i in range(k):
            L[k, i] = w[i]
        L[k, k] = np.sqrt(dd)
        support[k] = best
        k += 1
        # only the last entry of the forward solve changes
        acc = Dty[best]
        for q in range(k - 1):
            acc -= L[k - 1, q] * z[q]
        z[k - 1] = acc / L[k - 1, k - 1]
        for i in range(k - 1, -1, -1):
            acc = z[i]
            for q in range(i + 1, k):
                acc -= L[q, i] * c[q]
            c[i] = acc / L[i, i]
        for i in range(m):
            acc = y[i]
            for q in range(k):
                acc -= c[q] * D[i, support[q]]
            r[i] = acc
        if np.sqrt(np.dot(r, r)) < tol:
            break
    for i in range(k):
        coef[support[i]] = c[i]


@njit
def _omp_batch_nb(D, Y, s, tol, rank_tol):
    m, S = D.shape
    G = D.T @ D
    n = Y.shape[1]
    kmax = min(s, S)
    out = np.zeros((S, n))
    coef = np.zeros(S)
    r = np.zeros(m)
    corr = np.zeros(S)
    Dty = np.zeros(S)
    support = np.zeros(kmax, dtype=np.int64)
    L = np.zeros((kmax, kmax))
    used = np.zeros(S, dtype=np.bool_)
    w = np.zeros(kmax)
    z = np.zeros(kmax)
    c = np.zeros(kmax)
    y = np.zeros(m)
    for p in range(n):
        for i in range(m):
            y[i] = Y[i, p]
        _omp_one_nb(D, G, y, s, tol, rank_tol, coef, r, corr, Dty, support, L, used, w, z, c)
        for j in range(S):
            out[j, p] = coef[j]
    return out


def _omp_one_np(D, G, y, s, tol, rank_tol):
    S = D.shape[1]
    coef = np.zeros(S)
    r = y.copy()
    if np.linalg.norm(r) < tol:
        return coef
    Dty = D.T @ y
    support = []
    L = np.zeros((0, 0))
    used = np.zeros(S, dtype=bool)
    c = np.zeros(0)
    while len(support) < min(s, S):
        corr = np.abs(D.T @ r)
        corr[used] = -1.0
        best = int(np.argmax(corr))
        if corr[best] <= 0.0:
            break
        used[best] = True
        k = len(support)
        w = _forward_sub(L, G[support, best]) if k else np.zeros(0)
        d = G[best, best] - w @ w
        if d <= rank_tol * G[best, best]:
            continue
        L = np.block([[L, np.zeros((k, 1))], [w[None, :], np.array([[np.sqrt(d)]])]])
        support.append(best)
        z = _forward_sub(L, Dty[support])
        c = _back_sub_t(L, z)
        r = y - D[:, support] @ c
        if np.linalg.norm(r) < tol:
            break
    coef[support] = c
    return coef


def _forward_sub(L, b):
    out = np.zeros(b.shape[0])
    for i in range(b.shape[0]):
        out[i] = (b[i] - L[i, :i] @ out[:i]) / L[i, i]
    return out


def _back_sub_t(L, z):
    k = z.shape[0]
    out = np.zeros(k)
    for i in range(k - 1, -1, -1):
        out[i] = (z[i] - L[i + 1:, i] @ out[i + 1:]) / L[i, i]
    return out


def _omp_batch_np(D, Y, s, tol, rank_tol):
    G = D.T @ D
    out = np.zeros((D.shape[1], Y.shape[1]))
    for p in range(Y.shape[1]):
        out[:, p] = _omp_one_np(D, G, Y[:, p], s, tol, rank_tol)
    return out


_omp_batch_impl = pick(_omp_batch_nb, _omp_batch_np)


def omp_batch(D, Y, s, tol=RESIDUAL_TOL):
    """Code every column of ``Y`` with at most ``s`` atoms of ``D``.

    Each step adds the atom most correlated with the current residual (lowest
    index on ties) and refits all coefficients by least squares. An atom that
    would make the support rank-deficient is skipped. Coding of a column stops
    once its residual norm drops below ``tol``.
    """
    D = _atoms(D)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != D.shape[0]:
        raise DimensionError(f"signals of shape {Y.shape} do not match atoms {D.shape}")
    if s < 1:
        raise ValueError("sparsity must be >= 1")
    return _omp_batch_impl(D, Y, int(s), float(tol), RANK_TOL)


def omp(D, y, s, tol=RESIDUAL_TOL):
    y = as_vector(y, name="signal")
    return omp_batch(D, y[:, None], s, tol)[:, 0]


# -- K-SVD --------------------------------------------------------------------

def _normalize_columns(A, rng=None):
    A = np.array(A, dtype=np.float64)
    norms = np.linalg.norm(A, axis=0)
    for k in np.flatnonzero(norms == 0):
        if rng is None:
            raise ValueError("cannot normalize a zero atom")
        A[:, k] = rng.standard_normal(A.shape[0])
        norms[k] = np.linalg.norm(A[:, k])
    return A / norms


def ksvd_learn(data, S, s, n_iters, seed=0):
    """Learn ``S`` unit-norm atoms for ``data`` (``m x n``) by K-SVD.

    Each round codes all columns with OMP, keeping a column's previous code
    when the new one fits worse, then updates every used atom together with
    its coefficients from the leading singular pair of the restricted
    residual. Unused atoms are replaced by the worst-represented data columns.
    The Frobenius fit after every round is stored in ``history`` and never
    increases.
    """
    Y = np.asarray(data, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ValueError("need at least one training column")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    m, n = Y.shape
    rng = np.random.default_rng(seed)

    pick_cols = rng.choice(n, size=min(S, n), replace=False)
    init = np.zeros((m, S))
    init[:, :pick_cols.size] = Y[:, pick_cols]
    D = _normalize_columns(init, rng)
    C = np.zeros((S, n))
    history = []

    for it in range(n_iters):
        C_new = omp_batch(D, Y, s)
        if it == 0:
            C = C_new
        else:
            err_old = np.linalg.norm(Y - D @ C, axis=0)
            err_new = np.linalg.norm(Y - D @ C_new, axis=0)
            better = err_new <= err_old
            C[:, better] = C_new[:, better]

        dead = []
        for k in range(S):
            users = np.flatnonzero(C[k])
            if users.size == 0:
                dead.append(k)
                continue
            E = Y[:, users] - D @ C[:, users] + np.outer(D[:, k], C[k, users])
            U, sv, Vt = np.linalg.svd(E, full_matrices=False)
            D[:, k] = U[:, 0]
            C[k, users] = sv[0] * Vt[0]

        if dead:
            err = np.linalg.norm(Y - D @ C, axis=0)
            order = np.argsort(-err, kind="stable")
            cands = [j for j in order if np.linalg.norm(Y[:, j]) > 0]
            for k, j in zip(dead, cands):
                D[:, k] = Y[:, j] / np.linalg.norm(Y[:, j])
        history.append(float(np.linalg.norm(Y - D @ C)))
        log.debug("ksvd round %d: fit %.6e, %d dead atoms", it, history[-1], len(dead))

    return Dictionary(D, patch_w=int(round(np.sqrt(m))), history=history)


# -- kernel-space mapping -----------------------------------------------------

def build_learning_data(K_Mb, priors, op, n_train=None, seed=0, tol=1e-6):
    """Training patches of ``B`` solving ``K_Mb B = X`` for the prior images.

    A small ridge is added only if the plain solve fails.

    Patches of every column of ``B`` are pooled and, if ``n_train`` is given
    and smaller than the pool, a seeded random subset is kept.
    """
    X = np.stack([np.asarray(p, dtype=np.float64).ravel() for p in priors], axis=1)
    if X.shape[0] != K_Mb.n_rows:
        raise DimensionError("prior size does not match the kernel matrix")
    try:
        B = solve_sparse(K_Mb, X, tol=tol)
    except NumericError:
        from .kernel import default_ridge
        log.warning("learning-data solve failed; retrying with a ridge")
        B = solve_sparse(K_Mb, X, ridge=default_ridge(K_Mb), tol=tol)
    pool = np.concatenate([extract_patches(op, B[:, t]) for t in range(B.shape[1])], axis=1)
    if n_train is not None and n_train < pool.shape[1]:
        rng = np.random.default_rng(seed)
        pool = pool[:, np.sort(rng.choice(pool.shape[1], size=n_train, replace=False))]
    return pool


def local_operator(K_tilde, op):
    """Average of ``K_tilde`` restricted to each patch support (``m_p x m_p``)."""
    idx = op.index()
    if isinstance(K_tilde, CSRMatrix):
        K_tilde = K_tilde.to_scipy()
        acc = np.zeros((op.m_p, op.m_p))
        for row in idx:
            acc += K_tilde[row][:, row].toarray()
        return acc / idx.shape[0]
    K_tilde = np.asarray(K_tilde)
    return K_tilde[idx[:, :, None], idx[:, None, :]].mean(axis=0)


def map_dictionary(K_tilde, D_b, op):
    """Carry ``D_b`` into the coefficient space of the first kernel.

    Atoms go through the patch-local restriction of ``K_tilde`` and are
    renormalized; ``K_tilde=None`` keeps ``D_b`` unchanged.
    """
    atoms = _atoms(D_b)
    if K_tilde is None:
        return Dictionary(atoms.copy(), patch_w=op.patch_w)
    if atoms.shape[0] != op.m_p:
        raise DimensionError("atom length does not match the patch size")
    mapped = local_operator(K_tilde, op) @ atoms
    norms = np.linalg.norm(mapped, axis=0)
    dead = norms <= 1e-12 * max(norms.max(), 1e-300)
    if dead.any():
        log.warning("%d mapped atoms vanished; keeping their unmapped versions", dead.sum())
        mapped[:, dead] = atoms[:, dead]
        norms[dead] = 1.0
    return Dictionary(mapped / norms, patch_w=op.patch_w)


def code_coefficients(D_a, a, op, s):
    """Sparse approximation ``D_a c`` of the field ``a``, reassembled from
    overlapping patches. Voxels outside every patch keep their value."""
    a = as_vector(a, op.n_voxels, "coefficient field")
    atoms = _atoms(D_a)
    P = extract_patches(op, a)
    C = omp_batch(atoms, P, s)
    return reassemble_patches(op, atoms @ C, fill=a)


@dataclass(frozen=True, eq=False)
class SparseCoder:
    """Per-iteration coder ``a -> D_a c`` bundling atoms, patches and sparsity."""

    atoms: np.ndarray
    op: PatchOperator
    s: int

    def __call__(self, a):
        return code_coefficients(self.atoms, a, self.op, self.s)
