"""EM reconstruction: MLEM, post-filtered MLEM, KEM, KREM and MKREM.

All kernel methods iterate on a coefficient field ``a`` with image
``x = K a``. The regularized updates are one-step-late: penalty gradients
are evaluated at the current iterate and added to the EM denominator.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .linalg import as_vector, hadamard_div, matvec, matvec_transpose
from .projector import backproject, forward, sensitivity

__all__ = ["ALGORITHMS", "ReconConfig", "ReconResult", "mlem_step", "kem_step",
           "mkrem_step", "gaussian_kernel", "gaussian_postfilter", "poisson_loglik", "run"]

log = logging.getLogger(__name__)

ALGORITHMS = ("mlem", "mlem_f", "kem", "krem", "mkrem")
KERNEL_ALGORITHMS = ("kem", "krem", "mkrem")


@dataclass(frozen=True)
class ReconConfig:
    """Iteration settings.

    ``denom_floor`` is relative: denominators are floored at
    ``denom_floor * mean(sensitivity)``. ``outside_kt`` applies the penalty
    gradients after, rather than inside, the transposed kernel.
    """

    algorithm: str = "mlem"
    n_iters: int = 100
    beta1: float = 0.0
    beta2: float = 0.0
    denom_floor: float = 1e-8
    record_every: int = 1
    seed: int = 0
    filter_window: int = 5
    sigma_f: float = 1.0
    outside_kt: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be non-negative")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if not self.denom_floor > 0:
            raise ValueError("denom_floor must be positive")
        if self.filter_window < 1 or self.filter_window % 2 == 0:
            raise ValueError("filter_window must be odd")
        if not self.sigma_f > 0:
            raise ValueError("sigma_f must be positive")


@dataclass(eq=False)
class ReconResult:
    """Recorded images plus the final iterate ``a`` (the unfiltered image for
    the MLEM variants), which is what a resumed run starts from."""

    algorithm: str
    iterations: np.ndarray
    trace: np.ndarray
    x: np.ndarray
    a: np.ndarray = field(default=None, repr=False)


def poisson_loglik(model, x, p):
    """``sum(p log ybar - ybar)`` with ``ybar = H x + r``; ``0 log 0 = 0``."""
    ybar = forward(model, x)
    p = as_vector(p, model.n_bins, "sinogram")
    pos = p > 0
    return float(np.sum(p[pos] * np.log(ybar[pos])) - ybar.sum())


def _ratio(model, x, p):
    return hadamard_div(p, forward(model, x))


def mlem_step(model, x, p, sens=None, grad=None, floor=None):
    """One (optionally one-step-late regularized) MLEM update of the image."""
    x = as_vector(x, model.n_voxels, "image")
    sens = sensitivity(model) if sens is None else sens
    den = sens if grad is None else sens + grad
    if floor is None:
        floor = 1e-8 * float(np.mean(sens))
    return x * backproject(model, _ratio(model, x, p)) / np.maximum(den, floor)


def kernel_sensitivity(model, K):
    return matvec_transpose(K, sensitivity(model))


def kem_step(model, K, a, p, sens_k=None, floor=None):
    """One KEM update of the coefficient field."""
    a = as_vector(a, K.n_cols, "coefficients")
    sens_k = kernel_sensitivity(model, K) if sens_k is None else sens_k
    if floor is None:
        floor = 1e-8 * float(np.mean(sens_k))
    back = matvec_transpose(K, backproject(model, _ratio(model, matvec(K, a), p)))
    return a * back / np.maximum(sens_k, floor)


def penalty_gradient(a, beta1=0.0, beta2=0.0, dict_field=None, laplacian=None):
    """``beta1 (a - D_a c) + beta2 Q_a a`` in coefficient space, or ``None``."""
    grad = None
    if beta1 > 0:
        grad = beta1 * (a - dict_field)
    if beta2 > 0:
        q = beta2 * laplacian.apply_Qa(a)
        grad = q if grad is None else grad + q
    return grad


def mkrem_step(model, K, a, p, dict_field=None, laplacian=None, beta1=0.0, beta2=0.0,
               sens_k=None, floor=None, outside_kt=False):
    """One MKREM update; with a single-factor kernel this is KREM.

    The denominator is ``K^T (H^T 1 + beta1 (a - D_a c) + beta2 Q_a a)``,
    floored, and the result is clamped at zero.
    """
    a = as_vector(a, K.n_cols, "coefficients")
    sens_k = kernel_sensitivity(model, K) if sens_k is None else sens_k
    if floor is None:
        floor = 1e-8 * float(np.mean(sens_k))
    grad = penalty_gradient(a, beta1, beta2, dict_field, laplacian)
    if grad is None:
        return kem_step(model, K, a, p, sens_k, floor)
    den = sens_k + (grad if outside_kt else matvec_transpose(K, grad))
    back = matvec_transpose(K, backproject(model, _ratio(model, matvec(K, a), p)))
    return np.maximum(a * back / np.maximum(den, floor), 0.0)


def gaussian_kernel(window=5, sigma=1.0):
    h = window // 2
    g = np.exp(-np.arange(-h, h + 1) ** 2 / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_postfilter(x, width, height, window=5, sigma=1.0):
    """Normalized ``window x window`` Gaussian smoothing with replicated borders."""
    img = as_vector(x, width * height, "image").reshape(height, width)
    return correlate(img, gaussian_kernel(window, sigma), mode="nearest").ravel()


def run(model, p, config, K=None, coder=None, laplacian=None, image_shape=None,
        start=None, offset=0):
    """Iterate ``config.algorithm`` from an all-ones start.

    ``K`` is required by the kernel methods, ``coder`` (``a -> D_a c``) when
    ``beta1 > 0`` and ``laplacian`` when ``beta2 > 0``. Images ``x`` are
    recorded every ``record_every`` iterations; for ``mlem_f`` each recorded
    iterate is post-filtered, which needs ``image_shape=(height, width)``.

    A run can be resumed by passing the previous result's ``a`` (or ``x``
    for the MLEM variants) as ``start`` and its iteration count as
    ``offset``; recorded iteration numbers then continue from there.
    """
    algo = config.algorithm
    p = as_vector(p, model.n_bins, "sinogram")
    if algo in KERNEL_ALGORITHMS and K is None:
        raise ValueError(f"{algo} needs a kernel matrix")
    beta1 = config.beta1 if algo in ("krem", "mkrem") else 0.0
    beta2 = config.beta2 if algo in ("krem", "mkrem") else 0.0
    if beta1 > 0 and coder is None:
        raise ValueError(f"{algo} with beta1 > 0 needs a sparse coder")
    if beta2 > 0 and laplacian is None:
        raise ValueError(f"{algo} with beta2 > 0 needs a graph Laplacian")
    if algo == "mlem_f" and image_shape is None:
        raise ValueError("mlem_f needs image_shape for the post-filter")

    if offset < 0:
        raise ValueError("offset must be non-negative")
    n_rec = config.n_iters // config.record_every
    trace = np.empty((n_rec, model.n_voxels))
    iters = offset + np.arange(1, n_rec + 1) * config.record_every

    if algo in ("mlem", "mlem_f"):
        sens = sensitivity(model)
        floor = config.denom_floor * float(np.mean(sens))
        v = np.ones(model.n_voxels) if start is None else as_vector(start, model.n_voxels, "start")
        image = lambda u: u
    else:
        sens = kernel_sensitivity(model, K)
        floor = config.denom_floor * float(np.mean(sens))
        v = np.ones(K.n_cols) if start is None else as_vector(start, K.n_cols, "start")
        image = lambda u: matvec(K, u)

    k = 0
    for n in range(1, config.n_iters + 1):
        if algo in ("mlem", "mlem_f"):
            v = mlem_step(model, v, p, sens, floor=floor)
        elif algo == "kem":
            v = kem_step(model, K, v, p, sens, floor)
        else:
            dict_field = coder(v) if beta1 > 0 else None
            v = mkrem_step(model, K, v, p, dict_field, laplacian, beta1, beta2,
                           sens, floor, config.outside_kt)
        if n % config.record_every == 0 and k < n_rec:
            x = image(v)
            if algo == "mlem_f":
                h, w = image_shape
                x = gaussian_postfilter(x, w, h, config.filter_window, config.sigma_f)
            trace[k] = x
            k += 1
    x = image(v)
    if algo == "mlem_f":
        h, w = image_shape
        x = gaussian_postfilter(x, w, h, config.filter_window, config.sigma_f)
    return ReconResult(algo, iters, trace, x, v)
