"""Image-quality figures over single images and realization ensembles.

An ensemble is an array ``(O, R, M)``: realizations by recorded iterations
by voxels, or ``(O, M)`` for a single iteration.
"""

import numpy as np

from .errors import DimensionError
from .linalg import as_vector

__all__ = ["mse", "bias", "variance", "mse_curves", "amse_curve", "bias_variance_curve",
           "line_profile", "mmse"]


def _ref(f):
    f = as_vector(f, name="reference")
    energy = float(f @ f)
    if not energy > 0:
        raise ValueError("reference image must have non-zero energy")
    return f, energy


def _ensemble(images, M):
    E = np.asarray(images, dtype=np.float64)
    if E.shape[-1] != M:
        raise DimensionError("image length does not match the reference")
    return E


def mse(x, f):
    """Normalized squared error ``sum((x - f)^2) / sum(f^2)``."""
    f, energy = _ref(f)
    x = as_vector(x, f.size, "image")
    return float(np.sum((x - f) ** 2) / energy)


def bias(xbar, f):
    """Signed relative total bias ``sum(xbar - f) / sum(f)``."""
    f = as_vector(f, name="reference")
    xbar = as_vector(xbar, f.size, "image")
    total = f.sum()
    if total == 0:
        raise ValueError("reference image sums to zero")
    return float(np.sum(xbar - f) / total)


def variance(ensemble, f):
    """``(1/O) sum_i sum_j (x_j^i - xbar_j)^2 / sum(f^2)`` over ``O`` realizations."""
    f, energy = _ref(f)
    E = _ensemble(ensemble, f.size)
    # shifted by the first realization so identical members give exactly zero
    shifted = E - E[0]
    dev = shifted - shifted.mean(axis=0)
    return np.sum(dev ** 2, axis=-1).mean(axis=0) / energy


def mse_curves(ensemble, f):
    """``(O, R)`` array of per-realization, per-iteration MSE."""
    f, energy = _ref(f)
    E = _ensemble(ensemble, f.size)
    return np.sum((E - f) ** 2, axis=-1) / energy


def amse_curve(ensemble, f):
    """Mean over realizations of the MSE at each recorded iteration."""
    return mse_curves(ensemble, f).mean(axis=0)


def bias_variance_curve(ensemble, f):
    """Per recorded iteration: bias of the ensemble mean and ensemble variance."""
    f, _ = _ref(f)
    E = _ensemble(ensemble, f.size)
    xbar = E.mean(axis=0)
    b = np.array([bias(m, f) for m in np.atleast_2d(xbar)])
    return b, np.atleast_1d(variance(E, f))


def line_profile(x, width, row):
    """Pixel values of image row ``row`` in column order."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size % width:
        raise DimensionError("image length is not a multiple of the width")
    if not 0 <= row < x.size // width:
        raise IndexError("row out of range")
    return x[row * width:(row + 1) * width].copy()


def mmse(curve):
    """Minimum of an (average) MSE curve and its index."""
    curve = np.asarray(curve, dtype=np.float64)
    k = int(np.argmin(curve))
    return float(curve[k]), k
