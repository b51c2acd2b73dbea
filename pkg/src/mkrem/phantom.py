"""Synthetic brain-like phantom, anatomical prior and Poisson count data."""

from dataclasses import dataclass, field

import numpy as np

from .linalg import as_vector

__all__ = ["PhantomPair", "NoiseSpec", "make_brain_like_phantom", "scale_to_counts",
           "poissonize", "realization_rng", "REGIONS"]

REGIONS = ("background", "white", "gray", "ventricle")

# arbitrary units; activity and prior orderings deliberately differ
ACTIVITY_LEVELS = {"background": 0.0, "white": 1.0, "gray": 4.0, "ventricle": 0.5}
PRIOR_LEVELS = {"background": 0.0, "white": 3.0, "gray": 1.0, "ventricle": 4.0}
LESION_LEVEL = 6.0
PRIOR_LESION_LEVEL = 2.0


@dataclass(eq=False)
class PhantomPair:
    """Reference activity, training prior image(s) and the lesion mask.

    Images are flattened row-major ``(height, width)`` arrays.
    """

    width: int
    height: int
    activity: np.ndarray
    priors: list
    lesion_mask: np.ndarray
    labels: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class NoiseSpec:
    target_counts: float = 64000
    seed: int = 0
    n_realizations: int = 10

    def __post_init__(self):
        if not self.target_counts > 0:
            raise ValueError("target_counts must be positive")
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")


def _ellipse(X, Y, cx, cy, ax, ay, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    u = (X - cx) * c + (Y - cy) * s
    v = -(X - cx) * s + (Y - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def region_labels(width, height):
    """Integer label map (index into :data:`REGIONS`) on normalized coordinates.

    Head outline is an ellipse filling most of the field of view, with a
    cortical gray-matter rim, a few deep gray nuclei and cortical folds, and
    two ventricles around the centre.
    """
    x = (np.arange(width) + 0.5) / width * 2 - 1
    y = (np.arange(height) + 0.5) / height * 2 - 1
    X, Y = np.meshgrid(x, y)
    lab = np.zeros((height, width), dtype=np.int64)

    head = _ellipse(X, Y, 0, 0, 0.78, 0.9)
    lab[head] = REGIONS.index("gray")
    inner = _ellipse(X, Y, 0, 0, 0.66, 0.78)
    lab[inner] = REGIONS.index("white")

    # cortical folds reaching into white matter
    for k in range(10):
        ang = 2 * np.pi * k / 10 + 0.3
        cx, cy = 0.6 * np.cos(ang), 0.7 * np.sin(ang)
        lab[_ellipse(X, Y, cx, cy, 0.2, 0.06, ang) & head] = REGIONS.index("gray")
    # deep gray nuclei
    for sx in (-1, 1):
        lab[_ellipse(X, Y, sx * 0.3, 0.12, 0.1, 0.16, sx * 0.4)] = REGIONS.index("gray")
    # ventricles
    for sx in (-1, 1):
        lab[_ellipse(X, Y, sx * 0.11, -0.1, 0.07, 0.24, -sx * 0.25)] = REGIONS.index("ventricle")
    return lab


def make_brain_like_phantom(width=64, height=64, lesion=True, prior_noise=0.02,
                            seed=0, n_priors=1, lesion_in_prior=True):
    """Piecewise-constant activity with a matching anatomical prior.

    The prior shares region boundaries with the activity but uses different
    regional intensities, plus Gaussian noise with standard deviation
    ``prior_noise`` times the prior's dynamic range. The lesion (radius about
    three voxels, in white matter) gets its own prior level unless
    ``lesion_in_prior`` is false, in which case only the activity shows it.
    """
    if width < 16 or height < 16:
        raise ValueError("phantom needs at least 16x16 voxels")
    lab = region_labels(width, height)

    act = np.zeros(lab.shape)
    pri = np.zeros(lab.shape)
    for k, name in enumerate(REGIONS):
        act[lab == k] = ACTIVITY_LEVELS[name]
        pri[lab == k] = PRIOR_LEVELS[name]

    mask = np.zeros(lab.shape, dtype=bool)
    if lesion:
        x = (np.arange(width) + 0.5) / width * 2 - 1
        y = (np.arange(height) + 0.5) / height * 2 - 1
        X, Y = np.meshgrid(x, y)
        rad = 3.0 / (0.5 * min(width, height))
        mask = ((X - 0.33) ** 2 + (Y + 0.3) ** 2 <= rad ** 2) & (lab == REGIONS.index("white"))
        act[mask] = LESION_LEVEL
        if lesion_in_prior:
            pri[mask] = PRIOR_LESION_LEVEL

    rng = np.random.default_rng(seed)
    spread = float(np.ptp(pri))
    priors = [(pri + rng.normal(0.0, prior_noise * spread, pri.shape)).ravel()
              for _ in range(n_priors)]
    return PhantomPair(width, height, act.ravel(), priors, mask.ravel(), lab.ravel())


def scale_to_counts(clean, target_counts):
    """Rescale a noiseless sinogram so it sums to ``target_counts``."""
    clean = as_vector(clean, name="sinogram")
    total = clean.sum()
    if not total > 0:
        raise ValueError("cannot scale an all-zero sinogram")
    return clean * (float(target_counts) / total)


def realization_rng(seed, index=0):
    """Counter-based generator for realization ``index`` of base ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def poissonize(mean, seed, index=0):
    """Independent Poisson draw per bin; identical inputs give identical output."""
    mean = as_vector(mean, name="mean")
    if np.any(mean < 0):
        raise ValueError("Poisson mean must be non-negative")
    return realization_rng(seed, index).poisson(mean).astype(np.float64)
