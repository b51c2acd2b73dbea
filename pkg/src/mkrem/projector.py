"""2-D parallel-beam PET system model with exact line-length (Siddon) weights.

Pixel ``(i, j)`` (row ``i``, column ``j``, flattened as ``i * width + j``)
covers ``x in [x0 + j*s, x0 + (j+1)*s]`` and ``y in [y0 + i*s, y0 + (i+1)*s]``
with the image centred on the origin. The ray for angle ``theta`` and radial
offset ``t`` is the line ``{t*n + lam*d}`` with ``d = (cos, sin)`` and
``n = (-sin, cos)``; at ``theta = 0`` rays run along image rows. Sinogram
bins are ordered angle-major.
"""

from dataclasses import dataclass

import numpy as np

from ._accel import njit, pick
from .linalg import CSRMatrix, as_vector, matvec, matvec_transpose

__all__ = ["Geometry", "SystemModel", "build_system_matrix", "build_model",
           "forward", "backproject", "sensitivity"]

_AXIS_EPS = 1e-12
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class Geometry:
    image_width: int = 64
    image_height: int = 64
    n_angles: int = 90
    n_radial: int = 95
    pixel_size: float = 1.0

    def __post_init__(self):
        for name in ("image_width", "image_height", "n_angles", "n_radial"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def n_bins(self):
        return self.n_angles * self.n_radial

    @property
    def n_voxels(self):
        return self.image_width * self.image_height

    def angles(self):
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    def offsets(self):
        return (np.arange(self.n_radial) - (self.n_radial - 1) / 2.0) * self.pixel_size


@dataclass(frozen=True, eq=False)
class SystemModel:
    """System matrix ``H`` (bins x voxels), additive mean ``r`` and an
    optional per-bin multiplicative correction ``norm``."""

    H: CSRMatrix
    r: np.ndarray
    norm: np.ndarray = None

    def __post_init__(self):
        r = as_vector(self.r, self.H.n_rows, "r")
        if np.any(r < 0):
            raise ValueError("additive term r must be non-negative")
        object.__setattr__(self, "r", r)
        if self.norm is not None:
            norm = as_vector(self.norm, self.H.n_rows, "norm")
            if np.any(norm < 0):
                raise ValueError("norm must be non-negative")
            object.__setattr__(self, "norm", norm)

    @property
    def n_bins(self):
        return self.H.n_rows

    @property
    def n_voxels(self):
        return self.H.n_cols

    def with_r(self, r):
        return SystemModel(self.H, r, self.norm)


def _snap(v):
    return 0.0 if abs(v) < _AXIS_EPS else v


def _axis_cells(u, n):
    """Cells hit by an axis-aligned line at fractional grid coordinate ``u``.

    A line lying on a cell boundary is the limit from both sides, so it gives
    half weight to each neighbour.
    """
    k = round(u)
    if abs(u - k) < _EDGE_EPS:
        return [(c, 0.5) for c in (k - 1, k) if 0 <= c < n]
    c = int(np.floor(u))
    return [(c, 1.0)] if 0 <= c < n else []


@njit
def _trace_rays_nb(cosv, sinv, offs, width, height, s, out_ray, out_pix, out_len):
    x0 = -0.5 * width * s
    y0 = -0.5 * height * s
    xs = x0 + np.arange(width + 1) * s
    ys = y0 + np.arange(height + 1) * s
    lam = np.empty(width + height + 4)
    pos = 0
    n_off = offs.shape[0]
    for a in range(cosv.shape[0]):
        c = cosv[a]
        sn = sinv[a]
        if c == 0.0 or sn == 0.0:
            continue
        for r in range(n_off):
            t = offs[r]
            px = -t * sn
            py = t * c
            lx0 = (xs[0] - px) / c
            lx1 = (xs[width] - px) / c
            ly0 = (ys[0] - py) / sn
            ly1 = (ys[height] - py) / sn
            lo = max(min(lx0, lx1), min(ly0, ly1))
            hi = min(max(lx0, lx1), max(ly0, ly1))
            if hi <= lo:
                continue
            cnt = 0
            lam[cnt] = lo
            cnt += 1
            lam[cnt] = hi
            cnt += 1
            for k in range(width + 1):
                v = (xs[k] - px) / c
                if lo < v < hi:
                    lam[cnt] = v
                    cnt += 1
            for k in range(height + 1):
                v = (ys[k] - py) / sn
                if lo < v < hi:
                    lam[cnt] = v
                    cnt += 1
            seg = np.sort(lam[:cnt])
            ray = a * n_off + r
            for k in range(cnt - 1):
                ln = seg[k + 1] - seg[k]
                if ln <= 1e-12 * s:
                    continue
                mid = 0.5 * (seg[k] + seg[k + 1])
                col = int(np.floor((px + mid * c - x0) / s))
                row = int(np.floor((py + mid * sn - y0) / s))
                col = min(max(col, 0), width - 1)
                row = min(max(row, 0), height - 1)
                out_ray[pos] = ray
                out_pix[pos] = row * width + col
                out_len[pos] = ln
                pos += 1
    return pos


def _trace_rays_np(cosv, sinv, offs, width, height, s, out_ray, out_pix, out_len):
    x0 = -0.5 * width * s
    y0 = -0.5 * height * s
    xs = x0 + np.arange(width + 1) * s
    ys = y0 + np.arange(height + 1) * s
    pos = 0
    n_off = offs.shape[0]
    for a in range(cosv.shape[0]):
        c, sn = cosv[a], sinv[a]
        if c == 0.0 or sn == 0.0:
            continue
        for r in range(n_off):
            t = offs[r]
            px, py = -t * sn, t * c
            lx = (xs - px) / c
            ly = (ys - py) / sn
            lo = max(min(lx[0], lx[-1]), min(ly[0], ly[-1]))
            hi = min(max(lx[0], lx[-1]), max(ly[0], ly[-1]))
            if hi <= lo:
                continue
            inner = np.concatenate([lx[(lx > lo) & (lx < hi)], ly[(ly > lo) & (ly < hi)]])
            seg = np.sort(np.concatenate([[lo, hi], inner]))
            ln = np.diff(seg)
            keep = ln > 1e-12 * s
            mid = 0.5 * (seg[:-1] + seg[1:])[keep]
            cols = np.clip(np.floor((px + mid * c - x0) / s).astype(np.int64), 0, width - 1)
            rows = np.clip(np.floor((py + mid * sn - y0) / s).astype(np.int64), 0, height - 1)
            k = int(keep.sum())
            out_ray[pos:pos + k] = a * n_off + r
            out_pix[pos:pos + k] = rows * width + cols
            out_len[pos:pos + k] = ln[keep]
            pos += k
    return pos


_trace_rays = pick(_trace_rays_nb, _trace_rays_np)


def build_system_matrix(geom):
    """Sparse system matrix whose entry ``(ray, pixel)`` is the length of the
    ray inside the pixel."""
    W, Hh, s = geom.image_width, geom.image_height, float(geom.pixel_size)
    theta = geom.angles()
    offs = geom.offsets()
    cosv = np.array([_snap(v) for v in np.cos(theta)])
    sinv = np.array([_snap(v) for v in np.sin(theta)])

    cap = geom.n_bins * (W + Hh + 2)
    out_ray = np.empty(cap, dtype=np.int64)
    out_pix = np.empty(cap, dtype=np.int64)
    out_len = np.empty(cap)
    pos = _trace_rays(cosv, sinv, offs, W, Hh, s, out_ray, out_pix, out_len)
    rays, pixels, lengths = [out_ray[:pos]], [out_pix[:pos]], [out_len[:pos]]

    # axis-aligned views, including the boundary split
    for a in range(geom.n_angles):
        c, sn = cosv[a], sinv[a]
        if sn != 0.0 and c != 0.0:
            continue
        for r, t in enumerate(offs):
            ray = a * geom.n_radial + r
            if sn == 0.0:
                # horizontal line y = t * cos(theta)
                for row, w in _axis_cells((t * c + 0.5 * Hh * s) / s, Hh):
                    rays.append(np.full(W, ray))
                    pixels.append(row * W + np.arange(W))
                    lengths.append(np.full(W, w * s))
            else:
                # vertical line x = -t * sin(theta)
                for col, w in _axis_cells((-t * sn + 0.5 * W * s) / s, W):
                    rays.append(np.full(Hh, ray))
                    pixels.append(np.arange(Hh) * W + col)
                    lengths.append(np.full(Hh, w * s))

    return CSRMatrix.from_coo(np.concatenate(rays), np.concatenate(pixels),
                              np.concatenate(lengths), (geom.n_bins, geom.n_voxels))


def build_model(geom, r=None, norm=None):
    H = build_system_matrix(geom)
    if r is None:
        r = np.zeros(H.n_rows)
    elif np.isscalar(r):
        r = np.full(H.n_rows, float(r))
    return SystemModel(H, r, norm)


def forward(model, x):
    """Expected sinogram ``H x + r`` (with the per-bin correction, if any)."""
    x = as_vector(x, model.n_voxels, "image")
    hx = matvec(model.H, x)
    if model.norm is not None:
        hx *= model.norm
    return hx + model.r


def project(model, x):
    """``H x`` without the additive term."""
    x = as_vector(x, model.n_voxels, "image")
    hx = matvec(model.H, x)
    if model.norm is not None:
        hx *= model.norm
    return hx


def backproject(model, q):
    """Adjoint projection ``H^T q``."""
    q = as_vector(q, model.n_bins, "sinogram")
    if model.norm is not None:
        q = q * model.norm
    return matvec_transpose(model.H, q)


def sensitivity(model):
    """Backprojection of the all-ones sinogram."""
    return backproject(model, np.ones(model.n_bins))


def fov_mask(geom):
    """Pixels whose centre lies inside the circle swept by the radial extent."""
    W, Hh, s = geom.image_width, geom.image_height, geom.pixel_size
    x = (np.arange(W) - (W - 1) / 2.0) * s
    y = (np.arange(Hh) - (Hh - 1) / 2.0) * s
    rad = 0.5 * geom.n_radial * s
    return ((x[None, :] ** 2 + y[:, None] ** 2) <= rad ** 2).ravel()

