"""File formats: headered raw float images, dictionaries, PGM renders, CSV
tables and cached sparse matrices. Every write is atomic."""

import csv
import hashlib
import io as _io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .linalg import CSRMatrix

__all__ = ["atomic_write", "write_image", "read_image", "write_dictionary", "read_dictionary",
           "write_pgm", "write_csv", "save_csr", "load_csr", "sha256_file", "fmt"]

_LE = np.dtype("<f8")


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to a temp file next to ``path``, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _split_header(raw):
    nl = raw.index(b"\n")
    return raw[:nl].decode().split(), raw[nl + 1:]


def write_image(path, data, width, height):
    """Flat little-endian float64 pixels after a ``width height [frames]`` line.

    A 2-D ``data`` of shape ``(frames, width*height)`` stores a stack.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size != width * height:
            raise DimensionError("image length does not match width*height")
        header = f"{width} {height}\n"
    else:
        if arr.shape[1] != width * height:
            raise DimensionError("frame length does not match width*height")
        header = f"{width} {height} {arr.shape[0]}\n"
    atomic_write(path, header.encode() + arr.astype(_LE).tobytes())


def read_image(path):
    """Return ``(data, width, height)``; stacks come back as ``(frames, M)``."""
    head, body = _split_header(Path(path).read_bytes())
    w, h = int(head[0]), int(head[1])
    arr = np.frombuffer(body, dtype=_LE).astype(np.float64)
    if len(head) > 2:
        frames = int(head[2])
        if arr.size != frames * w * h:
            raise DimensionError(f"{path}: payload does not match its header")
        return arr.reshape(frames, w * h), w, h
    if arr.size != w * h:
        raise DimensionError(f"{path}: payload does not match its header")
    return arr, w, h


def write_dictionary(path, atoms, patch_w):
    atoms = np.asarray(atoms, dtype=np.float64)
    m, S = atoms.shape
    atomic_write(path, f"{m} {S} {patch_w}\n".encode() + atoms.astype(_LE).tobytes(order="F"))


def read_dictionary(path):
    """Return ``(atoms, patch_w)`` with atoms as an ``m_p x S`` array."""
    head, body = _split_header(Path(path).read_bytes())
    m, S, pw = (int(v) for v in head[:3])
    arr = np.frombuffer(body, dtype=_LE)
    if arr.size != m * S:
        raise DimensionError(f"{path}: payload does not match its header")
    return arr.reshape((m, S), order="F").astype(np.float64), pw


def write_pgm(path, img, width, height, vmin=None, vmax=None):
    """8-bit binary PGM with a linear window (defaults to the image range)."""
    img = np.asarray(img, dtype=np.float64).reshape(height, width)
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    atomic_write(path, f"P5\n{width} {height}\n255\n".encode() + pix.tobytes())


def fmt(v):
    """Shortest round-trip text for floats; other values via ``str``."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def save_csr(path, A):
    buf = _io.BytesIO()
    np.savez(buf, indptr=A.indptr, indices=A.indices, data=A.data, shape=np.array(A.shape))
    atomic_write(path, buf.getvalue())


def load_csr(path):
    with np.load(path) as z:
        return CSRMatrix(z["indptr"].copy(), z["indices"].copy(), z["data"].copy(),
                         tuple(int(v) for v in z["shape"]), check=False)


def save_arrays(path, **arrays):
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


def load_arrays(path):
    with np.load(path) as z:
        return {k: z[k].copy() for k in z.files}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
