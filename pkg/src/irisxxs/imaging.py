"""Raster helpers: PGM codec, resampling and rotation augmentation.

Pixel centres sit on integer coordinates, ``x`` is the column and ``y`` the
row.  Resampling maps destination pixel centres onto source pixel centres
(``src = (dst + 0.5) * scale - 0.5``), the same convention OpenCV uses.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ImageFormatError, InputError

try:  # optional PNG support
    from PIL import Image as _PIL
except ImportError:  # pragma: no cover
    _PIL = None

HAS_PNG = _PIL is not None


def to_gray(image):
    """Float32 grayscale copy; RGB(A) input is averaged over its colour channels."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[..., :3].astype(np.float32).mean(axis=2)
    if a.ndim != 2:
        raise InputError(f"expected a 2-D raster, got shape {a.shape}")
    return a.astype(np.float32)


def resize_bilinear(image, size):
    """Resize a 2-D raster to ``size = (height, width)``."""
    img = np.asarray(image, dtype=np.float32)
    h, w = size
    if img.shape == (h, w):
        return img.copy()
    sy = img.shape[0] / h
    sx = img.shape[1] / w
    ys = (np.arange(h) + 0.5) * sy - 0.5
    xs = (np.arange(w) + 0.5) * sx - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest").astype(np.float32)


def resize_nearest(mask, size):
    m = np.asarray(mask)
    h, w = size
    ys = np.minimum(((np.arange(h) + 0.5) * m.shape[0] / h).astype(int), m.shape[0] - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * m.shape[1] / w).astype(int), m.shape[1] - 1)
    return m[np.ix_(ys, xs)]


def bilinear_sample(image, xs, ys):
    """Sample ``image`` at real coordinates; returns (values, inside-image flags)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    inside = (xs >= -0.5) & (xs <= w - 0.5) & (ys >= -0.5) & (ys <= h - 0.5)
    vals = ndimage.map_coordinates(img, [ys, xs], order=1, mode="nearest")
    return vals, inside


def augment_rotate(image, mask, angle_deg):
    """Rotate an image/mask pair about the canvas centre.

    Bilinear for the image, nearest for the mask; corners that come from
    outside the source are zero.
    """
    if abs(angle_deg) > 30:
        raise InputError(f"rotation angle must be within +-30 degrees, got {angle_deg}")
    img = np.asarray(image)
    m = np.asarray(mask)
    if angle_deg == 0:
        return img.copy(), m.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(angle_deg)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: destination -> source
    sx = np.cos(t) * (xx - cx) + np.sin(t) * (yy - cy) + cx
    sy = -np.sin(t) * (xx - cx) + np.cos(t) * (yy - cy) + cy
    out = ndimage.map_coordinates(img.astype(np.float64), [sy, sx], order=1, mode="constant", cval=0.0)
    mout = ndimage.map_coordinates(m.astype(np.uint8), [sy, sx], order=0, mode="constant", cval=0)
    if img.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    else:
        out = out.astype(img.dtype)
    return out, mout.astype(m.dtype)


# -- PGM ----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf, count):
    tokens = []
    pos = 0
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("malformed PGM header: unexpected end of header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def decode_pgm(buf, name="<bytes>"):
    if len(buf) < 2 or buf[:1] != b"P" or buf[1:2] not in (b"2", b"5"):
        raise ImageFormatError(f"{name}: malformed PGM header: missing P2/P5 magic")
    kind = buf[1:2]
    try:
        tokens, pos = _header_tokens(buf[2:], 3)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{name}: {exc}") from None
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{name}: malformed PGM header: non-integer field") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{name}: malformed PGM header: zero dimension {w}x{h}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{name}: unsupported PGM maxval {maxval} (8-bit only)")
    body = buf[2 + pos:]
    if kind == b"5":
        if not body[:1].isspace():
            raise ImageFormatError(f"{name}: malformed PGM header: no separator before raster")
        body = body[1:]
        if len(body) < w * h:
            raise ImageFormatError(f"{name}: truncated PGM payload: {len(body)} of {w * h} bytes")
        data = np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w).copy()
    else:
        fields = body.split()
        if len(fields) < w * h:
            raise ImageFormatError(f"{name}: truncated PGM payload: {len(fields)} of {w * h} values")
        try:
            vals = np.array([int(f) for f in fields[:w * h]], dtype=np.int64)
        except ValueError:
            raise ImageFormatError(f"{name}: non-integer value in ASCII PGM raster") from None
        if vals.min() < 0 or vals.max() > maxval:
            raise ImageFormatError(f"{name}: ASCII PGM value outside 0..{maxval}")
        data = vals.astype(np.uint8).reshape(h, w)
    if maxval != 255:
        data = np.rint(data.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return data


def encode_pgm(raster, comment=None):
    a = np.asarray(raster)
    if a.ndim != 2 or 0 in a.shape:
        raise InputError(f"PGM raster must be non-empty 2-D, got shape {a.shape}")
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    a = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    note = f"# {comment}\n" if comment else ""
    return f"P5\n{note}{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes()


def load_image(path):
    """Load an 8-bit grayscale raster (PGM P2/P5, PNG when Pillow is present)."""
    p = Path(path)
    buf = p.read_bytes()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        if not HAS_PNG:
            raise ImageFormatError(f"{p}: PNG support is not available")
        with _PIL.open(p) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    return decode_pgm(buf, str(p))


def save_image(raster, path, comment=None):
    """Write a raster as binary PGM (or PNG for a ``.png`` suffix)."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        if not HAS_PNG:
            raise ImageFormatError(f"{p}: PNG support is not available")
        a = np.asarray(raster)
        a = a.astype(np.uint8) * 255 if a.dtype == bool else np.clip(np.rint(a), 0, 255).astype(np.uint8)
        _PIL.fromarray(a).save(p)
        return
    p.write_bytes(encode_pgm(raster, comment))


def load_mask(path):
    return load_image(path) > 127


def save_mask(mask, path, comment=None):
    save_image(np.asarray(mask, dtype=bool), path, comment)
