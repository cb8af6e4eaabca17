"""Rubber-sheet normalisation, BSIF-style binary encoding and masked
Hamming distance."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .errors import FilterFileError, InputError, UnusableTemplate
from .geometry import Circle, valid_pair
from .imaging import bilinear_sample

ROWS, COLS = 64, 512
N_FILTERS, KSIZE = 7, 15
MIN_OVERLAP = 0.01
# responses this close to zero count as ties (float rounding of zero-mean kernels)
TIE_EPS = 1e-9

FILTER_MAGIC = b"BSF1"
TEMPLATE_MAGIC = b"IRT1"
SIDES = ("left", "right")


@dataclass
class RubberSheet:
    values: np.ndarray  # (64, 512) float in [0, 1]
    valid: np.ndarray  # (64, 512) bool


@dataclass
class FilterBank:
    kernels: np.ndarray  # (7, 15, 15)

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        if k.shape != (N_FILTERS, KSIZE, KSIZE):
            raise FilterFileError(f"filter bank must be {N_FILTERS}x{KSIZE}x{KSIZE}, got {k.shape}")
        self.kernels = k


@dataclass
class IrisTemplate:
    code: np.ndarray  # (7, 64, 512) bool
    mask: np.ndarray  # (64, 512) bool
    subject_id: str = ""
    eye_side: str = "right"
    _packed: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.code = np.asarray(self.code, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.code.shape != (N_FILTERS, ROWS, COLS) or self.mask.shape != (ROWS, COLS):
            raise InputError(f"template code/mask must be {(N_FILTERS, ROWS, COLS)}/{(ROWS, COLS)}, "
                             f"got {self.code.shape}/{self.mask.shape}")

    def packed(self):
        """(code bytes, mask bytes replicated per plane), cached."""
        if self._packed is None:
            self._packed = (np.packbits(self.code.ravel()),
                            np.packbits(np.broadcast_to(self.mask, self.code.shape).ravel()))
        return self._packed

    def rotated(self, k):
        """Template with the angular axis rolled by ``k`` columns."""
        return IrisTemplate(np.roll(self.code, k, axis=2), np.roll(self.mask, k, axis=1),
                            self.subject_id, self.eye_side)


def _sample_points(pupil, iris):
    theta = 2 * np.pi * np.arange(COLS) / COLS
    t = ((np.arange(ROWS) + 0.5) / ROWS)[:, None]
    c, s = np.cos(theta)[None, :], np.sin(theta)[None, :]
    px, py = pupil.x + pupil.r * c, pupil.y + pupil.r * s
    ix, iy = iris.x + iris.r * c, iris.y + iris.r * s
    return (1 - t) * px + t * ix, (1 - t) * py + t * iy


def _check_pair(pupil, iris):
    if not valid_pair(pupil, iris):
        raise InputError(f"pupil {pupil} is not strictly inside iris {iris}")


def normalize(image, pupil: Circle, iris: Circle) -> RubberSheet:
    """Homogeneous rubber sheet: 64 radial x 512 angular bilinear samples."""
    _check_pair(pupil, iris)
    img = np.asarray(image, dtype=np.float64)
    xs, ys = _sample_points(pupil, iris)
    vals, inside = bilinear_sample(img, xs, ys)
    return RubberSheet(np.clip(vals / 255.0, 0, 1), inside)


def normalize_mask(mask, pupil: Circle, iris: Circle):
    _check_pair(pupil, iris)
    m = np.asarray(mask, dtype=bool)
    xs, ys = _sample_points(pupil, iris)
    xi, yi = np.rint(xs).astype(int), np.rint(ys).astype(int)
    h, w = m.shape
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros((ROWS, COLS), dtype=bool)
    out[inside] = m[yi[inside], xi[inside]]
    return out


def _pad_sheet(a, p):
    a = np.pad(a, ((0, 0), (p, p)), mode="wrap")
    return np.pad(a, ((p, p), (0, 0)), mode="edge")


def filter_responses(values, filters: FilterBank):
    """(7, 64, 512) correlation responses; wrap on angle, replicate on radius."""
    p = KSIZE // 2
    padded = _pad_sheet(np.asarray(values, dtype=np.float64), p)
    flipped = filters.kernels[:, ::-1, ::-1]
    return signal.fftconvolve(padded[None], flipped, mode="valid", axes=(1, 2))


def encode(sheet: RubberSheet, filters: FilterBank, subject_id="", eye_side="right") -> IrisTemplate:
    resp = filter_responses(sheet.values, filters)
    code = resp > TIE_EPS
    p = KSIZE // 2
    padded = _pad_sheet(sheet.valid.astype(np.uint8), p)
    mask = ndimage.minimum_filter(padded, size=KSIZE, mode="nearest")[p:-p, p:-p].astype(bool)
    return IrisTemplate(code, mask, subject_id, eye_side)


def _popcount(a):
    return int(np.bitwise_count(a).sum(dtype=np.int64))


def hamming_distance(a: IrisTemplate, b: IrisTemplate, max_shift=0):
    """Fraction of disagreeing code bits over the jointly valid cells.

    With ``max_shift`` > 0, ``b`` is rolled by every angular offset in
    ``[-max_shift, max_shift]`` and the minimum distance is returned.
    """
    if max_shift < 0:
        raise InputError(f"max_shift must be >= 0, got {max_shift}")
    if max_shift == 0:
        return _hd_packed(a, b)
    best = None
    for k in range(-max_shift, max_shift + 1):
        try:
            hd = _hd_packed(a, b.rotated(k))
        except UnusableTemplate:
            continue
        best = hd if best is None else min(best, hd)
    if best is None:
        raise UnusableTemplate("no angular shift leaves a usable joint mask")
    return best


def _hd_packed(a, b):
    ca, ma = a.packed()
    cb, mb = b.packed()
    joint = ma & mb
    n = _popcount(joint)
    if n < MIN_OVERLAP * N_FILTERS * ROWS * COLS:
        raise UnusableTemplate(f"joint mask covers {n // N_FILTERS} cells, below {MIN_OVERLAP:.0%} of the sheet")
    return _popcount((ca ^ cb) & joint) / n


def hamming_matrix(templates_a, templates_b=None):
    """Pairwise shift-0 distances; NaN where the joint mask is unusable."""
    A = np.stack([t.packed()[0] for t in templates_a])
    MA = np.stack([t.packed()[1] for t in templates_a])
    if templates_b is None:
        B, MB = A, MA
    else:
        B = np.stack([t.packed()[0] for t in templates_b])
        MB = np.stack([t.packed()[1] for t in templates_b])
    out = np.empty((len(A), len(B)))
    floor = MIN_OVERLAP * N_FILTERS * ROWS * COLS
    for i in range(len(A)):
        joint = MA[i] & MB
        n = np.bitwise_count(joint).sum(axis=1, dtype=np.int64)
        x = np.bitwise_count((A[i] ^ B) & joint).sum(axis=1, dtype=np.int64)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i] = np.where(n >= floor, x / np.maximum(n, 1), np.nan)
    return out


# -- filter banks -------------------------------------------------------------

def generate_fallback_filters(seed=42) -> FilterBank:
    """Seeded 7x15x15 bank, each kernel zero-mean and unit-norm."""
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((N_FILTERS, KSIZE, KSIZE))
    k -= k.mean(axis=(1, 2), keepdims=True)
    k /= np.sqrt((k ** 2).sum(axis=(1, 2), keepdims=True))
    return FilterBank(k)


def save_filters(bank: FilterBank, path):
    k = np.ascontiguousarray(bank.kernels, dtype="<f4")
    Path(path).write_bytes(FILTER_MAGIC + struct.pack("<III", *k.shape) + k.tobytes())


def load_filters(path) -> FilterBank:
    buf = Path(path).read_bytes()
    if buf[:4] != FILTER_MAGIC:
        raise FilterFileError(f"{path}: not a filter file (bad magic)")
    if len(buf) < 16:
        raise FilterFileError(f"{path}: truncated filter header")
    n, h, w = struct.unpack("<III", buf[4:16])
    if n != N_FILTERS:
        raise FilterFileError(f"{path}: expected {N_FILTERS} filters, found {n}")
    if (h, w) != (KSIZE, KSIZE):
        raise FilterFileError(f"{path}: expected {KSIZE}x{KSIZE} kernels, found {h}x{w}")
    body = buf[16:]
    if len(body) != 4 * n * h * w:
        raise FilterFileError(f"{path}: filter payload has {len(body)} bytes, expected {4 * n * h * w}")
    k = np.frombuffer(body, dtype="<f4").reshape(n, h, w).astype(np.float64)
    if not np.all(np.isfinite(k)):
        raise FilterFileError(f"{path}: non-finite filter coefficients")
    k -= k.mean(axis=(1, 2), keepdims=True)
    return FilterBank(k)


# -- template files -------------------------------------------------------------

def save_template(t: IrisTemplate, path):
    sid = t.subject_id.encode("utf-8")
    head = TEMPLATE_MAGIC + struct.pack("<HHH", N_FILTERS, ROWS, COLS)
    body = np.packbits(t.code.ravel()).tobytes() + np.packbits(t.mask.ravel()).tobytes()
    tail = struct.pack("<H", len(sid)) + sid + struct.pack("<B", SIDES.index(t.eye_side))
    Path(path).write_bytes(head + body + tail)


def load_template(path) -> IrisTemplate:
    buf = Path(path).read_bytes()
    if buf[:4] != TEMPLATE_MAGIC:
        raise InputError(f"{path}: not a template file (bad magic)")
    if len(buf) < 10:
        raise InputError(f"{path}: truncated template header")
    planes, rows, cols = struct.unpack("<HHH", buf[4:10])
    if (planes, rows, cols) != (N_FILTERS, ROWS, COLS):
        raise InputError(f"{path}: template is {planes}x{rows}x{cols}, expected {N_FILTERS}x{ROWS}x{COLS}")
    ncode = planes * rows * cols // 8
    nmask = rows * cols // 8
    pos = 10
    if len(buf) < pos + ncode + nmask + 2:
        raise InputError(f"{path}: truncated template payload")
    code = np.unpackbits(np.frombuffer(buf, np.uint8, ncode, pos)).reshape(planes, rows, cols)
    pos += ncode
    mask = np.unpackbits(np.frombuffer(buf, np.uint8, nmask, pos)).reshape(rows, cols)
    pos += nmask
    (slen,) = struct.unpack("<H", buf[pos:pos + 2])
    pos += 2
    if len(buf) != pos + slen + 1:
        raise InputError(f"{path}: template trailer has the wrong length")
    try:
        sid = buf[pos:pos + slen].decode("utf-8")
    except UnicodeDecodeError:
        raise InputError(f"{path}: subject id is not valid UTF-8") from None
    side = buf[pos + slen]
    if side > 1:
        raise InputError(f"{path}: eye side byte {side} is not 0 or 1")
    return IrisTemplate(code.astype(bool), mask.astype(bool), sid, SIDES[side])
