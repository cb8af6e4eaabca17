"""Pupil/iris circle fitting from a binary iris mask.

Boundary pixels feed either an algebraic least-squares fit or a Hough
vote; ``localize_mixed`` picks between them from the vertical/horizontal
extent ratio of the mask (eyelids only ever shorten the vertical extent).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import Degenerate, InputError, NotFound
from .geometry import Circle

OCCLUSION_RATIO = 0.85
HOUGH_CONFIDENCE_FLOOR = 0.30
MAX_CONDITION = 1e10

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class BoundaryPointSet:
    inner: np.ndarray  # (n, 2) x, y
    outer: np.ndarray


@dataclass
class HoughResult:
    circle: Circle
    votes: int
    confidence: float

    @property
    def low_confidence(self):
        return self.confidence < HOUGH_CONFIDENCE_FLOOR


@dataclass
class Localization:
    pupil: Circle
    iris: Circle
    method: str
    confidence: float = 1.0


def _xy(mask):
    ys, xs = np.nonzero(mask)
    return np.column_stack([xs, ys]).astype(np.float64)


def extract_boundaries(mask):
    """Foreground pixels edge-adjacent to the exterior background (outer)
    or to an enclosed hole (inner).

    Edge (4-) adjacency keeps the boundary one pixel thick, the trace an
    8-connected contour follower would give; corner-only contacts would
    pull in pixels up to 1.4 px inside the curve.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise NotFound("empty mask has no boundary")
    bg = ~m
    padded = np.pad(bg, 1, constant_values=True)
    labels, _ = ndimage.label(padded)  # 4-connected background, dual of 8-connected foreground
    exterior = (labels == labels[0, 0])[1:-1, 1:-1]
    holes = bg & ~exterior
    touches_ext = ndimage.binary_dilation(np.pad(exterior, 1, constant_values=True), structure=_FOUR)[1:-1, 1:-1]
    touches_hole = ndimage.binary_dilation(holes, structure=_FOUR)
    return BoundaryPointSet(inner=_xy(m & touches_hole), outer=_xy(m & touches_ext))


def lms_circle_fit(points):
    """Algebraic (Kasa) fit of x^2 + y^2 + D x + E y + F = 0."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) < 3:
        raise Degenerate(f"circle fit needs at least 3 points, got {len(p)}")
    c = p.mean(axis=0)
    q = p - c
    scale = np.sqrt((q ** 2).sum(axis=1).mean()) or 1.0
    q = q / scale
    a = np.column_stack([q[:, 0], q[:, 1], np.ones(len(q))])
    b = -(q ** 2).sum(axis=1)
    s = np.linalg.svd(a, compute_uv=False)
    if s[-1] == 0 or s[0] / s[-1] > MAX_CONDITION:
        raise Degenerate("points are collinear; circle fit is singular")
    (D, E, F), *_ = np.linalg.lstsq(a, b, rcond=None)
    r2 = (D * D + E * E) / 4 - F
    if r2 <= 0:
        raise Degenerate("least-squares circle has non-positive radius")
    return Circle(float(c[0] - D / 2 * scale), float(c[1] - E / 2 * scale), float(math.sqrt(r2) * scale))


def _ring_offsets(r, step):
    """Integer cell offsets (dx, dy) whose distance rounds to ``r`` grid cells."""
    R = int(math.ceil(r)) + 1
    dy, dx = np.mgrid[-R:R + 1, -R:R + 1]
    dist = np.hypot(dx, dy)
    sel = np.abs(dist - r) <= 0.5
    return dx[sel], dy[sel]


def hough_circle(points, r_min, r_max, accumulator_step=1.0):
    """Vote each point onto the centre rings of every candidate radius.

    Ties resolve to the smallest radius, then smallest y, then smallest x.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        raise NotFound("no points to vote")
    if not r_min < r_max:
        raise InputError(f"need r_min < r_max, got {r_min}, {r_max}")
    step = float(accumulator_step)
    radii = np.arange(r_min, r_max + 1e-9, step)
    q = np.rint(p / step).astype(np.int64)
    q = np.unique(q, axis=0)
    pad = int(math.ceil(r_max / step)) + 1
    x0, y0 = q[:, 0].min() - pad, q[:, 1].min() - pad
    gw = q[:, 0].max() + pad - x0 + 1
    gh = q[:, 1].max() + pad - y0 + 1
    acc = np.zeros((len(radii), gh, gw), dtype=np.int32)
    qx, qy = q[:, 0] - x0, q[:, 1] - y0
    for k, r in enumerate(radii):
        dx, dy = _ring_offsets(r / step, step)
        cx = (qx[:, None] - dx[None, :]).ravel()
        cy = (qy[:, None] - dy[None, :]).ravel()
        acc[k] = np.bincount(cy * gw + cx, minlength=gh * gw).reshape(gh, gw)
    k, iy, ix = np.unravel_index(int(np.argmax(acc)), acc.shape)
    votes = int(acc[k, iy, ix])
    r = float(radii[k])
    circumference = max(2 * math.pi * r / step, 1.0)
    circle = Circle(float((ix + x0) * step), float((iy + y0) * step), r)
    return HoughResult(circle, votes, min(votes / circumference, 1.0))


def extent_ratio(mask):
    """Dy / Dx of the foreground bounding extents."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise NotFound("empty mask")
    return (ys.max() - ys.min() + 1) / (xs.max() - xs.min() + 1)


def localize_center_of_mass(mask):
    """Centroid and equal-area radius; returns (Circle, low_confidence)."""
    m = np.asarray(mask, dtype=bool)
    area = int(m.sum())
    if area == 0:
        raise NotFound("empty mask")
    ys, xs = np.nonzero(m)
    _, n = ndimage.label(m, structure=_EIGHT)
    return Circle(float(xs.mean()), float(ys.mean()), math.sqrt(area / math.pi)), n > 1


def _largest_component(m):
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n <= 1:
        return m
    sizes = ndimage.sum_labels(m, labels, np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def clean_mask(mask):
    """Largest foreground component with every hole but the largest filled."""
    m = _largest_component(np.asarray(mask, dtype=bool))
    if not m.any():
        return m
    filled = ndimage.binary_fill_holes(m)
    holes = filled & ~m
    labels, n = ndimage.label(holes)
    if n > 1:
        sizes = ndimage.sum_labels(holes, labels, np.arange(1, n + 1))
        keep = labels == int(np.argmax(sizes)) + 1
        m = filled & ~keep
    return m


def localize_mixed(mask, dark_points=None, occlusion_ratio=OCCLUSION_RATIO, edge_correction=True):
    """Pupil and iris circles from an iris (annulus) mask.

    LMS when the extent ratio Dy/Dx is at least ``occlusion_ratio``, Hough
    otherwise.  When the mask has no pupil hole, ``dark_points`` (x, y pixels
    of low intensity inside the iris) drive a Hough search for the pupil with
    radius limited to 0.2..0.8 of the iris radius.

    ``edge_correction`` moves fitted radii half a pixel from the boundary
    pixel centres to the pixel edges (outwards for the iris, inwards for the
    pupil).
    """
    m = clean_mask(mask)
    b = extract_boundaries(m)
    if len(b.outer) == 0:
        raise NotFound("mask has no outer boundary")
    ratio = extent_ratio(m)
    occluded = ratio < occlusion_ratio
    half = 0.5 if edge_correction else 0.0
    confidence = 1.0
    if occluded:
        ys, xs = np.nonzero(m)
        span = xs.max() - xs.min() + 1
        r_lo, r_hi = max(2.0, 0.3 * span), max(3.0, 0.7 * span)
        h = hough_circle(b.outer, r_lo, r_hi)
        iris = h.circle
        confidence = h.confidence
        method = "hough"
    else:
        iris = lms_circle_fit(b.outer)
        method = "lms"
    iris = Circle(iris.x, iris.y, iris.r + half)

    if len(b.inner) >= 3:
        if occluded:
            h = hough_circle(b.inner, max(1.0, 0.1 * iris.r), max(2.0, 0.9 * iris.r))
            pupil = h.circle
            confidence = min(confidence, h.confidence)
        else:
            pupil = lms_circle_fit(b.inner)
        pupil = Circle(pupil.x, pupil.y, max(pupil.r - half, 0.5))
    elif dark_points is not None and len(dark_points):
        h = hough_circle(dark_points, max(1.0, 0.2 * iris.r), max(2.0, 0.8 * iris.r))
        pupil = h.circle
        confidence = min(confidence, h.confidence)
        method += "+dark"
    else:
        raise NotFound("mask has no pupil hole and no dark pixels were supplied")
    return Localization(pupil, iris, method, confidence)
