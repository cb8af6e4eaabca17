"""Two-eye geometry: blobs from the eye mask, periocular boxes and crops."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import Degenerate, InputError, NotFound

BOX_WIDTH = 0.44
BOX_HEIGHT = 0.33
GT_RADIUS = 0.2
MIN_AREA_FRACTION = 0.0005
MIN_EYE_DISTANCE = 10.0

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class EyeBlob:
    centroid: tuple
    area: int
    label: str


@dataclass(frozen=True)
class EyeBox:
    center: tuple
    width: int
    height: int
    x0: int
    y0: int
    clipped: bool = False

    @property
    def x1(self):
        return self.x0 + self.width

    @property
    def y1(self):
        return self.y0 + self.height


def find_eye_blobs(mask, min_area_fraction=MIN_AREA_FRACTION):
    """Two largest 8-connected blobs, labelled ``left``/``right`` by x order."""
    m = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        raise NotFound("no eye blobs in mask")
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(m, labels, idx)
    keep = areas >= min_area_fraction * m.size
    if keep.sum() < 2:
        raise NotFound(f"found {int(keep.sum())} eye blob(s), need two")
    # largest two; stable on ties by label order
    order = np.argsort(-areas[keep], kind="stable")[:2]
    chosen = idx[keep][order]
    cents = ndimage.center_of_mass(m, labels, chosen)
    blobs = [EyeBlob((float(c[1]), float(c[0])), int(areas[lab - 1]), "") for c, lab in zip(cents, chosen)]
    blobs.sort(key=lambda b: b.centroid[0])
    return [EyeBlob(blobs[0].centroid, blobs[0].area, "left"),
            EyeBlob(blobs[1].centroid, blobs[1].area, "right")]


def eye_distance(blobs):
    (x0, y0), (x1, y1) = blobs[0].centroid, blobs[1].centroid
    return math.hypot(x1 - x0, y1 - y0)


def eye_boxes(blobs, image_shape=None):
    """Periocular boxes of 0.44 d x 0.33 d centred on each blob centroid.

    With ``image_shape`` given, boxes reaching past the border are flagged
    ``clipped``; their nominal extent is kept so crops stay a fixed size.
    """
    if len(blobs) != 2:
        raise InputError(f"eye_boxes needs exactly two blobs, got {len(blobs)}")
    d = eye_distance(blobs)
    if d < MIN_EYE_DISTANCE:
        raise Degenerate(f"eye centroids {d:.1f} px apart, below the {MIN_EYE_DISTANCE:.0f} px floor")
    w = int(round(BOX_WIDTH * d))
    h = int(round(BOX_HEIGHT * d))
    boxes = []
    for b in blobs:
        cx, cy = b.centroid
        # floor(v + 0.5) rather than round(): half-way cases must not flip
        # with the parity of the position or boxes stop translating rigidly
        x0 = math.floor(cx - w / 2 + 0.5)
        y0 = math.floor(cy - h / 2 + 0.5)
        clipped = False
        if image_shape is not None:
            H, W = image_shape[:2]
            clipped = x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H
        boxes.append(EyeBox((cx, cy), w, h, x0, y0, clipped))
    return boxes


def crop_periocular(image, box: EyeBox):
    """Pixel-exact crop; parts of the box outside the image are zero."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    sx0, sy0 = max(box.x0, 0), max(box.y0, 0)
    sx1, sy1 = min(box.x1, W), min(box.y1, H)
    if sx0 >= sx1 or sy0 >= sy1:
        raise InputError(f"box ({box.x0},{box.y0})-({box.x1},{box.y1}) does not overlap the {W}x{H} image")
    out = np.zeros((box.height, box.width) + img.shape[2:], dtype=img.dtype)
    out[sy0 - box.y0:sy1 - box.y0, sx0 - box.x0:sx1 - box.x0] = img[sy0:sy1, sx0:sx1]
    return out


def make_gt_eye_circles(pupil_centers, shape):
    """Ground-truth eye mask: two discs of radius 0.2 d at the pupil centres."""
    (x0, y0), (x1, y1) = pupil_centers
    d = math.hypot(x1 - x0, y1 - y0)
    if d == 0:
        raise InputError("pupil centres coincide")
    r = GT_RADIUS * d
    h, w = shape
    yy, xx = np.ogrid[0:h, 0:w]
    return ((xx - x0) ** 2 + (yy - y0) ** 2 <= r * r) | ((xx - x1) ** 2 + (yy - y1) ** 2 <= r * r)
