"""Small geometric value types shared by the localizer, codec and generator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Circle:
    """An ``(x, y, r)`` triplet in pixel coordinates."""

    x: float
    y: float
    r: float

    def shifted(self, dx, dy):
        return Circle(self.x + dx, self.y + dy, self.r)

    def scaled(self, s):
        # pixel centres scale about -0.5, matching imaging.resize_*
        return Circle((self.x + 0.5) * s - 0.5, (self.y + 0.5) * s - 0.5, self.r * s)

    def contains(self, other: "Circle") -> bool:
        return math.hypot(self.x - other.x, self.y - other.y) + other.r <= self.r + 1e-9

    def astuple(self):
        return (self.x, self.y, self.r)


def disc(shape, circle: Circle):
    """Boolean raster of pixels whose centres lie within ``circle``."""
    h, w = shape
    yy, xx = np.ogrid[0:h, 0:w]
    return (xx - circle.x) ** 2 + (yy - circle.y) ** 2 <= circle.r ** 2


def valid_pair(pupil: Circle, iris: Circle) -> bool:
    return (0 < pupil.r < iris.r
            and math.hypot(pupil.x - iris.x, pupil.y - iris.y) < iris.r
            and iris.contains(pupil))
