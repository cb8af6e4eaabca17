"""Synthetic two-eye face scenes with exact ground truth.

Iris texture lives in normalised (radius fraction, angle) coordinates and
is keyed to the identity, so pupil dilation, head position, eyelid
occlusion and sensor noise change the picture but not the code a perfect
pipeline would extract.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InputError
from .eyes import make_gt_eye_circles
from .geometry import Circle

SKIN, SCLERA, PUPIL, IRIS_MEAN, IRIS_AMPLITUDE, LASH = 150.0, 205.0, 28.0, 105.0, 38.0, 70.0
TEXTURE_SHAPE = (64, 512)


@dataclass(frozen=True)
class SceneParams:
    iris_radius: float = 50.0  # px
    pupil_ratio: float = 0.4  # pupil radius / iris radius
    eye_spacing: float = 8.0  # inter-pupil distance / iris radius
    noise_sigma: float = 0.0
    occlusion: float = 0.0  # fraction of the iris diameter hidden by the upper lid
    gaze: float = 0.0  # max horizontal iris offset, fraction of iris radius
    jitter: float = 0.0  # max head translation, px
    dilation_jitter: float = 0.0  # max change of pupil_ratio
    image_size: tuple | None = None  # (width, height); None sizes the canvas to the eyes

    def validate(self):
        if not 20 <= self.iris_radius <= 120:
            raise InputError(f"iris radius {self.iris_radius} outside 20..120 px")
        if not 0 <= self.noise_sigma <= 30:
            raise InputError(f"noise sigma {self.noise_sigma} outside 0..30")
        if not 0 <= self.occlusion <= 0.5:
            raise InputError(f"occlusion {self.occlusion} outside 0..0.5")
        if not (0.15 <= self.pupil_ratio - self.dilation_jitter and self.pupil_ratio + self.dilation_jitter <= 0.7):
            raise InputError(f"pupil ratio {self.pupil_ratio}+-{self.dilation_jitter} outside 0.15..0.7")
        if not 0 <= self.gaze <= 0.5:
            raise InputError(f"gaze {self.gaze} outside 0..0.5")
        if self.eye_spacing < 5:
            raise InputError(f"eye spacing {self.eye_spacing} too small, eyes would overlap")

    def canvas(self):
        if self.image_size is not None:
            return tuple(int(v) for v in self.image_size)
        d = self.eye_spacing * self.iris_radius
        w = max(640, int(math.ceil(1.6 * d / 4)) * 4)
        return w, w * 3 // 4


@dataclass
class EyeTruth:
    side: str
    pupil: Circle
    iris: Circle
    occlusion: float
    lid_y: float


@dataclass
class SyntheticScene:
    image: np.ndarray  # uint8
    clean: np.ndarray  # float, before noise
    eyes: list  # [left EyeTruth, right EyeTruth]
    iris_mask: np.ndarray  # iris annulus, both eyes
    sclera_mask: np.ndarray
    eye_mask: np.ndarray  # find-eyes ground truth
    identity_seed: int
    sample_seed: int
    params: SceneParams = field(repr=False, default=None)

    def eye(self, side):
        return self.eyes[0] if side == "left" else self.eyes[1]


def iris_texture(identity_seed, side="right"):
    """Band-pass noise on the (64 radius x 512 angle) grid, unit variance."""
    rng = np.random.default_rng([int(identity_seed), 0 if side == "left" else 1, 7])
    n = rng.standard_normal(TEXTURE_SHAPE)
    fine = ndimage.gaussian_filter(n, (1.5, 3.0), mode=("reflect", "wrap"))
    coarse = ndimage.gaussian_filter(n, (5.0, 12.0), mode=("reflect", "wrap"))
    t = fine - coarse
    return (t - t.mean()) / t.std()


def _texture_lookup(tex, rho, theta):
    """Bilinear lookup, clamped along radius and periodic along angle."""
    rows, cols = tex.shape
    ext = np.hstack([tex, tex[:, :1]])
    r = np.clip(rho * rows - 0.5, 0, rows - 1)
    c = np.mod(theta, 2 * np.pi) / (2 * np.pi) * cols
    return ndimage.map_coordinates(ext, [r, c], order=1, mode="nearest")


def background_field(seed, size):
    """Multi-scale skin-like texture (no eyes)."""
    w, h = size
    rng = np.random.default_rng([int(seed), 11])
    img = np.full((h, w), SKIN)
    for sigma, amp in ((40, 18.0), (12, 10.0), (3, 6.0), (1, 3.0)):
        # smooth fields are built on a coarse grid and upsampled
        step = max(1, int(sigma // 3))
        gh, gw = -(-h // step) + 1, -(-w // step) + 1
        f = ndimage.gaussian_filter(rng.standard_normal((gh, gw)), sigma / step, mode="wrap")
        if step > 1:
            f = ndimage.zoom(f, step, order=1)
        f = f[:h, :w]
        img += amp * f / (f.std() + 1e-12)
    return img


def natural_background(seed, size, noise_sigma=5.0):
    """Eye-free clutter image: textured field plus random dark/bright shapes."""
    w, h = size
    rng = np.random.default_rng([int(seed), 13])
    img = background_field(seed + 100_000, size) + rng.uniform(-50, 50)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(3, 9)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        ax, ay = rng.uniform(0.02, 0.2) * w, rng.uniform(0.02, 0.2) * h
        inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1
        img[inside] = rng.uniform(20, 230) + ndimage.gaussian_filter(rng.standard_normal(inside.sum()), 1) * 5
    img += rng.standard_normal((h, w)) * noise_sigma
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _eye_layout(params, rng):
    w, h = params.canvas()
    r = params.iris_radius
    d = params.eye_spacing * r
    hx, hy = (rng.uniform(-params.jitter, params.jitter, 2) if params.jitter else (0.0, 0.0))
    cy = 0.45 * h + hy
    centers = [(w / 2 - d / 2 + hx, cy), (w / 2 + d / 2 + hx, cy)]
    margin = 0.22 * d
    for cx, _ in centers:
        if cx - margin < 0 or cx + margin > w or cy - 1.2 * r < 0 or cy + 1.2 * r > h:
            raise InputError(f"eyes do not fit a {w}x{h} canvas at iris radius {r}")
    return centers


def generate_scene(identity_seed, sample_seed, params: SceneParams = SceneParams()) -> SyntheticScene:
    params.validate()
    rng = np.random.default_rng([int(identity_seed), int(sample_seed), 3])
    w, h = params.canvas()
    img = background_field(identity_seed, (w, h))
    centers = _eye_layout(params, rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    iris_mask = np.zeros((h, w), dtype=bool)
    sclera_mask = np.zeros((h, w), dtype=bool)
    eyes = []
    r = params.iris_radius
    pupil_ratio = params.pupil_ratio + (rng.uniform(-1, 1) * params.dilation_jitter if params.dilation_jitter else 0.0)
    gaze = rng.uniform(-1, 1) * params.gaze * r if params.gaze else 0.0
    for side, (ex, ey) in zip(("left", "right"), centers):
        ix, iy = ex + gaze, ey
        rp = pupil_ratio * r
        lid_y = iy - r + 2 * r * params.occlusion
        opening = ((xx - ex) / (1.9 * r)) ** 2 + ((yy - ey) / (1.15 * r)) ** 2 <= 1
        opening &= yy >= lid_y
        dist = np.hypot(xx - ix, yy - iy)
        in_iris = (dist <= r) & opening
        in_pupil = (dist <= rp) & opening
        annulus = in_iris & ~in_pupil
        sclera = opening & ~in_iris
        # lashes/lid shadow just outside the opening
        rim = ndimage.binary_dilation(opening, iterations=3) & ~opening
        img[rim] = LASH + 10 * rng.standard_normal(rim.sum())
        img[sclera] = SCLERA
        tex = iris_texture(identity_seed, side)
        rho = (dist[annulus] - rp) / (r - rp)
        theta = np.arctan2(yy[annulus] - iy, xx[annulus] - ix)
        img[annulus] = IRIS_MEAN + IRIS_AMPLITUDE * _texture_lookup(tex, rho, theta) - 15 * rho
        img[in_pupil] = PUPIL
        iris_mask |= annulus
        sclera_mask |= sclera
        eyes.append(EyeTruth(side, Circle(float(ix), float(iy), float(rp)), Circle(float(ix), float(iy), float(r)),
                             params.occlusion, float(lid_y)))
    clean = img.copy()
    if params.noise_sigma > 0:
        img = img + rng.standard_normal(img.shape) * params.noise_sigma
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    eye_mask = make_gt_eye_circles([(e.pupil.x, e.pupil.y) for e in eyes], (h, w))
    return SyntheticScene(image, clean, eyes, iris_mask, sclera_mask, eye_mask, identity_seed, sample_seed, params)


def sample_params(base: SceneParams, identity_seed, sample_seed, occlusion_max=0.0, radius_jitter=0.0):
    """Per-sample nuisances: occlusion uniform in [0, occlusion_max] and the
    iris radius scaled by a factor uniform in [1 - radius_jitter, 1 + radius_jitter]."""
    if occlusion_max <= 0 and radius_jitter <= 0:
        return base
    if not 0 <= radius_jitter < 1:
        raise InputError(f"radius jitter {radius_jitter} outside [0, 1)")
    rng = np.random.default_rng([int(identity_seed), int(sample_seed), 5])
    occ = float(rng.uniform(0, occlusion_max)) if occlusion_max > 0 else base.occlusion
    scale = float(rng.uniform(1 - radius_jitter, 1 + radius_jitter)) if radius_jitter > 0 else 1.0
    return replace(base, occlusion=occ, iris_radius=base.iris_radius * scale)
