"""Sensor calibration: resolution sweep, radius-vs-distance model, SNR
tabulation, gaze aperture ratio and the optimal capture-distance interval."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, PipelineConfig, companion
from .errors import InputError
from .imaging import load_image, load_mask, resize_bilinear, resize_nearest
from .metrics import snr

DEFAULT_MIN_RADIUS = 45.0
SWEEP_COLUMNS = ("width_px", "mean_iris_radius_px", "eer", "d_prime", "usable")
MAX_FAILURE_FRACTION = 0.5


# -- radius vs distance -------------------------------------------------------------

@dataclass
class RadiusDistanceModel:
    """Pinhole model ``r = k / d`` (``d`` in cm, ``r`` in px)."""
    k: float
    samples: list = field(default_factory=list)
    residual_rms: float = 0.0

    def predict(self, distance_cm):
        d = np.asarray(distance_cm, dtype=np.float64)
        if np.any(d <= 0):
            raise InputError("distance must be positive")
        r = self.k / d
        return float(r) if r.ndim == 0 else r

    def invert(self, radius_px):
        """Distance at which the iris radius is ``radius_px``."""
        r = np.asarray(radius_px, dtype=np.float64)
        if np.any(r <= 0):
            raise InputError("radius must be positive")
        d = self.k / r
        return float(d) if d.ndim == 0 else d

    def lines(self):
        return [f"k_px_cm: {self.k:.6g}", f"samples: {len(self.samples)}", f"residual_rms_px: {self.residual_rms:.6g}"]


def fit_radius_model(samples) -> RadiusDistanceModel:
    """Least-squares ``k`` for ``r = k/d``: k = sum(r/d) / sum(1/d^2).

    One sample is enough to pin ``k``; repeated distances are treated as
    independent measurements.
    """
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(s) == 0:
        raise InputError("radius model needs at least one (distance, radius) sample")
    d, r = s[:, 0], s[:, 1]
    if np.any(~np.isfinite(s)):
        raise InputError("samples must be finite")
    if np.any(d <= 0):
        raise InputError("distances must be positive")
    if np.any(r <= 0):
        raise InputError("radii must be positive")
    inv = 1.0 / d
    k = float(np.sum(r * inv) / np.sum(inv * inv))
    rms = float(np.sqrt(np.mean((r - k * inv) ** 2)))
    return RadiusDistanceModel(k, [tuple(map(float, x)) for x in s], rms)


def min_radius_threshold(config: PipelineConfig | None = None):
    return DEFAULT_MIN_RADIUS if config is None else float(config.min_iris_radius)


def max_usable_distance(model: RadiusDistanceModel, config: PipelineConfig | None = None):
    return model.invert(min_radius_threshold(config))


# -- gaze ---------------------------------------------------------------------

def gaze_aperture_ratio(extents):
    """Mean Dy/Dx over eyes given as ``(dx, dy)`` pairs."""
    e = np.asarray(extents, dtype=np.float64).reshape(-1, 2)
    if len(e) == 0:
        raise InputError("need at least one eye extent")
    if np.any(e[:, 0] <= 0):
        raise InputError("horizontal iris extent Dx must be positive")
    return float(np.mean(e[:, 1] / e[:, 0]))


# -- distance intervals -----------------------------------------------------------

@dataclass(frozen=True)
class DistanceInterval:
    lower_cm: float
    upper_cm: float
    criterion: str = ""

    def __post_init__(self):
        if math.isnan(self.lower_cm) or math.isnan(self.upper_cm):
            raise InputError("interval bounds must not be NaN")
        if self.lower_cm > self.upper_cm:
            raise InputError(f"interval lower bound {self.lower_cm} exceeds upper bound {self.upper_cm}")

    def __str__(self):
        return f"[{_fmt_bound(self.lower_cm)}, {_fmt_bound(self.upper_cm)}] cm"


def _fmt_bound(v):
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return f"{v:g}"


# capture-distance limits found for the reference camera: iris radius stays
# above 45 px, SNR holds up, gaze towards the screen leaves enough iris visible
REFERENCE_CRITERIA = (
    DistanceInterval(-math.inf, 35.0, "iris radius >= 45 px"),
    DistanceInterval(-math.inf, 40.0, "snr before the fall-off"),
    DistanceInterval(25.0, math.inf, "gaze aperture"),
)


def optimal_interval(criteria):
    """Intersection of all intervals, or ``None`` when they are disjoint."""
    criteria = list(criteria)
    if not criteria:
        raise InputError("need at least one interval")
    lo = max(c.lower_cm for c in criteria)
    hi = min(c.upper_cm for c in criteria)
    if lo > hi:
        return None
    return DistanceInterval(lo, hi, "intersection")


def interval_report(criteria):
    criteria = list(criteria)
    lines = [f"{c.criterion or 'criterion'}: {c}" for c in criteria]
    best = optimal_interval(criteria)
    lines.append(f"optimal: {best}" if best is not None else "optimal: infeasible (intervals do not overlap)")
    return lines


# -- SNR vs distance ---------------------------------------------------------------

def snr_by_distance(manifest: DatasetManifest):
    """Rows ``(distance_cm, mean_snr, n)`` from each image's iris and sclera
    companion masks; rows without a distance are ignored."""
    groups = {}
    for row in manifest:
        if row.distance_cm is None:
            continue
        path = manifest.resolve(row)
        img = load_image(path)
        val = snr(img, load_mask(companion(path, "iris")), load_mask(companion(path, "sclera"))).value
        groups.setdefault(row.distance_cm, []).append(val)
    if not groups:
        raise InputError("manifest has no rows with distance_cm")
    return [(d, float(np.mean(v)), len(v)) for d, v in sorted(groups.items())]


def downscale_distance_corpus(manifest: DatasetManifest, out_dir, distances_cm, reference_cm, width=None):
    """Simulate capture distance by shrinking each image (and its masks) by
    ``reference_cm / d``; writes a manifest with the distance column."""
    from .data import ManifestRow, write_manifest
    from .imaging import save_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in distances_cm:
        if d <= 0:
            raise InputError("distances must be positive")
        s = reference_cm / d
        for row in manifest:
            src = manifest.resolve(row)
            img = load_image(src)
            h, w = img.shape
            size = (max(8, int(round(h * s))), max(8, int(round(w * s))))
            stem = f"{Path(row.path).stem}_d{d:g}"
            save_image(resize_bilinear(img, size), out / f"{stem}.pgm")
            for suffix in ("iris", "sclera"):
                m = companion(src, suffix)
                if m.exists():
                    save_image(resize_nearest(load_mask(m), size), out / f"{stem}_{suffix}.pgm")
            rows.append(ManifestRow(f"{stem}.pgm", row.subject_id, row.eye_side, float(d), row.session))
    m = DatasetManifest(rows, out)
    write_manifest(m, out / "manifest.csv")
    return m


# -- resolution sweep -----------------------------------------------------------------

@dataclass
class SweepRow:
    width_px: int
    mean_iris_radius_px: float
    eer: float
    d_prime: float
    usable: bool
    failures: int = 0
    images: int = 0

    def csv_row(self):
        return [self.width_px, f"{self.mean_iris_radius_px:.4f}", f"{self.eer:.6f}", f"{self.d_prime:.6f}",
                int(self.usable)]


def resolution_sweep(pipeline, manifest: DatasetManifest, widths, workers=1):
    """Downscale every image to each width, re-run the pipeline and score it.

    A step is unusable when more than half of the images fail or when too
    few comparisons survive to form both score distributions.
    """
    from .pipeline import evaluate

    widths = [int(w) for w in widths]
    if not widths:
        raise InputError("sweep needs at least one width")
    if any(w <= 0 for w in widths):
        raise InputError("sweep widths must be positive")
    if any(a <= b for a, b in zip(widths, widths[1:])):
        raise InputError(f"sweep widths must be strictly descending, got {widths}")
    out = []
    for w in widths:
        ev = evaluate(pipeline, manifest, width=w, workers=workers)
        n = len(manifest)
        radius = float(np.mean(list(ev.radii.values()))) if ev.radii else math.nan
        usable = len(ev.failures) <= MAX_FAILURE_FRACTION * n
        e = dp = math.nan
        try:
            e = ev.eer.eer
            dp = ev.d_prime.value
        except InputError:
            usable = False
        out.append(SweepRow(w, radius, e, dp, usable, len(ev.failures), n))
    return out


def write_sweep_csv(rows, path, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(r.csv_row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def sweep_is_monotone(rows, band=0.01):
    """EER non-increasing and d' non-decreasing as the radius grows.

    EER may rise by ``band`` (absolute) between neighbours; d' may drop by
    ``band`` relative to the smaller-radius value.  Only usable rows count.
    """
    ok = sorted((r for r in rows if r.usable), key=lambda r: r.mean_iris_radius_px)
    eer_ok = all(b.eer <= a.eer + band for a, b in zip(ok, ok[1:]))
    dp_ok = all(b.d_prime >= a.d_prime * (1 - band) for a, b in zip(ok, ok[1:]))
    return eer_ok and dp_ok
