"""Score-distribution and segmentation metrics.

Comparison scores are distances: a pair *matches* when its score is at or
below the decision threshold.
"""
from __future__ import annotations

import math
import platform
import time
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import InputError, ManifestError

IOU_EPS = 1e-7
DEFAULT_FMR_TARGETS = (0.10, 0.01, 0.001)


@dataclass
class ScoreSet:
    mated: np.ndarray
    non_mated: np.ndarray

    def __init__(self, mated, non_mated):
        self.mated = np.asarray(mated, dtype=np.float64).ravel()
        self.non_mated = np.asarray(non_mated, dtype=np.float64).ravel()

    def require(self, n=1):
        if len(self.mated) < n or len(self.non_mated) < n:
            raise InputError(f"need at least {n} mated and {n} non-mated scores, "
                             f"got {len(self.mated)} and {len(self.non_mated)}")


@dataclass
class DPrime:
    value: float
    infinite: bool = False

    def __float__(self):
        return self.value


@dataclass
class EERResult:
    eer: float
    threshold: float


@dataclass
class OperatingPoint:
    target: float
    fnmr: float
    threshold: float
    flag: str = ""  # "", "borderline" or "insufficient-data"


def enumerate_comparisons(rows):
    """All unordered same-side pairs as ``(path_a, path_b, mated)``.

    ``rows`` are objects with ``path``, ``subject_id`` and ``eye_side``.
    """
    seen = set()
    for r in rows:
        if r.path in seen:
            raise ManifestError(f"duplicate path {r.path}")
        seen.add(r.path)
    out = []
    for a, b in combinations(rows, 2):
        if a.eye_side != b.eye_side:
            continue
        out.append((a.path, b.path, a.subject_id == b.subject_id))
    return out


def d_prime(scores: ScoreSet) -> DPrime:
    scores.require(2)
    m1, m2 = scores.mated.mean(), scores.non_mated.mean()
    s1, s2 = scores.mated.std(ddof=1), scores.non_mated.std(ddof=1)
    spread = math.sqrt(0.5 * (s1 * s1 + s2 * s2))
    if spread == 0:
        return DPrime(0.0) if m1 == m2 else DPrime(math.inf, infinite=True)
    return DPrime(abs(m1 - m2) / spread)


def operating_points(scores: ScoreSet):
    """(thresholds, fmr, fnmr) over the sorted union of scores.

    The first entry is the reject-all point (threshold -inf, FMR 0, FNMR 1).
    """
    scores.require(1)
    gen = np.sort(scores.mated)
    imp = np.sort(scores.non_mated)
    t = np.unique(np.concatenate([gen, imp]))
    fmr = np.searchsorted(imp, t, side="right") / len(imp)
    fnmr = (len(gen) - np.searchsorted(gen, t, side="right")) / len(gen)
    return (np.concatenate([[-np.inf], t]), np.concatenate([[0.0], fmr]), np.concatenate([[1.0], fnmr]))


def _counts(scores: ScoreSet):
    """Integer operating points: thresholds with (#non-mated <= t, #mated > t),
    starting from the reject-all point."""
    scores.require(1)
    gen = np.sort(scores.mated)
    imp = np.sort(scores.non_mated)
    t = np.unique(np.concatenate([gen, imp]))
    fa = np.searchsorted(imp, t, side="right")
    fr = len(gen) - np.searchsorted(gen, t, side="right")
    return (np.concatenate([[-np.inf], t]), np.concatenate([[0], fa]).tolist(),
            np.concatenate([[len(gen)], fr]).tolist(), len(imp), len(gen))


def _lower_hull(x, y):
    """Lower convex hull of points sorted by x (exact for integer input)."""
    hull = []
    for i in range(len(x)):
        while len(hull) >= 2:
            j, k = hull[-2], hull[-1]
            if (x[k] - x[j]) * (y[i] - y[j]) - (y[k] - y[j]) * (x[i] - x[j]) <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def eer(scores: ScoreSet) -> EERResult:
    """Equal error rate by linear interpolation across the crossing.

    Operating points are taken at every distinct score; interpolation runs
    between the two neighbouring points of their lower convex hull that
    straddle FMR = FNMR (equivalently, chance-level mixing of two
    thresholds).  Rates are kept as integer counts until the final
    division, so the result is the correctly rounded exact value.
    """
    t, fa, fr, n_imp, n_gen = _counts(scores)
    # rates scaled to a common integer denominator n_imp * n_gen
    x = [a * n_gen for a in fa]
    y = [b * n_imp for b in fr]
    hull = _lower_hull(x, y)
    for i, j in zip(hull[:-1], hull[1:]):
        d1, d2 = y[i] - x[i], y[j] - x[j]
        if d1 >= 0 >= d2:
            den = d1 - d2
            if den == 0:  # both end points on the diagonal
                return EERResult(x[i] / (n_imp * n_gen), float(t[i]) if np.isfinite(t[i]) else float(t[j]))
            # crossing of the segment with FMR = FNMR, in units of 1/(n_imp*n_gen)
            e = (x[j] * y[i] - x[i] * y[j]) / (den * n_imp * n_gen)
            s = d1 / den
            lo = t[i] if np.isfinite(t[i]) else t[j]
            thr = lo + s * (t[j] - lo)
            return EERResult(e + 0.0, float(thr))
    raise AssertionError("hull never crosses the diagonal")  # pragma: no cover


def det_curve(scores: ScoreSet):
    """Rows ``(threshold, fmr, fnmr)`` in decreasing threshold order."""
    t, fmr, fnmr = operating_points(scores)
    return list(zip(t[::-1].tolist(), fmr[::-1].tolist(), fnmr[::-1].tolist()))


def fnmr_at_fmr(scores: ScoreSet, fmr_targets=DEFAULT_FMR_TARGETS):
    """FNMR at the most lenient threshold whose FMR stays within each target.

    Thresholds are placed on non-mated scores: the k-th smallest non-mated
    score with ``k = floor(target * N)``.  ``k == 1`` is flagged borderline;
    ``k == 0`` (fewer than 1/target non-mated scores) is flagged
    insufficient-data and the threshold falls just below every non-mated
    score.
    """
    scores.require(1)
    imp = np.sort(scores.non_mated)
    gen = np.sort(scores.mated)
    out = []
    for target in fmr_targets:
        if not 0 < target < 1:
            raise InputError(f"FMR target must lie in (0, 1), got {target}")
        k = int(math.floor(target * len(imp) + 1e-9))
        # ties: back off until FMR at the threshold is within target
        while k > 0 and np.searchsorted(imp, imp[k - 1], side="right") > k:
            k -= 1
        if k == 0:
            below = gen[gen < imp[0]]
            thr = float(below[-1]) if len(below) else -math.inf
            flag = "insufficient-data"
        else:
            thr = float(imp[k - 1])
            flag = "borderline" if k == 1 else ""
        fnmr = (len(gen) - np.searchsorted(gen, thr, side="right")) / len(gen)
        out.append(OperatingPoint(target, float(fnmr), thr, flag))
    return out


def iou(mask_a, mask_b):
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return float(np.logical_and(a, b).sum() / (np.logical_or(a, b).sum() + IOU_EPS))


@dataclass
class SNRResult:
    value: float
    infinite: bool = False


def snr(image, iris_mask, sclera_mask) -> SNRResult:
    img = np.asarray(image, dtype=np.float64)
    im = np.asarray(iris_mask, dtype=bool)
    sm = np.asarray(sclera_mask, dtype=bool)
    if im.shape != img.shape or sm.shape != img.shape:
        raise InputError("masks must match the image shape")
    if im.sum() < 1 or sm.sum() < 2:
        raise InputError("iris and sclera masks must select pixels (sclera at least two)")
    mi, ms = img[im].mean(), img[sm].mean()
    sd = img[sm].std(ddof=1)
    if sd == 0:
        return SNRResult(math.inf if mi != ms else 0.0, infinite=True)
    return SNRResult(abs(mi - ms) / sd)


# -- throughput -------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    stage: str
    iterations: int
    mean_s: float
    std_s: float
    hardware: str

    @property
    def fps(self):
        return 1.0 / self.mean_s

    def lines(self):
        return [f"stage: {self.stage}", f"hardware: {self.hardware}", f"iterations: {self.iterations}",
                f"mean_ms: {self.mean_s * 1e3:.3f}", f"std_ms: {self.std_s * 1e3:.3f}", f"fps: {self.fps:.2f}"]


def hardware_descriptor():
    return f"{platform.machine()} {platform.processor() or 'cpu'} python-{platform.python_version()} numpy-{np.__version__}"


def benchmark(fn, inputs, warmup=2, iterations=10, stage="custom"):
    """Time ``fn(x)`` per frame, cycling through ``inputs``."""
    if iterations < 10:
        raise InputError(f"benchmark needs at least 10 iterations, got {iterations}")
    if warmup < 2:
        raise InputError(f"benchmark needs at least 2 warm-up runs, got {warmup}")
    inputs = list(inputs)
    if not inputs:
        raise InputError("benchmark needs at least one input")
    for i in range(warmup):
        fn(inputs[i % len(inputs)])
    times = np.empty(iterations)
    for i in range(iterations):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        fn(x)
        times[i] = time.perf_counter() - t0
    return BenchmarkReport(stage, iterations, float(times.mean()), float(times.std(ddof=1)), hardware_descriptor())
