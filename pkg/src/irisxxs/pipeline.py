"""End-to-end flow: face -> eye mask -> periocular crops -> iris mask ->
circles -> rubber sheet -> template, plus manifest-level evaluation."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import codec
from .data import DatasetManifest, PipelineConfig
from .errors import Degenerate, IrisError
from .eyes import crop_periocular, eye_boxes, find_eye_blobs
from .geometry import valid_pair
from .imaging import load_image, resize_bilinear
from .localize import Localization, extract_boundaries, localize_mixed
from .metrics import ScoreSet, d_prime, det_curve, eer, enumerate_comparisons, fnmr_at_fmr
from .unet import UNet, UnetXxsConfig, segment

DARK_LEVEL = 70


@dataclass
class EyeResult:
    side: str
    box: object
    crop: np.ndarray
    mask: np.ndarray | None = None
    localization: object = None
    sheet: object = None
    template: object = None
    error: str | None = None
    exc: Exception | None = field(default=None, repr=False)


@dataclass
class FrameResult:
    eye_mask: np.ndarray
    blobs: list
    eyes: list = field(default_factory=list)

    def eye(self, side):
        for e in self.eyes:
            if e.side == side:
                return e
        raise KeyError(side)


def dark_boundary_points(crop, mask):
    """Outer boundary of the largest dark blob inside the mask's bounding box."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return np.empty((0, 2))
    region = np.zeros_like(mask, dtype=bool)
    region[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
    dark = (np.asarray(crop) < DARK_LEVEL) & region
    labels, n = ndimage.label(dark)
    if n == 0:
        return np.empty((0, 2))
    sizes = ndimage.sum_labels(dark, labels, np.arange(1, n + 1))
    blob = labels == int(np.argmax(sizes)) + 1
    return extract_boundaries(blob).outer


class Pipeline:
    def __init__(self, eyes_model: UNet, iris_model: UNet, filters: codec.FilterBank,
                 config: PipelineConfig = PipelineConfig()):
        self.eyes_model = eyes_model
        self.iris_model = iris_model
        self.filters = filters
        self.config = config

    @classmethod
    def from_config(cls, cfg: PipelineConfig):
        cfg.require_weights()
        eyes = UNet(UnetXxsConfig.for_task("find_eyes", threshold=cfg.threshold)).load(cfg.find_eyes_weights)
        iris = UNet(UnetXxsConfig.for_task("segment_iris", threshold=cfg.threshold)).load(cfg.segment_iris_weights)
        bank = codec.load_filters(cfg.filters) if cfg.filters else codec.generate_fallback_filters(cfg.filter_seed)
        return cls(eyes, iris, bank, cfg)

    def find_eyes(self, image):
        mask = segment(self.eyes_model, image)
        blobs = find_eye_blobs(mask)
        return mask, blobs, eye_boxes(blobs, np.asarray(image).shape)

    def process_crop(self, crop, side="right", subject_id=""):
        res = EyeResult(side, None, crop)
        res.mask = segment(self.iris_model, crop)
        loc = localize_mixed(res.mask, dark_points=dark_boundary_points(crop, res.mask),
                             occlusion_ratio=self.config.occlusion_ratio)
        if not valid_pair(loc.pupil, loc.iris):
            raise Degenerate(f"pupil {loc.pupil} not inside iris {loc.iris}")
        res.localization = loc
        res.sheet = codec.normalize(crop, loc.pupil, loc.iris)
        res.sheet.valid &= codec.normalize_mask(res.mask, loc.pupil, loc.iris)
        res.template = codec.encode(res.sheet, self.filters, subject_id, side)
        return res

    def process(self, image, subject_id="", sides=("left", "right")):
        """Run the full chain; per-eye failures are recorded, not raised.

        Raises ``NotFound`` when fewer than two eyes are detected.
        """
        img = np.asarray(image)
        mask, blobs, boxes = self.find_eyes(img)
        frame = FrameResult(mask, blobs)
        for blob, box in zip(blobs, boxes):
            if blob.label not in sides:
                continue
            crop = crop_periocular(img, box)
            try:
                res = self.process_crop(crop, blob.label, subject_id)
            except IrisError as exc:
                res = EyeResult(blob.label, box, crop, error=str(exc), exc=exc)
            res.box = box
            frame.eyes.append(res)
        return frame


@dataclass
class Evaluation:
    scores: ScoreSet
    pairs: list  # (path_a, path_b, mated, score or nan)
    failures: dict  # path -> reason
    radii: dict  # path -> localized iris radius (image px)
    skipped_pairs: int = 0
    localizations: dict = field(default_factory=dict)  # path -> Localization in image coordinates

    def localization_rows(self):
        """``image_path, px, py, pr, ix, iy, ir, method, confidence`` per located eye."""
        rows = []
        for path, loc in self.localizations.items():
            rows.append([path, *(f"{v:.3f}" for v in loc.pupil.astuple()), *(f"{v:.3f}" for v in loc.iris.astuple()),
                         loc.method, f"{loc.confidence:.4f}"])
        return rows

    @property
    def eer(self):
        return eer(self.scores)

    @property
    def d_prime(self):
        return d_prime(self.scores)

    def report(self, fmr_targets=(0.10, 0.01, 0.001)):
        e = self.eer
        dp = self.d_prime
        lines = [f"mated_scores: {len(self.scores.mated)}",
                 f"non_mated_scores: {len(self.scores.non_mated)}",
                 f"failed_templates: {len(self.failures)}",
                 f"skipped_pairs: {self.skipped_pairs}",
                 f"d_prime: {'inf' if dp.infinite else f'{dp.value:.4f}'}",
                 f"eer: {e.eer:.6f}",
                 f"eer_threshold: {e.threshold:.6f}"]
        for op in fnmr_at_fmr(self.scores, fmr_targets):
            flag = f" ({op.flag})" if op.flag else ""
            lines.append(f"fnmr_at_fmr_{op.target:g}: {op.fnmr:.6f}{flag}")
        return lines

    def det(self):
        return det_curve(self.scores)


def extract_templates(pipeline, manifest: DatasetManifest, width=None, workers=1):
    """Template of each row's ``eye_side``; optionally downscale to ``width`` px first.

    Returns dicts keyed by row path: templates, iris radii, failure reasons
    and localizations (circles moved from crop to image coordinates).
    """

    def one(row):
        img = load_image(manifest.resolve(row))
        if width is not None and width != img.shape[1]:
            h = max(1, int(round(img.shape[0] * width / img.shape[1])))
            img = resize_bilinear(img, (h, width))
        try:
            frame = pipeline.process(img, row.subject_id, sides=(row.eye_side,))
            res = frame.eye(row.eye_side)
        except (IrisError, KeyError) as exc:
            return row.path, None, None, f"{type(exc).__name__}: {exc}"
        if res.template is None:
            return row.path, None, None, res.error
        loc = res.localization
        dx, dy = res.box.x0, res.box.y0
        return row.path, res.template, Localization(loc.pupil.shifted(dx, dy), loc.iris.shifted(dx, dy), loc.method,
                                                    loc.confidence), None

    rows = list(manifest)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, rows))
    else:
        results = [one(r) for r in rows]
    templates, radii, failures, locs = {}, {}, {}, {}
    for path, t, loc, err in results:
        if t is None:
            failures[path] = err
        else:
            templates[path] = t
            radii[path] = loc.iris.r
            locs[path] = loc
    return templates, radii, failures, locs


def score_pairs(templates, comparisons, max_shift=0):
    pairs, mated, non, skipped = [], [], [], 0
    if max_shift == 0 and templates:
        keys = list(templates)
        index = {k: i for i, k in enumerate(keys)}
        matrix = codec.hamming_matrix([templates[k] for k in keys])
    for a, b, is_mated in comparisons:
        if a not in templates or b not in templates:
            skipped += 1
            pairs.append((a, b, is_mated, math.nan))
            continue
        if max_shift == 0:
            s = matrix[index[a], index[b]]
        else:
            try:
                s = codec.hamming_distance(templates[a], templates[b], max_shift)
            except codec.UnusableTemplate:
                s = math.nan
        pairs.append((a, b, is_mated, s))
        if math.isnan(s):
            skipped += 1
        else:
            (mated if is_mated else non).append(s)
    return ScoreSet(mated, non), pairs, skipped


def evaluate(pipeline, manifest: DatasetManifest, width=None, workers=1, max_shift=None):
    """Templates for every row, all same-side comparisons, score sets.

    Comparisons touching a failed template (or with too little joint mask)
    are skipped and counted.
    """
    max_shift = pipeline.config.max_shift if max_shift is None else max_shift
    templates, radii, failures, locs = extract_templates(pipeline, manifest, width, workers)
    comps = enumerate_comparisons(list(manifest))
    scores, pairs, skipped = score_pairs(templates, comps, max_shift)
    return Evaluation(scores, pairs, failures, radii, skipped, locs)
