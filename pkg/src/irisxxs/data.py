"""Dataset manifests, ``key = value`` config files and synthetic corpora on disk."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ManifestError
from .imaging import save_image
from .synth import SceneParams, generate_scene, sample_params

SIDES = ("left", "right")
MANIFEST_COLUMNS = ("path", "subject_id", "eye_side", "distance_cm", "session")
CONFIG_ENV = "IRIS_CONFIG"


@dataclass(frozen=True)
class ManifestRow:
    path: str
    subject_id: str
    eye_side: str
    distance_cm: float | None = None
    session: str | None = None


@dataclass
class DatasetManifest:
    rows: list
    base: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def resolve(self, row):
        p = Path(row.path)
        return p if p.is_absolute() else self.base / p

    def subjects(self):
        return sorted({r.subject_id for r in self.rows})

    def subset(self, subject_ids):
        keep = set(subject_ids)
        return DatasetManifest([r for r in self.rows if r.subject_id in keep], self.base)

    def split(self, seed, fractions=(0.6, 0.2, 0.2)):
        """Person-disjoint partitions sized by largest-remainder rounding."""
        ids = self.subjects()
        sizes = split_sizes(len(ids), fractions)
        order = np.random.default_rng(seed).permutation(len(ids))
        parts, start = [], 0
        for n in sizes:
            parts.append(self.subset([ids[i] for i in order[start:start + n]]))
            start += n
        return parts


def split_sizes(n, fractions):
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise InputError(f"split fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    rest = n - sizes.sum()
    for i in np.argsort(-(raw - sizes), kind="stable")[:rest]:
        sizes[i] += 1
    return sizes.tolist()


def _strip_comments(lines):
    return [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def parse_manifest(text, base=Path(".")):
    lines = _strip_comments(text.splitlines())
    if not lines:
        raise ManifestError("manifest is empty (a header row is mandatory)")
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip() for h in next(reader)]
    if header[:3] != ["path", "subject_id", "eye_side"]:
        raise ManifestError(f"manifest header must start with path,subject_id,eye_side; got {','.join(header)}")
    for extra in header[3:]:
        if extra not in MANIFEST_COLUMNS[3:]:
            raise ManifestError(f"unknown manifest column {extra!r}")
    rows, seen = [], set()
    for n, rec in enumerate(reader, start=2):
        if len(rec) != len(header):
            raise ManifestError(f"row {n}: expected {len(header)} fields, got {len(rec)}")
        d = dict(zip(header, (v.strip() for v in rec)))
        if not d["path"]:
            raise ManifestError(f"row {n}: empty path")
        if d["path"] in seen:
            raise ManifestError(f"row {n}: duplicate path {d['path']}")
        if d["eye_side"] not in SIDES:
            raise ManifestError(f"row {n}: unknown eye_side {d['eye_side']!r}")
        dist = None
        if d.get("distance_cm"):
            try:
                dist = float(d["distance_cm"])
            except ValueError:
                raise ManifestError(f"row {n}: distance_cm {d['distance_cm']!r} is not a number") from None
        seen.add(d["path"])
        rows.append(ManifestRow(d["path"], d["subject_id"], d["eye_side"], dist, d.get("session") or None))
    return DatasetManifest(rows, Path(base))


def load_manifest(path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{p}: cannot read manifest ({exc})") from None
    return parse_manifest(text, p.parent)


def write_manifest(manifest: DatasetManifest, path, comment=None):
    cols = ["path", "subject_id", "eye_side"]
    if any(r.distance_cm is not None for r in manifest.rows):
        cols.append("distance_cm")
    if any(r.session is not None for r in manifest.rows):
        cols.append("session")
    out = io.StringIO()
    if comment:
        out.write(f"# {comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(cols)
    for r in manifest.rows:
        w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])
    Path(path).write_text(out.getvalue(), encoding="utf-8")


# -- config -------------------------------------------------------------------

@dataclass
class PipelineConfig:
    find_eyes_weights: str | None = None
    segment_iris_weights: str | None = None
    filters: str | None = None  # filter file; None uses the seeded fallback bank
    filter_seed: int = 42
    threshold: float = 0.5
    max_shift: int = 0
    occlusion_ratio: float = 0.85
    min_iris_radius: float = 45.0
    match_threshold: float = 0.35
    seed: int = 42

    def require_weights(self):
        for name in ("find_eyes_weights", "segment_iris_weights"):
            p = getattr(self, name)
            if not p:
                raise ConfigError(f"config: {name} is not set")
            if not Path(p).is_file():
                raise ConfigError(f"config: {name} file {p} does not exist")
        if self.filters and not Path(self.filters).is_file():
            raise ConfigError(f"config: filter file {self.filters} does not exist")


_PATH_KEYS = {"find_eyes_weights", "segment_iris_weights", "filters"}


def parse_config(text, base=Path(".")):
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        if key in _PATH_KEYS:
            p = Path(value)
            values[key] = str(p if p.is_absolute() else Path(base) / p)
            continue
        try:
            values[key] = int(value) if types[key] == "int" else float(value)
        except ValueError:
            raise ConfigError(f"config line {n}: bad value {value!r} for {key}") from None
    return PipelineConfig(**values)


def load_config(path=None):
    """Read a config file; ``path`` falls back to $IRIS_CONFIG, then defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, p.parent)


def format_config(cfg: PipelineConfig):
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if v is not None:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- synthetic corpora ------------------------------------------------------------

GT_COLUMNS = ("path", "subject_id", "eye_side", "px", "py", "pr", "ix", "iy", "ir", "occlusion", "noise_sigma")


def scene_stem(identity, sample):
    return f"id{identity:04d}_s{sample:02d}"


def identity_seed(seed, identity):
    return seed * 100_003 + identity


def write_corpus(out_dir, identities, samples, params=SceneParams(), occlusion_max=0.0, seed=0,
                 eye_side="right", first_identity=0, radius_jitter=0.0):
    """Render ``identities x samples`` scenes with masks and CSV metadata.

    Writes ``<stem>.pgm`` (face), ``<stem>_eyes.pgm`` (find-eyes target),
    ``<stem>_iris.pgm`` (iris annulus target), ``<stem>_sclera.pgm``,
    ``manifest.csv`` and
    ``ground_truth.csv``.
    """
    if identities < 1 or samples < 1:
        raise InputError("identities and samples must both be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from None
    comment = f"seed={seed}"
    rows, gt = [], []
    for i in range(first_identity, first_identity + identities):
        for j in range(samples):
            ident = identity_seed(seed, i)
            sc = generate_scene(ident, j, sample_params(params, ident, j, occlusion_max, radius_jitter))
            stem = scene_stem(i, j)
            save_image(sc.image, out / f"{stem}.pgm", comment)
            save_image(sc.eye_mask, out / f"{stem}_eyes.pgm", comment)
            save_image(sc.iris_mask, out / f"{stem}_iris.pgm", comment)
            save_image(sc.sclera_mask, out / f"{stem}_sclera.pgm", comment)
            rows.append(ManifestRow(f"{stem}.pgm", f"S{i:04d}", eye_side, None, str(j)))
            for e in sc.eyes:
                gt.append([f"{stem}.pgm", f"S{i:04d}", e.side, *(round(v, 4) for v in e.pupil.astuple()),
                           *(round(v, 4) for v in e.iris.astuple()), round(e.occlusion, 4), sc.params.noise_sigma])
    manifest = DatasetManifest(rows, out)
    write_manifest(manifest, out / "manifest.csv", comment)
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GT_COLUMNS)
    w.writerows(gt)
    (out / "ground_truth.csv").write_text(buf.getvalue(), encoding="utf-8")
    return manifest


def companion(path, suffix):
    """``foo.pgm`` -> ``foo_<suffix>.pgm`` (mask files written next to images)."""
    p = Path(path)
    return p.with_name(f"{p.stem}_{suffix}{p.suffix}")
