"""Task datasets for the two segmentation models and the training driver
used by the CLI."""
from __future__ import annotations

import csv
import io

import numpy as np

from .data import DatasetManifest, companion
from .errors import InputError
from .eyes import crop_periocular, eye_boxes, find_eye_blobs
from .imaging import augment_rotate, load_image, load_mask, resize_bilinear, resize_nearest
from .synth import natural_background
from .unet import TASK_INPUT, UnetXxsConfig, build_unet_xxs, train

TASK_MASK = {"find_eyes": "eyes", "segment_iris": "iris"}


def _to_input(image, mask, size):
    x = resize_bilinear(image, size) / 255.0
    y = resize_nearest(np.asarray(mask, dtype=bool), size)
    return x.astype(np.float32), y


def eye_crops(image, eye_mask, iris_mask, sides=("left", "right")):
    """Periocular crops (image, iris mask) placed from the ground-truth eye blobs."""
    blobs = find_eye_blobs(eye_mask)
    out = []
    for blob, box in zip(blobs, eye_boxes(blobs, image.shape)):
        if blob.label in sides:
            out.append((crop_periocular(image, box), crop_periocular(iris_mask, box)))
    return out


def task_pairs(manifest: DatasetManifest, task, both_eyes=True):
    """(images, masks) at the task's network size from a manifest whose
    images have ``_eyes`` (and for the iris task ``_iris``) companion masks.

    The iris task crops each eye with the box the ground-truth eye blobs
    give; ``both_eyes`` takes both crops per image, else the row's side.
    """
    if task not in TASK_INPUT:
        raise InputError(f"unknown task {task!r}; expected one of {sorted(TASK_INPUT)}")
    size = TASK_INPUT[task]
    xs, ys = [], []
    for row in manifest:
        path = manifest.resolve(row)
        img = load_image(path)
        eyes_path = companion(path, "eyes")
        if not eyes_path.exists():
            raise InputError(f"{path}: missing ground-truth mask {eyes_path.name} for task {task}")
        eyes = load_mask(eyes_path)
        if task == "find_eyes":
            x, y = _to_input(img, eyes, size)
            xs.append(x)
            ys.append(y)
            continue
        iris_path = companion(path, "iris")
        if not iris_path.exists():
            raise InputError(f"{path}: missing ground-truth mask {iris_path.name} for task {task}")
        sides = ("left", "right") if both_eyes else (row.eye_side,)
        for crop, m in eye_crops(img, eyes, load_mask(iris_path), sides):
            x, y = _to_input(crop, m, size)
            xs.append(x)
            ys.append(y)
    if not xs:
        raise InputError("manifest yielded no training pairs")
    return np.stack(xs), np.stack(ys)


def background_pairs(count, size, seed):
    """Eye-free clutter images with empty masks (negatives for find_eyes)."""
    h, w = size
    xs = [resize_bilinear(natural_background(seed * 7919 + i, (4 * w, 4 * h)), size) / 255.0 for i in range(count)]
    return np.asarray(xs, dtype=np.float32).reshape(count, h, w), np.zeros((count, h, w), dtype=bool)


def rotation_copies(images, masks, copies, max_angle, seed):
    """Originals followed by ``copies`` rotated versions of each pair,
    angles uniform in [-max_angle, max_angle]."""
    if copies < 0:
        raise InputError("copies must be >= 0")
    rng = np.random.default_rng(seed)
    xs, ys = [images], [masks]
    for _ in range(copies):
        angles = rng.uniform(-max_angle, max_angle, len(images))
        rot = [augment_rotate(x, y, a) for x, y, a in zip(images, masks, angles)]
        xs.append(np.stack([r[0] for r in rot]))
        ys.append(np.stack([r[1] for r in rot]))
    return np.concatenate(xs), np.concatenate(ys)


def flip_copies(images, masks):
    """Originals followed by their left-right mirror images."""
    return np.concatenate([images, images[:, :, ::-1]]), np.concatenate([masks, masks[:, :, ::-1]])


def format_log(log, seed=None):
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "val_iou", "seconds"])
    for e in log:
        w.writerow([e.epoch, f"{e.loss:.6f}", f"{e.val_iou:.6f}", f"{e.seconds:.3f}"])
    return buf.getvalue()


def train_task(task, manifest: DatasetManifest, epochs, lr, seed=0, val_fraction=0.2, negatives=0.1,
               rotations=0, max_angle=15.0, flips=False, batch_size=8, callback=None):
    """Person-disjoint train/val split of ``manifest``, then SGD training.

    Returns (model, epoch log).  ``negatives`` adds that fraction of
    eye-free backgrounds to the find_eyes data; ``rotations`` adds rotated
    copies of every training pair; ``flips`` adds mirrored copies.
    """
    if not 0 <= val_fraction < 1:
        raise InputError(f"val fraction must lie in [0, 1), got {val_fraction}")
    if len(manifest.subjects()) < 2 and val_fraction > 0:
        raise InputError("need at least two subjects for a person-disjoint validation split")
    if val_fraction > 0:
        train_m, val_m = manifest.split(seed, (1 - val_fraction, val_fraction))
    else:
        train_m, val_m = manifest, None
    x, y = task_pairs(train_m, task)
    if flips:
        x, y = flip_copies(x, y)
    size = TASK_INPUT[task]
    if task == "find_eyes" and negatives > 0:
        bx, by = background_pairs(max(1, int(round(negatives * len(x)))), size, seed)
        x, y = np.concatenate([x, bx]), np.concatenate([y, by])
    if rotations:
        x, y = rotation_copies(x, y, rotations, max_angle, seed)
    val = task_pairs(val_m, task) if val_m is not None and len(val_m) else None
    model = build_unet_xxs(UnetXxsConfig.for_task(task), seed=seed)
    log = train(model, x, y, epochs, lr, seed=seed, val=val, batch_size=batch_size, callback=callback)
    return model, log
