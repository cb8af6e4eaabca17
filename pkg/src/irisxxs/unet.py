"""UNet_xxs: a two-level U-Net small enough for single-board computers.

Default widths (depth 2, 8 base channels doubling per level, biased 3x3
convs, 1x1 head) give 29,321 trainable values.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import Diverged, InputError
from .imaging import resize_bilinear, resize_nearest, to_gray
from .metrics import iou
from .tensor import (Concat, Conv2d, GradientTape, MaxPool2x2, ReLU, Sigmoid, TransposeConv2x2, backward,
                     bce_with_logits, load_weights, save_weights)

PARAM_BAND = (25_000, 31_000)
TASK_INPUT = {"find_eyes": (96, 160), "segment_iris": (96, 128)}


@dataclass(frozen=True)
class UnetXxsConfig:
    input_size: tuple = (96, 128)  # (height, width)
    base_channels: int = 8
    depth: int = 2
    threshold: float = 0.5
    task: str = "segment_iris"

    @classmethod
    def for_task(cls, task, **kw):
        if task not in TASK_INPUT:
            raise InputError(f"unknown task {task!r}; expected one of {sorted(TASK_INPUT)}")
        return cls(input_size=TASK_INPUT[task], task=task, **kw)

    def validate(self):
        if self.depth < 1:
            raise InputError(f"depth must be >= 1 (an encoder is required), got {self.depth}")
        if self.base_channels < 1:
            raise InputError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0 < self.threshold < 1:
            raise InputError(f"threshold must lie in (0, 1), got {self.threshold}")
        div = 2 ** self.depth
        h, w = self.input_size
        if h % div or w % div:
            raise InputError(f"input size {h}x{w} must be divisible by {div} for depth {self.depth}")


class UNet:
    """Encoder of ``depth`` conv-conv-pool stages, bottleneck, mirrored
    decoder with transpose-conv upsampling and skip concatenation, 1x1 head."""

    def __init__(self, config: UnetXxsConfig, seed=42):
        config.validate()
        self.config = config
        self.layers = {}
        relu = ReLU("relu")
        self._relu, self._pool, self._cat, self._sig = relu, MaxPool2x2("pool"), Concat("cat"), Sigmoid("sigmoid")
        c_in, c = 1, config.base_channels
        for i in range(config.depth):
            self._add(Conv2d(f"enc{i}.conv1", c_in, c))
            self._add(Conv2d(f"enc{i}.conv2", c, c))
            c_in, c = c, c * 2
        self._add(Conv2d("mid.conv1", c_in, c))
        self._add(Conv2d("mid.conv2", c, c))
        for i in reversed(range(config.depth)):
            skip = config.base_channels * 2 ** i
            self._add(TransposeConv2x2(f"dec{i}.up", c, skip))
            self._add(Conv2d(f"dec{i}.conv1", 2 * skip, skip))
            self._add(Conv2d(f"dec{i}.conv2", skip, skip))
            c = skip
        self._add(Conv2d("head", c, 1, kernel=1))
        self.init(seed)

    def _add(self, layer):
        self.layers[layer.name] = layer

    def init(self, seed=42):
        rng = np.random.default_rng(seed)
        for layer in self.layers.values():
            layer.init(rng)

    def parameters(self):
        return {f"{name}.{p}": arr for name, layer in self.layers.items() for p, arr in layer.params.items()}

    def load_state(self, params):
        own = self.parameters()
        for k, v in params.items():
            own[k][...] = v

    def astype(self, dtype):
        for layer in self.layers.values():
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        return self

    @property
    def param_count(self):
        return sum(layer.spec.param_count() for layer in self.layers.values())

    def layer_specs(self):
        return [(name, layer.spec) for name, layer in self.layers.items()]

    def forward(self, x, tape=None, logits=False):
        """``x`` is (N, 1, H, W) in [0, 1]; returns probabilities (or logits)."""
        tape = tape or GradientTape()
        v = tape.watch(np.asarray(x, dtype=self.layers["head"].params["weight"].dtype))
        self._input = v
        L = self.layers
        skips = []
        for i in range(self.config.depth):
            v = tape.apply(self._relu, tape.apply(L[f"enc{i}.conv1"], v))
            v = tape.apply(self._relu, tape.apply(L[f"enc{i}.conv2"], v))
            skips.append(v)
            v = tape.apply(self._pool, v)
        v = tape.apply(self._relu, tape.apply(L["mid.conv1"], v))
        v = tape.apply(self._relu, tape.apply(L["mid.conv2"], v))
        for i in reversed(range(self.config.depth)):
            v = tape.apply(L[f"dec{i}.up"], v)
            v = tape.apply(self._cat, skips[i], v)
            v = tape.apply(self._relu, tape.apply(L[f"dec{i}.conv1"], v))
            v = tape.apply(self._relu, tape.apply(L[f"dec{i}.conv2"], v))
        v = tape.apply(L["head"], v)
        if not logits:
            v = tape.apply(self._sig, v)
        return v.data

    def save(self, path):
        save_weights(self.parameters(), path)

    def load(self, path):
        self.load_state(load_weights(path, self.parameters()))
        return self


def build_unet_xxs(config: UnetXxsConfig = UnetXxsConfig(), seed=42) -> UNet:
    """Build and check the parameter budget of the small network."""
    model = UNet(config, seed)
    lo, hi = PARAM_BAND
    if not lo <= model.param_count <= hi:
        raise InputError(f"{model.param_count} parameters is outside the UNet_xxs band [{lo}, {hi}]")
    return model


def build_control_net(config: UnetXxsConfig, factor=2, seed=42) -> UNet:
    """Same topology with ``factor`` times the channel widths (about
    ``factor**2`` times the parameters); the speed baseline."""
    return UNet(replace(config, base_channels=config.base_channels * factor), seed)


def model_info(model: UNet):
    """Layer table lines followed by the exact total."""
    lines = [f"{'layer':<14}{'kind':<20}{'in':>5}{'out':>6}{'params':>10}"]
    for name, spec in model.layer_specs():
        lines.append(f"{name:<14}{spec.kind:<20}{spec.in_channels:>5}{spec.out_channels:>6}{spec.param_count():>10,}")
    lines.append(f"total trainable parameters: {model.param_count:,}")
    return lines


def prepare_input(image, size):
    """Grayscale, resize to ``size`` (bilinear) and scale to [0, 1]."""
    g = to_gray(image)
    if g.size == 0:
        raise InputError("cannot segment an empty image")
    return resize_bilinear(g, size) / 255.0


def predict_prob(model, image):
    x = prepare_input(image, model.config.input_size)
    return model.forward(x[None, None])[0, 0]


def segment(model, image, threshold=None):
    """Binary mask at the image's own resolution."""
    img = np.asarray(image)
    if img.size == 0:
        raise InputError("cannot segment an empty image")
    t = model.config.threshold if threshold is None else threshold
    prob = predict_prob(model, img)
    return resize_nearest(prob > t, img.shape[:2])


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_iou: float
    seconds: float


def _batch_iou(model, xs, ys, threshold, batch=16):
    scores = []
    for i in range(0, len(xs), batch):
        prob = model.forward(xs[i:i + batch, None])[:, 0]
        for p, y in zip(prob, ys[i:i + batch]):
            scores.append(iou(p > threshold, y))
    return float(np.mean(scores))


def train(model, images, masks, epochs, lr, seed=0, val=None, batch_size=8, momentum=0.9,
          callback=None):
    """Mini-batch SGD (heavy-ball momentum) on binary cross-entropy.

    ``images``/``masks`` are already at the network input size, images in
    [0, 1].  ``val`` is an optional (images, masks) pair; without it the
    IoU column is measured on the training set.  Returns the epoch log.
    """
    xs = np.asarray(images, dtype=np.float32)
    ys = np.asarray(masks, dtype=np.float32)
    if len(xs) == 0:
        raise InputError("training set is empty")
    if xs.shape[1:] != tuple(model.config.input_size) or ys.shape != xs.shape:
        raise InputError(f"training pairs must be {model.config.input_size}, got {xs.shape[1:]} / {ys.shape[1:]}")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    log = []
    vx, vy = (xs, ys) if val is None else (np.asarray(val[0], np.float32), np.asarray(val[1], bool))
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(xs))
        total = 0.0
        for s in range(0, len(xs), batch_size):
            idx = order[s:s + batch_size]
            tape = GradientTape()
            z = model.forward(xs[idx, None], tape=tape, logits=True)
            loss, g = bce_with_logits(z, ys[idx, None])
            if not np.isfinite(loss):
                raise Diverged(f"diverged at epoch {epoch}", epoch)
            grads = backward(tape, g, params)
            for k, p in params.items():
                gk = grads[k]
                if not np.all(np.isfinite(gk)):
                    raise Diverged(f"diverged at epoch {epoch}", epoch)
                velocity[k] *= momentum
                velocity[k] += gk
                p -= lr * velocity[k]
            total += loss * len(idx)
        vi = _batch_iou(model, vx, vy > 0.5, model.config.threshold)
        log.append(EpochLog(epoch, total / len(xs), vi, time.perf_counter() - t0))
        if callback is not None:
            callback(log[-1])
    return log
