"""Dense NCHW tensor ops, layers and a reverse-mode tape.

Everything here is plain numpy.  Activations are ``(batch, channel, height,
width)`` arrays; float32 is the working dtype and float64 is used by the
gradient checks.  Convolutions are lowered to one matrix product over an
explicit im2col buffer, which keeps the summation order fixed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import Diverged, InputError, ShapeError, WeightFileError

DTYPE = np.float32

LAYER_KINDS = ("conv3x3", "conv1x1", "transpose_conv2x2", "maxpool2x2", "relu", "sigmoid", "concat")
_KERNEL = {"conv3x3": 3, "conv1x1": 1, "transpose_conv2x2": 2}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def kernel(self) -> int:
        return _KERNEL.get(self.kind, 0)

    @property
    def trainable(self) -> bool:
        return self.kind in _KERNEL

    def param_count(self) -> int:
        if not self.trainable:
            return 0
        k = self.kernel
        return k * k * self.in_channels * self.out_channels + (self.out_channels if self.has_bias else 0)


def _check4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (batch, channel, height, width), got shape {x.shape}")


def _im2col(x, k, padding):
    """(N,C,H,W) -> (C*k*k, N*Ho*Wo), rows ordered (c, i, j) like a flattened kernel."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, -1), (h, w)
    if padding == "same":
        p = k // 2
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho, wo = h, w
    else:
        ho, wo = h - k + 1, w - k + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + ho, j:j + wo].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, -1), (ho, wo)


def _col2im(dcols, xshape, k, padding):
    n, c, h, w = xshape
    if k == 1:
        return dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    if padding == "same":
        p = k // 2
        ho, wo = h, w
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    else:
        p = 0
        ho, wo = h - k + 1, w - k + 1
        dx = np.zeros(xshape, dtype=dcols.dtype)
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, i, j].transpose(1, 0, 2, 3)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dx)


def conv2d_forward(x, weights, bias=None, padding="same"):
    """2-D cross-correlation of ``x`` with ``weights`` of shape (out, in, k, k)."""
    out, cache = _conv_forward(x, weights, bias, padding)
    return out


def _conv_forward(x, weights, bias, padding):
    _check4(x)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3] or weights.shape[2] not in (1, 3):
        raise ShapeError(f"weights must be (out, in, k, k) with k in {{1, 3}}, got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match weights shape {weights.shape}: "
                         f"{x.shape[1]} channels vs {weights.shape[1]}")
    if padding not in ("same", "valid"):
        raise InputError(f"padding must be 'same' or 'valid', got {padding!r}")
    k = weights.shape[2]
    if padding == "valid" and (x.shape[2] < k or x.shape[3] < k):
        raise ShapeError(f"input shape {x.shape} smaller than kernel shape {weights.shape}")
    n = x.shape[0]
    o = weights.shape[0]
    cols, (ho, wo) = _im2col(x, k, padding)
    y = weights.reshape(o, -1) @ cols
    if bias is not None:
        y += bias.reshape(o, 1)
    y = np.ascontiguousarray(y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    return y, (cols, x.shape)


class Layer:
    """A node kind the tape knows how to differentiate."""

    kind = ""

    def __init__(self, name):
        self.name = name
        self.params = {}

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind)

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, cache, grad):
        """Return (input gradients tuple, {param name: gradient})."""
        raise NotImplementedError

    def __call__(self, *xs):
        return self.forward(*xs)[0]

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2d(Layer):
    def __init__(self, name, in_channels, out_channels, kernel=3, bias=True, padding="same"):
        super().__init__(name)
        if kernel not in (1, 3):
            raise InputError(f"conv kernel must be 1 or 3, got {kernel}")
        self.kind = f"conv{kernel}x{kernel}"
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.padding = padding
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel, kernel), dtype=DTYPE)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    @property
    def spec(self):
        return LayerSpec(self.kind, self.in_channels, self.out_channels, "bias" in self.params)

    def init(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        self.params["weight"][...] = he_uniform(rng, self.params["weight"].shape, fan_in)
        if "bias" in self.params:
            self.params["bias"][...] = 0

    def forward(self, x):
        return _conv_forward(x, self.params["weight"], self.params.get("bias"), self.padding)

    def backward(self, cache, grad):
        cols, xshape = cache
        w = self.params["weight"]
        o = w.shape[0]
        g = grad.transpose(1, 0, 2, 3).reshape(o, -1)
        grads = {"weight": (g @ cols.T).reshape(w.shape)}
        if "bias" in self.params:
            grads["bias"] = g.sum(axis=1)
        dx = _col2im(w.reshape(o, -1).T @ g, xshape, self.kernel, self.padding)
        return (dx,), grads


class TransposeConv2x2(Layer):
    """Stride-2 transposed convolution; weights are (in, out, 2, 2)."""

    kind = "transpose_conv2x2"

    def __init__(self, name, in_channels, out_channels, bias=True):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params["weight"] = np.zeros((in_channels, out_channels, 2, 2), dtype=DTYPE)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    @property
    def spec(self):
        return LayerSpec(self.kind, self.in_channels, self.out_channels, "bias" in self.params)

    def init(self, rng):
        # each output pixel sees one input pixel per channel
        self.params["weight"][...] = he_uniform(rng, self.params["weight"].shape, self.in_channels)
        if "bias" in self.params:
            self.params["bias"][...] = 0

    def forward(self, x):
        _check4(x)
        w = self.params["weight"]
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"input shape {x.shape} does not match weights shape {w.shape}")
        n, c, h, wd = x.shape
        o = w.shape[1]
        xm = x.transpose(1, 0, 2, 3).reshape(c, -1)
        t = w.reshape(c, o * 4).T @ xm  # (o*2*2, n*h*w)
        y = t.reshape(o, 2, 2, n, h, wd).transpose(3, 0, 4, 1, 5, 2).reshape(n, o, 2 * h, 2 * wd)
        if "bias" in self.params:
            y = y + self.params["bias"].reshape(1, o, 1, 1)
        return np.ascontiguousarray(y), (xm, x.shape)

    def backward(self, cache, grad):
        xm, (n, c, h, wd) = cache
        w = self.params["weight"]
        o = w.shape[1]
        dt = grad.reshape(n, o, h, 2, wd, 2).transpose(1, 3, 5, 0, 2, 4).reshape(o * 4, -1)
        grads = {"weight": (dt @ xm.T).T.reshape(w.shape)}
        if "bias" in self.params:
            grads["bias"] = grad.sum(axis=(0, 2, 3))
        dx = (w.reshape(c, o * 4) @ dt).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        return (np.ascontiguousarray(dx),), grads


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def forward(self, x):
        _check4(x)
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial size, got {x.shape}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, cache, grad):
        idx, (n, c, h, w) = cache
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(dwin, idx[..., None], grad[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        keep = x > 0
        return x * keep, keep

    def backward(self, keep, grad):
        return (grad * keep,), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = expit(x)
        return y, y

    def backward(self, y, grad):
        return (grad * y * (1 - y),), {}


class Concat(Layer):
    """Channel-axis concatenation (the U-Net skip join)."""

    kind = "concat"

    def forward(self, *xs):
        for x in xs[1:]:
            if x.shape[0] != xs[0].shape[0] or x.shape[2:] != xs[0].shape[2:]:
                raise ShapeError(f"cannot concatenate shapes {xs[0].shape} and {x.shape}")
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, sizes, grad):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=1)), {}


def upsample2x(x):
    """Nearest-neighbour 2x upsampling (NCHW)."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Var:
    __slots__ = ("data", "index")

    def __init__(self, data, index):
        self.data = data
        self.index = index

    @property
    def shape(self):
        return self.data.shape


class GradientTape:
    """Records layer applications so ``backward`` can replay them in reverse."""

    def __init__(self):
        self.records = []
        self._n = 0
        self._grads = None
        self.shapes = {}

    def watch(self, array) -> Var:
        v = Var(array, self._n)
        self.shapes[v.index] = array.shape
        self._n += 1
        return v

    def apply(self, layer, *inputs) -> Var:
        out, cache = layer.forward(*(v.data for v in inputs))
        v = Var(out, self._n)
        self.shapes[v.index] = out.shape
        self._n += 1
        self.records.append((layer, cache, tuple(i.index for i in inputs), v.index))
        return v

    def grad(self, var):
        if self._grads is None:
            raise InputError("backward has not been run on this tape")
        g = self._grads.get(var.index)
        return np.zeros_like(var.data) if g is None else g


def backward(tape, loss_grad, params=None):
    """Reverse-mode sweep over ``tape``; returns ``{"layer.param": grad}``.

    ``loss_grad`` is the cotangent of the last recorded output.  When
    ``params`` (a name -> array mapping) is given, every entry gets a
    gradient, zero for parameters that did not take part.
    """
    if not tape.records:
        raise InputError("backward called without a recorded forward pass")
    layer, cache, ins, out = tape.records[-1]
    loss_grad = np.asarray(loss_grad)
    if loss_grad.shape != tape.shapes[out]:
        raise ShapeError(f"loss_grad shape {loss_grad.shape} does not match output shape {tape.shapes[out]}")
    grads = {out: loss_grad}
    param_grads = {}
    for layer, cache, ins, out in reversed(tape.records):
        g = grads.pop(out, None)
        if g is None:
            continue
        in_grads, pg = layer.backward(cache, g)
        for name, value in pg.items():
            key = f"{layer.name}.{name}"
            param_grads[key] = param_grads[key] + value if key in param_grads else value
        for i, gi in zip(ins, in_grads):
            grads[i] = grads[i] + gi if i in grads else gi
    tape._grads = grads
    if params is not None:
        for key, value in params.items():
            if key not in param_grads:
                param_grads[key] = np.zeros_like(value)
    return param_grads


def bce_with_logits(logits, target):
    """Mean binary cross-entropy on logits; returns (loss, d loss / d logits)."""
    z = logits.astype(np.float64)
    t = target.astype(np.float64)
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
    grad = (expit(z) - t) / z.size
    return float(loss), grad.astype(logits.dtype)


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g``.  A non-finite gradient rejects the whole step."""
    if lr < 0:
        raise InputError(f"learning rate must be non-negative, got {lr}")
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {key} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise Diverged(f"non-finite gradient for {key}")
    if lr == 0:
        return params
    for key, p in params.items():
        g = grads.get(key)
        if g is not None:
            p -= (lr * g).astype(p.dtype)
    return params


# -- weight files -----------------------------------------------------------

WEIGHT_MAGIC = b"IRW1"


def save_weights(params, path):
    """Write ``{name: array}`` as an IRW1 file (values stored as float32)."""
    chunks = [WEIGHT_MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 0, a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, expected=None):
    """Read an IRW1 file.  ``expected`` (name -> array) enables shape checks."""
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"{path}: truncated weight file at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"{path}: layer name is not valid UTF-8") from None
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != 0:
            raise WeightFileError(f"{path}: unsupported dtype code {dtype} at layer {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(DTYPE)
    if pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - pos} trailing bytes after last layer")
    if expected is not None:
        for name, arr in expected.items():
            if name not in params:
                raise WeightFileError(f"{path}: missing layer {name}")
            if params[name].shape != arr.shape:
                raise WeightFileError(f"{path}: shape mismatch at layer {name}: "
                                      f"file {params[name].shape}, model {arr.shape}")
        extra = set(params) - set(expected)
        if extra:
            raise WeightFileError(f"{path}: unexpected layers {sorted(extra)}")
    return params
