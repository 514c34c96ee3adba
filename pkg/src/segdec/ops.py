"""Differentiable primitives. Every op records itself on the active tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, GeometryError, Tensor, record

Pair = tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)
    bias: bool = True
    # transposed conv only: extra rows/cols appended bottom/right
    output_padding: Pair = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.kernel + self.stride + self.dilation) < 1:
            raise GeometryError(
                f"kernel/stride/dilation must be >= 1: k={self.kernel} s={self.stride} d={self.dilation}")
        if min(self.padding + self.output_padding) < 0:
            raise GeometryError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise GeometryError("channel counts must be >= 1")

    @property
    def extent(self) -> Pair:
        """Dilated kernel footprint d*(k-1)+1 per axis."""
        return tuple(d * (k - 1) + 1 for k, d in zip(self.kernel, self.dilation))

    def conv_out(self, h: int, w: int) -> Pair:
        out = []
        for axis, size, p, e, s in zip("hw", (h, w), self.padding, self.extent, self.stride):
            if e > size + 2 * p:
                raise GeometryError(
                    f"effective kernel {e} exceeds padded input {size + 2 * p} on axis {axis}")
            out.append((size + 2 * p - e) // s + 1)
        return tuple(out)

    def deconv_out(self, h: int, w: int) -> Pair:
        out = []
        for axis, size, p, e, s, op in zip("hw", (h, w), self.padding, self.extent, self.stride,
                                           self.output_padding):
            o = (size - 1) * s - 2 * p + e + op
            if o < 1:
                raise GeometryError(f"transposed conv output {o} < 1 on axis {axis}")
            out.append(o)
        return tuple(out)

    def weight_shape(self, transposed: bool = False) -> tuple[int, int, int, int]:
        if transposed:
            return (self.in_channels, self.out_channels, *self.kernel)
        return (self.out_channels, self.in_channels, *self.kernel)


def same_padding(k: int, d: int = 1) -> int:
    """p = d*(k-1)/2 for odd k, 0 for even k."""
    return d * (k - 1) // 2 if k % 2 else 0


def _check_weights(x: Tensor, w: Tensor, p: ConvParams, transposed: bool) -> None:
    expected = p.weight_shape(transposed)
    for axis, got, want in zip(("dim0", "dim1", "kh", "kw"), w.shape, expected):
        if got != want:
            raise DimensionError(f"weight axis {axis} is {got}, expected {want} (weights {w.shape})")
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"input channel axis is {x.shape[1]}, expected in_channels={p.in_channels}")


def _windows(xp: np.ndarray, kernel: Pair, out: Pair, stride: Pair, dilation: Pair) -> np.ndarray:
    """Strided view (n, c, kh, kw, oh, ow) over a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kernel[0], kernel[1], out[0], out[1]),
        strides=(sn, sc, sh * dilation[0], sw * dilation[1], sh * stride[0], sw * stride[1]),
        writeable=False,
    )


def _im2col(xp, kernel, out, stride, dilation) -> np.ndarray:
    n, c = xp.shape[:2]
    win = _windows(xp, kernel, out, stride, dilation)
    return win.reshape(n, c * kernel[0] * kernel[1], out[0] * out[1])


def _col2im(cols, channels, padded: Pair, kernel, out, stride, dilation) -> np.ndarray:
    n = cols.shape[0]
    kh, kw = kernel
    cols = cols.reshape(n, channels, kh, kw, out[0], out[1])
    dst = np.zeros((n, channels, *padded), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation[0]
        rows = slice(r0, r0 + stride[0] * (out[0] - 1) + 1, stride[0])
        for j in range(kw):
            c0 = j * dilation[1]
            dst[:, :, rows, c0:c0 + stride[1] * (out[1] - 1) + 1:stride[1]] += cols[:, :, i, j]
    return dst


def _pad(x: np.ndarray, padding: Pair) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _crop(x: np.ndarray, padding: Pair, size: Pair) -> np.ndarray:
    ph, pw = padding
    return x[:, :, ph:ph + size[0], pw:pw + size[1]]


def conv2d(x: Tensor, weights: Tensor, params: ConvParams, bias: Tensor | None = None) -> Tensor:
    _check_weights(x, weights, params, transposed=False)
    n, c, h, w = x.shape
    oh, ow = params.conv_out(h, w)
    k, s, d = params.kernel, params.stride, params.dilation
    xp = _pad(x.data, params.padding)
    cols = _im2col(xp, k, (oh, ow), s, d)
    wm = weights.data.reshape(params.out_channels, -1)
    y = np.matmul(wm, cols)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1)
    out = Tensor(y.reshape(n, params.out_channels, oh, ow))

    def backward(g):
        gm = g.reshape(n, params.out_channels, oh * ow)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
        gcols = np.matmul(wm.T, gm)
        gxp = _col2im(gcols, c, xp.shape[2:], k, (oh, ow), s, d)
        grads = [_crop(gxp, params.padding, (h, w)), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        return grads

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record("conv2d", inputs, out, backward)


def transposed_conv2d(x: Tensor, weights: Tensor, params: ConvParams, bias: Tensor | None = None) -> Tensor:
    """Adjoint of conv2d with the same geometry; weights are (in, out, kh, kw)."""
    _check_weights(x, weights, params, transposed=True)
    n, c, h, w = x.shape
    oh, ow = params.deconv_out(h, w)
    k, s, d = params.kernel, params.stride, params.dilation
    ph, pw = params.padding
    padded = (oh + 2 * ph, ow + 2 * pw)
    cout = params.out_channels
    wm = weights.data.reshape(c, cout * k[0] * k[1])
    xm = x.data.reshape(n, c, h * w)
    cols = np.matmul(wm.T, xm)
    y = _crop(_col2im(cols, cout, padded, k, (h, w), s, d), params.padding, (oh, ow))
    if bias is not None:
        y = y + bias.data
    out = Tensor(np.ascontiguousarray(y))

    def backward(g):
        gp = _pad(g, params.padding)
        gcols = _im2col(gp, k, (h, w), s, d)
        gx = np.matmul(wm, gcols).reshape(x.shape)
        gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weights.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        return grads

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record("transposed_conv2d", inputs, out, backward)


def maxpool2d(x: Tensor, window=(2, 2), stride=(2, 2)) -> Tensor:
    kh, kw = _pair(window)
    s = _pair(stride)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise GeometryError(f"pool window {(kh, kw)} exceeds input {(h, w)}")
    oh, ow = (h - kh) // s[0] + 1, (w - kw) // s[1] + 1
    win = _windows(x.data, (kh, kw), (oh, ow), s, (1, 1))
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, kh * kw)
    # argmax returns the first maximum: ties go to the first row-major index
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(y)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                hit = np.where(arg == i * kw + j, g, 0.0)
                gx[:, :, i:i + s[0] * (oh - 1) + 1:s[0], j:j + s[1] * (ow - 1) + 1:s[1]] += hit
        return [gx]

    return record("maxpool2d", (x,), out, backward)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros((1, channels, 1, 1), dtype), np.ones((1, channels, 1, 1), dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats | None = None,
               mode: str = "train", eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over (n, h, w) with biased variance.

    Train mode updates ``running_stats`` in place (EMA); infer mode reads them.
    """
    c = x.shape[1]
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t.numel() != c:
            raise DimensionError(f"{label} has {t.numel()} entries, input has {c} channels")
    g_ = gamma.data.reshape(1, c, 1, 1)
    b_ = beta.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    if mode == "train":
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if running_stats is not None:
            running_stats.mean[...] = (1 - momentum) * running_stats.mean + momentum * mu
            running_stats.var[...] = (1 - momentum) * running_stats.var + momentum * var
    elif mode == "infer":
        if running_stats is None:
            raise ValueError("infer mode needs running_stats")
        mu, var = running_stats.mean, running_stats.var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(g_ * xhat + b_)
    m = x.numel() // c

    def backward(g):
        gsum = g.sum(axis=axes, keepdims=True)
        gx_sum = (g * xhat).sum(axis=axes, keepdims=True)
        if mode == "train":
            gx = (g_ * inv / m) * (m * g - gsum - xhat * gx_sum)
        else:
            gx = g * g_ * inv
        return [gx, gx_sum.reshape(gamma.shape), gsum.reshape(beta.shape)]

    return record("batch_norm", (x, gamma, beta), out, backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    # subgradient at exactly 0 is 0
    return record("relu", (x,), out, lambda g: [np.where(x.data > 0, g, 0.0).astype(g.dtype, copy=False)])


def fuse_add(xs) -> Tensor:
    xs = list(xs)
    if len(xs) < 2:
        raise ValueError(f"fuse_add needs at least 2 tensors, got {len(xs)}")
    shapes = [t.shape for t in xs]
    if len(set(shapes)) != 1:
        raise DimensionError(f"fuse_add shape mismatch: {shapes}")
    acc = xs[0].data + xs[1].data
    for t in xs[2:]:
        acc = acc + t.data
    out = Tensor(acc)
    return record("fuse_add", xs, out, lambda g: [g] * len(xs))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype))
    return record("sum_all", (x,), out, lambda g: [np.broadcast_to(g, x.shape).copy()])


def weighted_sum(x: Tensor, r: np.ndarray) -> Tensor:
    """sum(x * r) for a constant array r; a scalar probe for vector-valued ops."""
    r = np.asarray(r, dtype=x.dtype)
    if r.shape != x.shape:
        raise DimensionError(f"probe shape {r.shape} != tensor shape {x.shape}")
    out = Tensor(np.full((1, 1, 1, 1), np.vdot(x.data, r), dtype=x.dtype))
    return record("weighted_sum", (x,), out, lambda g: [g.reshape(()) * r])


def square_sum(x: Tensor) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), np.vdot(x.data, x.data), dtype=x.dtype))
    return record("square_sum", (x,), out, lambda g: [2.0 * g.reshape(()) * x.data])
