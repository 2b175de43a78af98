"""Layers with exact forward/backward rules.

Shape conventions (no batch axis; training loops over samples):
  conv3d: (channels, time, elevation, azimuth)
  conv1d: (channels, time)

Temporal convolutions are causal: the time axis is left-padded so the output
at frame t only sees inputs at frames <= t. Spatial axes use symmetric zero
padding that preserves their size.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

PRELU_INIT = 0.25


class Parameter:
    """A learnable array with a gradient slot of the same shape."""

    def __init__(self, value: np.ndarray, name: str):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Layer:
    """Base layer: parameters plus forward/backward/out_shape."""

    def params(self) -> list[Parameter]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _he_std(fan_in: int) -> float:
    # He init with the PReLU gain of the reference initialization
    return math.sqrt(2.0 / ((1.0 + PRELU_INIT**2) * fan_in))


class CausalConv3d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int, int],
                 rng: np.random.Generator, dtype=np.float32, name: str = "conv3d"):
        kt, kh, kw = kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("spatial kernel sizes must be odd to preserve shape")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = (kt, kh, kw)
        self.name = name
        std = _he_std(in_ch * kt * kh * kw)
        self.w = Parameter(rng.normal(0.0, std, (out_ch, in_ch, kt, kh, kw)).astype(dtype), f"{name}.w")
        self.b = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise ShapeError(f"{self.name}: expected (C, T, H, W), got {in_shape}")
        c, t, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        if t < 1 or h < 1 or w < 1:
            raise ShapeError(f"{self.name}: empty input {in_shape}")
        return (self.out_ch, t, h, w)

    def _pad(self, x):
        kt, kh, kw = self.kernel
        return np.pad(x, ((0, 0), (kt - 1, 0), ((kh - 1) // 2,) * 2, ((kw - 1) // 2,) * 2))

    def _cols(self, xp, t, h, w):
        win = sliding_window_view(xp, self.kernel, axis=(1, 2, 3))  # (C, T, H, W, kt, kh, kw)
        return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(self.in_ch * np.prod(self.kernel), t * h * w)

    def forward(self, x):
        self.out_shape(x.shape)
        _, t, h, w = x.shape
        xp = self._pad(x)
        self._xp = xp
        self._thw = (t, h, w)
        w2 = self.w.value.reshape(self.out_ch, -1)
        out = w2 @ self._cols(xp, t, h, w) + self.b.value[:, None]
        return out.reshape(self.out_ch, t, h, w)

    def backward(self, grad_out):
        t, h, w = self._thw
        kt, kh, kw = self.kernel
        d = grad_out.reshape(self.out_ch, -1)
        self.b.grad += d.sum(axis=1)
        cols = self._cols(self._xp, t, h, w)
        self.w.grad += (d @ cols.T).reshape(self.w.value.shape)
        gcols = (self.w.value.reshape(self.out_ch, -1).T @ d).reshape(
            self.in_ch, kt, kh, kw, t, h, w
        )
        gxp = np.zeros_like(self._xp)
        for a in range(kt):
            for i in range(kh):
                for j in range(kw):
                    gxp[:, a : a + t, i : i + h, j : j + w] += gcols[:, a, i, j]
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        return gxp[:, kt - 1 :, ph : ph + h, pw : pw + w]


class CausalConv1d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 dilation: int = 1, dtype=np.float32, name: str = "conv1d"):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.dilation = dilation
        self.name = name
        std = _he_std(in_ch * kernel)
        self.w = Parameter(rng.normal(0.0, std, (out_ch, in_ch, kernel)).astype(dtype), f"{name}.w")
        self.b = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"{self.name}: expected (C, T), got {in_shape}")
        c, t = in_shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        if t < 1:
            raise ShapeError(f"{self.name}: empty input")
        return (self.out_ch, t)

    def forward(self, x):
        self.out_shape(x.shape)
        t = x.shape[1]
        pad = (self.kernel - 1) * self.dilation
        xp = np.pad(x, ((0, 0), (pad, 0)))
        self._xp = xp
        self._t = t
        out = np.broadcast_to(self.b.value[:, None], (self.out_ch, t)).copy()
        for j in range(self.kernel):
            out += self.w.value[:, :, j] @ xp[:, j * self.dilation : j * self.dilation + t]
        return out

    def backward(self, grad_out):
        t = self._t
        self.b.grad += grad_out.sum(axis=1)
        gxp = np.zeros_like(self._xp)
        for j in range(self.kernel):
            seg = slice(j * self.dilation, j * self.dilation + t)
            self.w.grad[:, :, j] += grad_out @ self._xp[:, seg].T
            gxp[:, seg] += self.w.value[:, :, j].T @ grad_out
        pad = (self.kernel - 1) * self.dilation
        return gxp[:, pad:]


class PReLU(Layer):
    """y = x for x >= 0 else a*x, with one slope per channel or one shared."""

    def __init__(self, n_channels: int | None, dtype=np.float32, name: str = "prelu"):
        self.per_channel = n_channels is not None
        self.name = name
        shape = (n_channels,) if self.per_channel else ()
        self.a = Parameter(np.full(shape, PRELU_INIT, dtype=dtype), f"{name}.a")

    def params(self):
        return [self.a]

    def out_shape(self, in_shape):
        if self.per_channel and in_shape[0] != self.a.value.shape[0]:
            raise ShapeError(f"{self.name}: {self.a.value.shape[0]} slopes vs {in_shape[0]} channels")
        return in_shape

    def _slopes(self, ndim):
        if not self.per_channel:
            return self.a.value
        return self.a.value.reshape((-1,) + (1,) * (ndim - 1))

    def forward(self, x):
        self.out_shape(x.shape)
        self._neg = x < 0
        self._x = x
        return np.where(self._neg, self._slopes(x.ndim) * x, x)

    def backward(self, grad_out):
        masked = np.where(self._neg, grad_out * self._x, 0.0)
        if self.per_channel:
            self.a.grad += masked.reshape(masked.shape[0], -1).sum(axis=1)
        else:
            self.a.grad += masked.sum()
        return np.where(self._neg, self._slopes(grad_out.ndim) * grad_out, grad_out)


class MaxPoolAxis(Layer):
    """Non-overlapping max over one axis; never applied to the time axis."""

    def __init__(self, axis: int, size: int, name: str = "maxpool"):
        if size < 1:
            raise ShapeError("pool size must be >= 1")
        self.axis = axis
        self.size = size
        self.name = name

    def out_shape(self, in_shape):
        if self.axis >= len(in_shape):
            raise ShapeError(f"{self.name}: axis {self.axis} out of range for {in_shape}")
        if in_shape[self.axis] % self.size != 0:
            raise ShapeError(
                f"{self.name}: axis length {in_shape[self.axis]} not divisible by {self.size}"
            )
        out = list(in_shape)
        out[self.axis] //= self.size
        return tuple(out)

    def forward(self, x):
        self.out_shape(x.shape)
        if self.size == 1:
            self._identity = True
            return x
        self._identity = False
        moved = np.moveaxis(x, self.axis, -1)
        self._moved_shape = moved.shape
        grouped = moved.reshape(moved.shape[:-1] + (moved.shape[-1] // self.size, self.size))
        self._argmax = grouped.argmax(axis=-1)
        out = np.take_along_axis(grouped, self._argmax[..., None], axis=-1)[..., 0]
        return np.moveaxis(out, -1, self.axis)

    def backward(self, grad_out):
        if self._identity:
            return grad_out
        gmoved = np.moveaxis(grad_out, self.axis, -1)
        grouped = np.zeros(gmoved.shape[:-1] + (gmoved.shape[-1], self.size), dtype=grad_out.dtype)
        np.put_along_axis(grouped, self._argmax[..., None], gmoved[..., None], axis=-1)
        return np.moveaxis(grouped.reshape(self._moved_shape), -1, self.axis)


class Tanh(Layer):
    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad_out):
        return grad_out * (1.0 - self._y**2)


def euclidean_distance_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over frames of the Euclidean distance between 3-vector columns.

    Returns (loss, d loss / d pred). The gradient at exactly zero distance is
    defined as 0.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    norms = np.linalg.norm(diff, axis=0)
    t = pred.shape[1]
    loss = float(norms.mean())
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where(norms > 0, diff / (safe * t), 0.0)
    return loss, grad.astype(pred.dtype)
