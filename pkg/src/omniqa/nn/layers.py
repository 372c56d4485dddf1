"""Dense/conv layers with exact gradients, on plain numpy arrays.

Data layout is (N, C, H, W) for feature maps and (N, F) for vectors.
Every layer caches what its backward pass needs during forward; backward
accumulates parameter gradients into Param.grad and returns the gradient
with respect to its input.  Angles of attack are deliberately boring:
im2col + GEMM for conv, window gather + argmax scatter for pooling.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit


class NetworkError(ValueError):
    """Layer construction or shape-composition failure."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


# Debug hook: when enabled, every layer output is scanned for NaN/Inf and
# the first offending layer is named.  Off by default (it costs a pass over
# each activation).
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class Param:
    """A trainable tensor and its gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class Layer:
    """Base layer: no parameters, identity buffers."""

    name = "layer"

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """State that persists but is not trained (e.g. running statistics)."""
        return {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape given per-sample input shape."""
        raise NotImplementedError


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for ceil(size / stride) output."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return out, before, total - before


def _gather_windows(x_pad: np.ndarray, kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, k, k, OH, OW) view-copies of every sliding window."""
    n, c = x_pad.shape[:2]
    cols = np.empty((n, c, kernel, kernel, oh, ow), dtype=x_pad.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, :, ki, kj] = x_pad[:, :, ki:ki + stride * oh:stride,
                                       kj:kj + stride * ow:stride]
    return cols


def _scatter_windows(gcols: np.ndarray, pad_shape: tuple[int, ...], kernel: int, stride: int) -> np.ndarray:
    """Adjoint of _gather_windows: accumulate window gradients onto the padded grid."""
    gpad = np.zeros(pad_shape, dtype=gcols.dtype)
    oh, ow = gcols.shape[-2:]
    for ki in range(kernel):
        for kj in range(kernel):
            gpad[:, :, ki:ki + stride * oh:stride,
                 kj:kj + stride * ow:stride] += gcols[:, :, ki, kj]
    return gpad


class Conv2d(Layer):
    """k x k cross-correlation, zero same-padding, out = ceil(in / stride)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        if kernel % 2 == 0:
            raise NetworkError(f"{name}: kernel size must be odd, got {kernel}")
        if stride < 1:
            raise NetworkError(f"{name}: stride must be >= 1, got {stride}")
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride = kernel, stride
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        w = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel))
        self.weight = Param(f"{name}.weight", w.astype(dtype))
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in:
            raise NetworkError(f"{self.name}: expected {self.c_in} input channels, got {c}")
        oh, _, _ = _same_pad(h, self.kernel, self.stride)
        ow, _, _ = _same_pad(w, self.kernel, self.stride)
        return (self.c_out, oh, ow)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise NetworkError(f"{self.name}: expected {self.c_in} input channels, got {c}")
        oh, pt, pb = _same_pad(h, self.kernel, self.stride)
        ow, pl, pr = _same_pad(w, self.kernel, self.stride)
        x_pad = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        cols = _gather_windows(x_pad, self.kernel, self.stride, oh, ow)
        out = np.tensordot(self.weight.value, cols, axes=([1, 2, 3], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        out += self.bias.value[None, :, None, None]
        self._cache = (cols, x_pad.shape, (pt, pl), (h, w))
        return out

    def backward(self, gout):
        cols, pad_shape, (pt, pl), (h, w) = self._cache
        self.bias.grad += gout.sum(axis=(0, 2, 3))
        self.weight.grad += np.tensordot(gout, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(self.weight.value, gout, axes=([0], [1]))
        gcols = np.moveaxis(gcols, 3, 0)  # (N, C, k, k, OH, OW)
        gpad = _scatter_windows(gcols, pad_shape, self.kernel, self.stride)
        return gpad[:, :, pt:pt + h, pl:pl + w]


class MaxPool2d(Layer):
    """Window max with ceil(in / stride) output; gradient routes to the argmax."""

    def __init__(self, window: int, stride: int | None = None, name: str = "maxpool"):
        if window < 1:
            raise NetworkError(f"{name}: window must be >= 1")
        self.name = name
        self.window = window
        self.stride = stride if stride is not None else window
        self._cache = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.window > h or self.window > w:
            raise NetworkError(f"{self.name}: window {self.window} exceeds input {h}x{w}")
        oh, _, _ = _same_pad(h, self.window, self.stride)
        ow, _, _ = _same_pad(w, self.window, self.stride)
        return (c, oh, ow)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        oh, pt, pb = _same_pad(h, self.window, self.stride)
        ow, pl, pr = _same_pad(w, self.window, self.stride)
        x_pad = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                       constant_values=-np.inf)
        cols = _gather_windows(x_pad, self.window, self.stride, oh, ow)
        flat = cols.reshape(n, c, self.window * self.window, oh, ow)
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        self._cache = (arg, x_pad.shape, (pt, pl), (h, w), (oh, ow))
        return out

    def backward(self, gout):
        arg, pad_shape, (pt, pl), (h, w), (oh, ow) = self._cache
        n, c = gout.shape[:2]
        gflat = np.zeros((n, c, self.window * self.window, oh, ow), dtype=gout.dtype)
        np.put_along_axis(gflat, arg[:, :, None], gout[:, :, None], axis=2)
        gcols = gflat.reshape(n, c, self.window, self.window, oh, ow)
        gpad = _scatter_windows(gcols, pad_shape, self.window, self.stride)
        return gpad[:, :, pt:pt + h, pl:pl + w]


class BatchNorm(Layer):
    """Batch normalization over (N,) or (N, H, W) per channel/feature.

    Train mode normalizes by batch statistics and blends them into the
    running estimates; eval mode uses the running estimates.  Needs at
    least two contributing elements per channel in train mode.
    """

    def __init__(self, channels: int, dtype=np.float32, name: str = "bn",
                 eps: float = 1e-5, momentum: float = 0.9):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def output_shape(self, in_shape):
        c = in_shape[0] if len(in_shape) == 3 else in_shape[-1]
        if c != self.channels:
            raise NetworkError(f"{self.name}: expected {self.channels} channels, got {c}")
        return in_shape

    def _axes(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        if x.ndim == 2:
            return (0,), (1, self.channels)
        raise NetworkError(f"{self.name}: unsupported input rank {x.ndim}")

    def forward(self, x, train=False):
        axes, bshape = self._axes(x)
        g = self.gamma.value.reshape(bshape)
        b = self.beta.value.reshape(bshape)
        if train:
            m = x.size // self.channels
            if m < 2:
                raise NetworkError(
                    f"{self.name}: batch of {m} cannot be normalized in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.running_mean[...] = mom * self.running_mean + (1 - mom) * mean
            self.running_var[...] = mom * self.running_var + (1 - mom) * var
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var.reshape(bshape) + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std
        self._cache = (xhat, inv_std, g, axes, bshape, train, x.size // self.channels)
        return g * xhat + b

    def backward(self, gout):
        xhat, inv_std, g, axes, bshape, train, m = self._cache
        self.gamma.grad += (gout * xhat).sum(axis=axes)
        self.beta.grad += gout.sum(axis=axes)
        gxhat = gout * g
        if not train:
            return gxhat * inv_std
        # Batch statistics depend on x: the full train-mode Jacobian.
        sum_g = gxhat.sum(axis=axes).reshape(bshape)
        sum_gx = (gxhat * xhat).sum(axis=axes).reshape(bshape)
        return inv_std / m * (m * gxhat - sum_g - xhat * sum_gx)


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype)

    def backward(self, gout):
        return np.where(self._mask, gout, 0.0).astype(gout.dtype)

    def output_shape(self, in_shape):
        return in_shape


class Softplus(Layer):
    """log(1 + exp(x)), computed as x + log1p(exp(-x)) when x is large."""

    name = "softplus"

    def forward(self, x, train=False):
        out = np.where(x > 20.0, x + np.log1p(np.exp(-np.clip(x, 20.0, None))),
                       np.log1p(np.exp(np.clip(x, None, 20.0))))
        self._sig = expit(x)
        return out.astype(x.dtype)

    def backward(self, gout):
        return (gout * self._sig).astype(gout.dtype)

    def output_shape(self, in_shape):
        return in_shape


class Dense(Layer):
    """Affine map on (N, F_in) -> (N, F_out)."""

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "dense"):
        self.name = name
        self.f_in, self.f_out = f_in, f_out
        std = math.sqrt(2.0 / f_in)
        self.weight = Param(f"{name}.weight",
                            rng.normal(0.0, std, size=(f_in, f_out)).astype(dtype))
        self.bias = Param(f"{name}.bias", np.zeros(f_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.f_in:
            raise NetworkError(f"{self.name}: expected ({self.f_in},) input, got {in_shape}")
        return (self.f_out,)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.f_in:
            raise NetworkError(f"{self.name}: expected (N, {self.f_in}) input, got {x.shape}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, gout):
        self.weight.grad += self._x.T @ gout
        self.bias.grad += gout.sum(axis=0)
        return gout @ self.weight.value.T


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        return gout.reshape(self._shape)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class GlobalMaxPool(Layer):
    """Max over all spatial positions: (N, C, H, W) -> (N, C)."""

    name = "global_maxpool"

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        self._arg = flat.argmax(axis=2)
        self._shape = x.shape
        return np.take_along_axis(flat, self._arg[:, :, None], axis=2)[:, :, 0]

    def backward(self, gout):
        n, c, h, w = self._shape
        gflat = np.zeros((n, c, h * w), dtype=gout.dtype)
        np.put_along_axis(gflat, self._arg[:, :, None], gout[:, :, None], axis=2)
        return gflat.reshape(self._shape)

    def output_shape(self, in_shape):
        return (in_shape[0],)


class GlobalAvgPool(Layer):
    """Mean over all spatial positions: (N, C, H, W) -> (N, C)."""

    name = "global_avgpool"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, gout):
        n, c, h, w = self._shape
        return np.broadcast_to(gout[:, :, None, None] / (h * w), self._shape).astype(gout.dtype)

    def output_shape(self, in_shape):
        return (in_shape[0],)
