"""Layers with hand-written reverse passes.

All arrays are float64 and batched along the first axis.  A layer caches
what its backward pass needs during ``forward`` and accumulates parameter
gradients into ``Parameter.grad`` during ``backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..channel import ConfigError

DEBUG = False


class NumericError(FloatingPointError):
    """A NaN or Inf showed up in a forward or backward pass."""


def check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {where}")
    return a


class Parameter:
    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


class Layer:
    """Base class.  Subclasses set ``self._params`` and ``self._buffers``."""

    def __init__(self):
        self._params: list[Parameter] = []
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def params(self) -> list[Parameter]:
        return list(self._params)

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self._buffers)

    def spec(self) -> LayerSpec:
        return LayerSpec(type(self).__name__.lower())

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def __call__(self, x):
        return self.forward(x)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


class Conv2d(Layer):
    """2-D cross-correlation with zero padding.  Input (N, C, H, W)."""

    def __init__(self, c_in: int, c_out: int, kernel=3, stride: int = 1, padding=None,
                 rng: np.random.Generator | None = None, name: str = "conv"):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if stride < 1:
            raise ConfigError("stride must be >= 1")
        if padding is None:
            padding = kh // 2
        self.c_in, self.c_out, self.kh, self.kw = c_in, c_out, kh, kw
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kh * kw
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, kh, kw), fan_in), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")
        self._params = [self.weight, self.bias]

    def spec(self):
        return LayerSpec("conv2d", {"c_in": self.c_in, "c_out": self.c_out, "kernel": [self.kh, self.kw],
                                    "stride": self.stride, "padding": self.padding})

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ConfigError(f"conv2d expects {self.c_in} input channels, got {c}")
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < self.kh or wp < self.kw:
            raise ConfigError(f"kernel {self.kh}x{self.kw} does not fit padded input {hp}x{wp}")
        return (self.c_out, (hp - self.kh) // self.stride + 1, (wp - self.kw) // self.stride + 1)

    def forward(self, x):
        n, c, h, w = x.shape
        _, ho, wo = self.output_shape((c, h, w))
        xp = _pad(x, self.padding)
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(2, 3))
        win = win[:, :, :: self.stride, :: self.stride][:, :, :ho, :wo]
        # (N, Ho, Wo, C, kh, kw) -> rows of the im2col matrix
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * self.kh * self.kw)
        wmat = self.weight.value.reshape(self.c_out, -1)
        out = cols @ wmat.T + self.bias.value
        self._cache = (x.shape, cols, ho, wo)
        out = out.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        return check_finite(np.ascontiguousarray(out), "conv2d.forward")

    def backward(self, dout):
        shape, cols, ho, wo = self._cache
        n, c, h, w = shape
        d = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        self.weight.grad += (d.T @ cols).reshape(self.weight.shape)
        self.bias.grad += d.sum(axis=0)
        dcols = (d @ self.weight.value.reshape(self.c_out, -1)).reshape(n, ho, wo, c, self.kh, self.kw)
        p, s = self.padding, self.stride
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return check_finite(np.ascontiguousarray(dx), "conv2d.backward")


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, name: str = "bn"):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self._params = [self.gamma, self.beta]
        self._buffers = {f"{name}.running_mean": np.zeros(channels), f"{name}.running_var": np.ones(channels)}
        self._name = name

    @property
    def running_mean(self):
        return self._buffers[f"{self._name}.running_mean"]

    @property
    def running_var(self):
        return self._buffers[f"{self._name}.running_var"]

    def spec(self):
        return LayerSpec("batch_norm", {"channels": self.channels, "eps": self.eps, "momentum": self.momentum})

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ConfigError(f"batch_norm expects {self.channels} channels, got {shape[0]}")
        return shape

    def forward(self, x):
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if not self.training:
            xh = (x - self.running_mean[None, :, None, None]) / np.sqrt(self.running_var[None, :, None, None] + self.eps)
            self._cache = None
            return g * xh + b
        if x.shape[0] < 2:
            raise ConfigError("batch_norm needs a batch of at least 2 in training mode")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.eps)
        xh = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xh, inv)
        mom = self.momentum
        self.running_mean[:] = (1 - mom) * self.running_mean + mom * mu
        self.running_var[:] = (1 - mom) * self.running_var + mom * var * m / max(m - 1, 1)
        return check_finite(g * xh + b, "batch_norm.forward")

    def backward(self, dout):
        if self._cache is None:
            raise ConfigError("backward through batch_norm requires a training-mode forward pass")
        xh, inv = self._cache
        self.gamma.grad += (dout * xh).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        dxh = dout * self.gamma.value[None, :, None, None]
        mean_dxh = dxh.mean(axis=(0, 2, 3), keepdims=True)
        mean_dxh_xh = (dxh * xh).mean(axis=(0, 2, 3), keepdims=True)
        dx = (dxh - mean_dxh - xh * mean_dxh_xh) * inv[None, :, None, None]
        return check_finite(dx, "batch_norm.backward")


class AvgPool2d(Layer):
    """Average pooling; a window wider than the map clamps to the map."""

    def __init__(self, window=2, stride=None, adaptive: bool = True):
        super().__init__()
        self.window = (window, window) if isinstance(window, int) else tuple(window)
        self.stride = self.window if stride is None else ((stride, stride) if isinstance(stride, int) else tuple(stride))
        self.adaptive = adaptive

    def spec(self):
        return LayerSpec("avg_pool", {"window": list(self.window), "stride": list(self.stride), "adaptive": self.adaptive})

    def _geometry(self, h, w):
        kh, kw = self.window
        sh, sw = self.stride
        if kh > h or kw > w:
            if not self.adaptive:
                raise ConfigError(f"pool window {kh}x{kw} larger than input {h}x{w}")
            if kh > h:
                kh, sh = h, h
            if kw > w:
                kw, sw = w, w
        return kh, kw, sh, sw, (h - kh) // sh + 1, (w - kw) // sw + 1

    def output_shape(self, shape):
        c, h, w = shape
        *_, ho, wo = self._geometry(h, w)
        return (c, ho, wo)

    def forward(self, x):
        n, c, h, w = x.shape
        kh, kw, sh, sw, ho, wo = self._geometry(h, w)
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        self._cache = (x.shape, kh, kw, sh, sw, ho, wo)
        return win.mean(axis=(4, 5))

    def backward(self, dout):
        (n, c, h, w), kh, kw, sh, sw, ho, wo = self._cache
        dx = np.zeros((n, c, h, w))
        share = dout / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += share
        return dx


def concat(tensors, axis: int = 1) -> np.ndarray:
    """Channel concatenation; non-channel extents must agree."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ConfigError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    return np.concatenate(tensors, axis=axis)


def concat_backward(dout: np.ndarray, sizes, axis: int = 1) -> list[np.ndarray]:
    cuts = np.cumsum(sizes)[:-1]
    return np.split(dout, cuts, axis=axis)


class Flatten(Layer):
    def spec(self):
        return LayerSpec("flatten")

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, name: str = "dense",
                 zero_init: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_out, n_in)) if zero_init else he_uniform(rng, (n_out, n_in), n_in)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias")
        self._params = [self.weight, self.bias]

    def spec(self):
        return LayerSpec("dense", {"n_in": self.n_in, "n_out": self.n_out})

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ConfigError(f"dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, x):
        self._x = x
        return check_finite(x @ self.weight.value.T + self.bias.value, "dense.forward")

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


class ReLU(Layer):
    def spec(self):
        return LayerSpec("relu")

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


def relu(x):
    return np.maximum(x, 0.0)


def softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is (K,) or (N, K); ``labels`` holds class indices.
    """
    single = logits.ndim == 1
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    y = np.atleast_1d(np.asarray(labels, dtype=int))
    n = z.shape[0]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = float(-logp[np.arange(n), y].mean())
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


def sgd_step(params, lr: float) -> None:
    """Plain SGD update followed by gradient reset."""
    for p in params:
        if lr:
            p.value -= lr * p.grad
        p.zero_grad()
