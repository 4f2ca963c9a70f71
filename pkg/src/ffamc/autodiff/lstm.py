"""Stacked LSTM with backpropagation through time."""

from __future__ import annotations

import math

import numpy as np

from ..channel import ConfigError
from .layers import Layer, LayerSpec, Parameter, check_finite


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_cell(x, h_prev, c_prev, weight, bias):
    """Single step.  ``weight`` is (4H, D + H), gate blocks ordered f, i, g, o.

    Returns ``(h, c, cache)``.
    """
    hdim = h_prev.shape[-1]
    if weight.shape != (4 * hdim, x.shape[-1] + hdim) or bias.shape != (4 * hdim,):
        raise ConfigError(
            f"lstm weight {weight.shape} / bias {bias.shape} do not match input {x.shape[-1]} and hidden {hdim}"
        )
    xh = np.concatenate([x, h_prev], axis=-1)
    z = xh @ weight.T + bias
    f = sigmoid(z[..., :hdim])
    i = sigmoid(z[..., hdim : 2 * hdim])
    g = np.tanh(z[..., 2 * hdim : 3 * hdim])
    o = sigmoid(z[..., 3 * hdim :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, f, i, g, o, c_prev, tc)


def lstm_cell_backward(dh, dc, cache, weight):
    """Gradients of one step.  Returns ``(dx, dh_prev, dc_prev, dW, db)``."""
    xh, f, i, g, o, c_prev, tc = cache
    hdim = f.shape[-1]
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    df = dc * c_prev
    di = dc * g
    dg = dc * i
    dc_prev = dc * f
    dz = np.concatenate(
        [df * f * (1 - f), di * i * (1 - i), dg * (1 - g * g), do * o * (1 - o)], axis=-1
    )
    dW = dz.T @ xh
    db = dz.sum(axis=0)
    dxh = dz @ weight
    d_in = xh.shape[-1] - hdim
    return dxh[..., :d_in], dxh[..., d_in:], dc_prev, dW, db


class LSTM(Layer):
    """``n_layers`` stacked LSTMs over (N, T, D); returns the last top-layer state."""

    def __init__(self, n_in: int, hidden: int, n_layers: int = 3, rng: np.random.Generator | None = None,
                 name: str = "lstm"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.hidden, self.n_layers = n_in, hidden, n_layers
        bound = 1.0 / math.sqrt(hidden)
        self.weights, self.biases = [], []
        for layer in range(n_layers):
            d = n_in if layer == 0 else hidden
            w = Parameter(rng.uniform(-bound, bound, (4 * hidden, d + hidden)), f"{name}.{layer}.weight")
            b = Parameter(rng.uniform(-bound, bound, 4 * hidden), f"{name}.{layer}.bias")
            self.weights.append(w)
            self.biases.append(b)
        self._params = [p for pair in zip(self.weights, self.biases) for p in pair]

    def spec(self):
        return LayerSpec("lstm", {"n_in": self.n_in, "hidden": self.hidden, "n_layers": self.n_layers})

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.n_in:
            raise ConfigError(f"lstm expects (T, {self.n_in}), got {shape}")
        return (self.hidden,)

    def forward(self, x):
        n, t_len, _ = x.shape
        seq = x
        self._caches = []
        for w, b in zip(self.weights, self.biases):
            h = np.zeros((n, self.hidden))
            c = np.zeros((n, self.hidden))
            outs, caches = [], []
            for t in range(t_len):
                h, c, cache = lstm_cell(seq[:, t], h, c, w.value, b.value)
                outs.append(h)
                caches.append(cache)
            self._caches.append(caches)
            seq = np.stack(outs, axis=1)
        self._shape = x.shape
        return check_finite(seq[:, -1], "lstm.forward")

    def backward(self, dout):
        n, t_len, d_in = self._shape
        # gradient arriving at each time step of the current layer's output
        d_seq = np.zeros((n, t_len, self.hidden))
        d_seq[:, -1] = dout
        for layer in reversed(range(self.n_layers)):
            w, b = self.weights[layer], self.biases[layer]
            caches = self._caches[layer]
            width = d_in if layer == 0 else self.hidden
            d_below = np.zeros((n, t_len, width))
            dh_next = np.zeros((n, self.hidden))
            dc_next = np.zeros((n, self.hidden))
            for t in reversed(range(t_len)):
                dx, dh_next, dc_next, dW, db = lstm_cell_backward(d_seq[:, t] + dh_next, dc_next, caches[t], w.value)
                w.grad += dW
                b.grad += db
                d_below[:, t] = dx
            d_seq = d_below
        return check_finite(d_seq, "lstm.backward")
