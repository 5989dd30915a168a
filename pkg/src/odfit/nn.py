"""Minimal numpy layers with hand-written backward passes.

Activations travel in channel-major ``(C, N, H, W)`` layout so every
convolution is a single matrix product over the whole batch.
"""
from __future__ import annotations

import math

import numpy as np


class Layer:
    params: tuple[str, ...] = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def parameters(self):
        return [(name, getattr(self, name)) for name in self.params]


class Conv2d(Layer):
    """Square-kernel convolution with zero padding.

    ``weight`` has shape (out, in, k, k).
    """

    params = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel=3, stride=2, padding=1, dtype=np.float32):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grad_input = True

    def output_size(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        c, n, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = self.output_size(h, w)
        if p:
            xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
            xp[:, :, p:p + h, p:p + w] = x
        else:
            xp = x
        cols = np.empty((c, k * k, n, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i * k + j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        cols = cols.reshape(c * k * k, -1)
        self._cache = (cols, x.shape, (ho, wo))
        out = self.weight.reshape(self.out_channels, -1) @ cols
        out += self.bias[:, None]
        return out.reshape(self.out_channels, n, ho, wo)

    def backward(self, dout):
        cols, (c, n, h, w), (ho, wo) = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        d2 = dout.reshape(self.out_channels, -1)
        self.d_weight = (d2 @ cols.T).reshape(self.weight.shape)
        self.d_bias = d2.sum(axis=1)
        if not self.grad_input:
            return None
        dcols = (self.weight.reshape(self.out_channels, -1).T @ d2).reshape(c, k * k, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i * k + j]
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU(Layer):
    def forward(self, x):
        self._out = np.maximum(x, 0)
        return self._out

    @property
    def mask(self):
        return self._out > 0

    def backward(self, dout):
        return dout * self.mask


class Flatten(Layer):
    """(C, N, H, W) -> (N, C*H*W), per-sample order (C, H, W)."""

    def forward(self, x):
        self._shape = x.shape
        c, n, h, w = x.shape
        return x.transpose(1, 0, 2, 3).reshape(n, c * h * w)

    def backward(self, dout):
        c, n, h, w = self._shape
        return dout.reshape(n, c, h, w).transpose(1, 0, 2, 3)


class GlobalAvgPool(Layer):
    """(C, N, H, W) -> (N, C)."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3)).T

    def backward(self, dout):
        c, n, h, w = self._shape
        return np.broadcast_to((dout.T / (h * w))[:, :, None, None], self._shape).copy()


class Linear(Layer):
    """``y = x @ weight.T + bias`` with ``weight`` of shape (out, in)."""

    params = ("weight", "bias")

    def __init__(self, in_features, out_features, dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        self.weight = np.zeros((out_features, in_features), dtype=dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def forward(self, x):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout):
        self.d_weight = dout.T @ self._x
        self.d_bias = dout.sum(axis=0)
        return dout @ self.weight


def fan_in(layer: Layer) -> int:
    if isinstance(layer, Conv2d):
        return layer.in_channels * layer.kernel ** 2
    return layer.in_features


def init_uniform(layers, rng: np.random.Generator):
    """Fan-in scaled uniform init (He-style bound ``sqrt(6 / fan_in)``); biases zero."""
    for layer in layers:
        if layer.params:
            bound = math.sqrt(6.0 / fan_in(layer))
            layer.weight[...] = rng.uniform(-bound, bound, layer.weight.shape)
            layer.bias[...] = 0.0


class Adam:
    """Adam optimizer over a flat list of arrays, updated in place."""

    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if lr:
                a -= (lr * corr) * m / (np.sqrt(v) + self.eps)
