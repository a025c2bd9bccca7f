"""Layers with hand-written backward passes.

Tensors are float64 numpy arrays, channels-last: images are (B, H, W, C)
and vectors (B, n).  Each layer caches what its backward pass needs during
``forward`` and writes parameter gradients into ``self.grads``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2D(Layer):
    """Cross-correlation with zero padding and no bias (batch norm follows)."""

    def __init__(self, kh, kw, cin, cout, stride=(1, 1), padding=(0, 0), rng=None):
        super().__init__()
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        rng = rng if rng is not None else np.random.default_rng()
        self.params["W"] = he_normal(rng, (kh, kw, cin, cout), kh * kw * cin)
        self.zero_grad()

    def output_shape(self, h, w):
        return (conv_output_size(h, self.kh, self.stride[0], self.padding[0]),
                conv_output_size(w, self.kw, self.stride[1], self.padding[1]), self.cout)

    def _cols(self, xp):
        sh, sw = self.stride
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))[:, ::sh, ::sw]
        # win: (B, Ho, Wo, C, kh, kw) -> rows ordered (kh, kw, C) to match W
        B, Ho, Wo = win.shape[:3]
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, -1), (B, Ho, Wo)

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ValueError(f"conv expects (B, H, W, {self.cin}), got {x.shape}")
        ph, pw = self.padding
        if x.shape[1] + 2 * ph < self.kh or x.shape[2] + 2 * pw < self.kw:
            raise ValueError(f"input {x.shape[1:3]} smaller than kernel {(self.kh, self.kw)}")
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x
        cols, (B, Ho, Wo) = self._cols(xp)
        self._cache = (x.shape, xp.shape, cols, (B, Ho, Wo))
        out = cols @ self.params["W"].reshape(-1, self.cout)
        return out.reshape(B, Ho, Wo, self.cout)

    def backward(self, dout):
        xshape, xpshape, cols, (B, Ho, Wo) = self._cache
        d2 = dout.reshape(B * Ho * Wo, self.cout)
        self.grads["W"] += (cols.T @ d2).reshape(self.params["W"].shape)
        dcols = (d2 @ self.params["W"].reshape(-1, self.cout).T).reshape(B, Ho, Wo, self.kh, self.kw, self.cin)
        dxp = np.zeros(xpshape)
        sh, sw = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw, :] += dcols[:, :, :, i, j, :]
        ph, pw = self.padding
        return dxp[:, ph:xpshape[1] - ph, pw:xpshape[2] - pw, :]


class Dense(Layer):
    """y = x W^T without bias."""

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.params["W"] = he_normal(rng, (n_out, n_in), n_in)
        self.zero_grad()

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[1]:
            raise ValueError(f"dense expects (B, {self.params['W'].shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.params["W"].T

    def backward(self, dout):
        self.grads["W"] += dout.T @ self._x
        return dout @ self.params["W"]


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grad()

    def forward(self, x, train=True):
        gamma, beta = self.params["gamma"], self.params["beta"]
        axes = tuple(range(x.ndim - 1))
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch norm needs a batch of at least 2 in train mode")
            n = x.size // x.shape[-1]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var * n / (n - 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (train, xhat, inv_std, axes)
        return gamma * xhat + beta

    def backward(self, dout):
        train, xhat, inv_std, axes = self._cache
        gamma = self.params["gamma"]
        self.grads["beta"] += dout.sum(axis=axes)
        self.grads["gamma"] += (dout * xhat).sum(axis=axes)
        dxhat = dout * gamma
        if not train:
            return dxhat * inv_std
        n = dout.size // dout.shape[-1]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class PReLU(Layer):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.params["slope"] = np.full(channels, float(init))
        self.zero_grad()

    def forward(self, x, train=True):
        self._x = x
        return np.where(x >= 0, x, self.params["slope"] * x)

    def backward(self, dout):
        x = self._x
        neg = x < 0
        axes = tuple(range(x.ndim - 1))
        self.grads["slope"] += (dout * x * neg).sum(axis=axes)
        return np.where(neg, self.params["slope"] * dout, dout)


class Tanh(Layer):
    def forward(self, x, train=True):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dout):
        return dout * (1.0 - self._y ** 2)
