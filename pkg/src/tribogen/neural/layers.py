"""Layers with hand-written backward passes.

Each layer keeps what its backward pass needs from the last forward call,
so a layer instance handles one batch at a time.
"""
from __future__ import annotations

import numpy as np


class Layer:
    params: dict
    buffers: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        super().__init__()
        # Kaiming normal, fan-in mode, gain sqrt(2)
        std = np.sqrt(2.0 / n_in)
        self.params["W"] = (rng.standard_normal((n_in, n_out)) * std).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        self.grads["W"] = self._x.T @ g
        self.grads["b"] = g.sum(axis=0)
        return g @ self.params["W"].T


class BatchNorm(Layer):
    def __init__(self, dim, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(dim, dtype=dtype)
        self.params["beta"] = np.zeros(dim, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(dim, dtype=dtype)
        self.buffers["running_var"] = np.ones(dim, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - self.buffers["running_mean"]) * (inv * gamma) + beta
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch norm needs at least 2 samples in train mode")
        mean = x.mean(axis=0)
        xc = x - mean
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        m = self.momentum
        self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
        self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"]
                                       + m * var * (n / (n - 1))).astype(x.dtype)
        self._xhat, self._inv = xhat, inv
        return xhat * gamma + beta

    def backward(self, g):
        xhat, inv = self._xhat, self._inv
        self.grads["gamma"] = (g * xhat).sum(axis=0)
        self.grads["beta"] = g.sum(axis=0)
        gx = g * self.params["gamma"]
        return inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))


class PReLU(Layer):
    """Leaky ReLU with one learned negative slope shared by all features."""

    def __init__(self, init=0.25, dtype=np.float32):
        super().__init__()
        self.params["a"] = np.array([init], dtype=dtype)

    def forward(self, x, train=False, rng=None):
        self._x = x
        self._neg = x <= 0
        return np.where(self._neg, self.params["a"][0] * x, x)

    def backward(self, g):
        self.grads["a"] = np.array([(g * self._x)[self._neg].sum()], dtype=g.dtype)
        return np.where(self._neg, self.params["a"][0] * g, g)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""

    def __init__(self, p):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0:
            self._mask = None
            return x
        keep = rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask


class Tanh(Layer):
    def forward(self, x, train=False, rng=None):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y * self._y)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def named(self, attr):
        out = {}
        for i, layer in enumerate(self.layers):
            sub = layer.named(attr) if isinstance(layer, Sequential) else getattr(layer, attr)
            for k, v in sub.items():
                out[f"{i}.{k}"] = v
        return out

    def assign(self, attr, values):
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            sub = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
            if isinstance(layer, Sequential):
                layer.assign(attr, sub)
            else:
                target = getattr(layer, attr)
                for k, v in sub.items():
                    target[k] = v


def block(n_in, n_out, dropout, rng, dtype=np.float32):
    """Linear -> BatchNorm -> PReLU -> Dropout."""
    return Sequential([Linear(n_in, n_out, rng, dtype), BatchNorm(n_out, dtype=dtype),
                       PReLU(dtype=dtype), Dropout(dropout)])


def mlp(n_in, widths, dropouts, rng, dtype=np.float32):
    layers, d = [], n_in
    for w, p in zip(widths, dropouts):
        layers.append(block(d, w, p, rng, dtype))
        d = w
    return Sequential(layers), d
