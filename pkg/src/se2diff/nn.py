"""Minimal reverse-mode neural-network layers on numpy.

Layers cache what their backward pass needs, backward() assigns (not
accumulates) parameter gradients and returns the input gradient.  Everything
is dtype-parametrized: float32 for training, float64 for finite-difference
gradient checking.

Convolutions are 3x3, stride 2, pad 1, channels-last (NHWC), bias-free;
im2col is a strided gather feeding one GEMM per layer.
"""

from __future__ import annotations

import numpy as np


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        scale = np.sqrt(2.0 / n_in)
        self.w = (rng.standard_normal((n_in, n_out)) * scale).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.dw = None
        self.db = None
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.dw = self._x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.w.T

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


class Conv2d:
    """3x3 stride-2 pad-1 convolution, NHWC, no bias.

    ``skip_input_grad`` elides the col2im scatter for a first layer whose
    input gradient nobody consumes.
    """

    K = 3
    STRIDE = 2
    PAD = 1

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        dtype=np.float32,
        skip_input_grad: bool = False,
    ):
        fan_in = self.K * self.K * c_in
        scale = np.sqrt(2.0 / fan_in)
        self.w = (rng.standard_normal((fan_in, c_out)) * scale).astype(dtype)
        self.c_in = c_in
        self.c_out = c_out
        self.skip_input_grad = skip_input_grad
        self.dw = None
        self._cols = None
        self._in_shape = None

    @staticmethod
    def out_size(n: int) -> int:
        return (n - 1) // 2 + 1

    def _gather(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        b = xp.shape[0]
        cols = np.empty((b, ho, wo, self.K, self.K, self.c_in), dtype=xp.dtype)
        for i in range(self.K):
            for j in range(self.K):
                cols[:, :, :, i, j, :] = xp[:, i : i + 2 * ho - 1 : 2, j : j + 2 * wo - 1 : 2, :]
        return cols.reshape(b * ho * wo, self.K * self.K * self.c_in)

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        ho, wo = self.out_size(h), self.out_size(w)
        xp = np.zeros((b, h + 2 * self.PAD, w + 2 * self.PAD, c), dtype=x.dtype)
        xp[:, 1:-1, 1:-1, :] = x
        self._cols = self._gather(xp, ho, wo)
        self._in_shape = (b, h, w, c)
        return (self._cols @ self.w).reshape(b, ho, wo, self.c_out)

    def backward(self, dy: np.ndarray):
        b, ho, wo, _ = dy.shape
        dy_flat = dy.reshape(b * ho * wo, self.c_out)
        self.dw = self._cols.T @ dy_flat
        if self.skip_input_grad:
            return None
        _, h, w, c = self._in_shape
        dcols = (dy_flat @ self.w.T).reshape(b, ho, wo, self.K, self.K, c)
        dxp = np.zeros((b, h + 2 * self.PAD, w + 2 * self.PAD, c), dtype=dy.dtype)
        for i in range(self.K):
            for j in range(self.K):
                dxp[:, i : i + 2 * ho - 1 : 2, j : j + 2 * wo - 1 : 2, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :]

    def params(self):
        return {"w": self.w}

    def grads(self):
        return {"w": self.dw}


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask

    def params(self):
        return {}

    def grads(self):
        return {}


class Softplus:
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return np.logaddexp(0.0, x)

    def backward(self, dy):
        # overflow-safe sigmoid
        t = np.exp(-np.abs(self._x))
        sig = np.where(self._x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        return dy * sig

    def params(self):
        return {}

    def grads(self):
        return {}


class Identity:
    def forward(self, x):
        return x

    def backward(self, dy):
        return dy

    def params(self):
        return {}

    def grads(self):
        return {}


class GlobalAvgPool:
    def __init__(self):
        self._hw = None

    def forward(self, x):
        b, h, w, c = x.shape
        self._hw = (h, w)
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        h, w = self._hw
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (dy.shape[0], h, w, dy.shape[1])).astype(dy.dtype)

    def params(self):
        return {}

    def grads(self):
        return {}


ACTIVATIONS = {"relu": Relu, "softplus": Softplus, "identity": Identity}


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self, prefix: str):
        out = {}
        for k, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{prefix}.{k}.{name}"] = p
        return out

    def grads(self, prefix: str):
        out = {}
        for k, layer in enumerate(self.layers):
            for name, g in layer.grads().items():
                out[f"{prefix}.{k}.{name}"] = g
        return out


class Adam:
    """Per-parameter first/second-moment scaled gradient steps."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self._m:
                self._m[key] = np.zeros_like(p)
                self._v[key] = np.zeros_like(p)
            m = self._m[key]
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
