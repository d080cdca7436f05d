"""Minimal layer library with explicit forward/backward passes.

Tensors are channel-first ``(batch, channels, time)`` for the temporal
layers and ``(..., features)`` for :class:`Linear`.  Every layer keeps the
cache of its last forward call, so ``backward`` must follow the matching
``forward``.  Gradients land in ``layer.grads`` under the same keys as
``layer.params``.
"""
from __future__ import annotations

import numpy as np

from . import _accel


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.children = {}

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.children[str(i)] = layer

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self.mask = x > 0
        return x * self.mask

    def backward(self, dy):
        return dy * self.mask


class Dropout(Layer):
    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0:
            self.mask = None
            return x
        keep = 1.0 - self.p
        self.mask = (rng.random(x.shape) < keep) / keep
        return x * self.mask

    def backward(self, dy):
        return dy if self.mask is None else dy * self.mask


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


class Linear(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params["W"] = _he(rng, (n_out, n_in), n_in)
        self.params["b"] = np.zeros(n_out)

    def forward(self, x, train=False, rng=None):
        self.x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        d2 = dy.reshape(-1, dy.shape[-1])
        self.grads["W"] = d2.T @ x2
        self.grads["b"] = d2.sum(axis=0)
        return dy @ self.params["W"]


class Conv1d(Layer):
    """Stride-1 dilated convolution with 'same' output length."""

    def __init__(self, c_in, c_out, kernel, rng, dilation=1):
        super().__init__()
        self.dilation = dilation
        span = dilation * (kernel - 1)
        self.pad = (span // 2, span - span // 2)
        self.params["W"] = _he(rng, (c_out, c_in, kernel), c_in * kernel)
        self.params["b"] = np.zeros(c_out)

    def forward(self, x, train=False, rng=None):
        self.xpad = np.pad(x, ((0, 0), (0, 0), self.pad))
        self.length = x.shape[2]
        return _accel.conv1d_forward(self.xpad, self.params["W"], self.dilation) + self.params["b"][None, :, None]

    def backward(self, dy):
        dxpad, dW = _accel.conv1d_backward(self.xpad, self.params["W"], dy, self.dilation)
        self.grads["W"] = dW
        self.grads["b"] = dy.sum(axis=(0, 2))
        return dxpad[:, :, self.pad[0]:self.pad[0] + self.length]


def transposed_conv_padding(kernel, dilation, stride):
    """(padding, output_padding) giving ``L_out == stride * L_in``."""
    span = dilation * (kernel - 1)
    if stride == 1:
        if span % 2:
            raise ValueError("stride-1 transposed conv needs an odd effective kernel")
        return span // 2, 0
    if stride != 2:
        raise ValueError("only stride 1 or 2 supported")
    return (span // 2, 1) if span % 2 == 0 else ((span - 1) // 2, 0)


class ConvTranspose1d(Layer):
    """Transposed convolution; weight layout ``(c_in, c_out, kernel)``.

    Implemented as zero-insertion upsampling followed by an ordinary
    convolution with the flipped kernel.
    """

    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.padding, self.output_padding = transposed_conv_padding(kernel, dilation, stride)
        span = dilation * (kernel - 1)
        self.pad = (span - self.padding, span - self.padding + self.output_padding)
        self.params["W"] = _he(rng, (c_in, c_out, kernel), c_in * kernel // max(stride, 1))
        self.params["b"] = np.zeros(c_out)

    def _flipped(self):
        return np.ascontiguousarray(self.params["W"].transpose(1, 0, 2)[:, :, ::-1])

    def forward(self, x, train=False, rng=None):
        B, C, L = x.shape
        s = self.stride
        self.in_len = L
        u = np.zeros((B, C, (L - 1) * s + 1), dtype=x.dtype)
        u[:, :, ::s] = x
        self.upad = np.pad(u, ((0, 0), (0, 0), self.pad))
        self.u_len = u.shape[2]
        return _accel.conv1d_forward(self.upad, self._flipped(), self.dilation) + self.params["b"][None, :, None]

    def backward(self, dy):
        dupad, dWc = _accel.conv1d_backward(self.upad, self._flipped(), dy, self.dilation)
        self.grads["W"] = dWc[:, :, ::-1].transpose(1, 0, 2).copy()
        self.grads["b"] = dy.sum(axis=(0, 2))
        du = dupad[:, :, self.pad[0]:self.pad[0] + self.u_len]
        return du[:, :, ::self.stride]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class SqueezeExcite(Layer):
    """Channel gate: mean over time -> FC -> ReLU -> FC -> sigmoid -> scale."""

    def __init__(self, channels, rng, ratio=8):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.params["W1"] = _he(rng, (hidden, channels), channels)
        self.params["b1"] = np.zeros(hidden)
        self.params["W2"] = _he(rng, (channels, hidden), hidden)
        self.params["b2"] = np.zeros(channels)

    def forward(self, x, train=False, rng=None):
        p = self.params
        s = x.mean(axis=2)
        z1 = s @ p["W1"].T + p["b1"]
        a = np.maximum(z1, 0.0)
        g = _sigmoid(a @ p["W2"].T + p["b2"])
        self.cache = (x, s, z1, a, g)
        return x * g[:, :, None]

    def backward(self, dy):
        p = self.params
        x, s, z1, a, g = self.cache
        dg = np.sum(dy * x, axis=2)
        dz2 = dg * g * (1.0 - g)
        self.grads["W2"] = dz2.T @ a
        self.grads["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["W2"]) * (z1 > 0)
        self.grads["W1"] = dz1.T @ s
        self.grads["b1"] = dz1.sum(axis=0)
        ds = dz1 @ p["W1"]
        return dy * g[:, :, None] + ds[:, :, None] / x.shape[2]


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class SelfAttention(Layer):
    """Single-head scaled dot-product self-attention over time with an
    output projection and a residual connection."""

    def __init__(self, channels, rng):
        super().__init__()
        scale = np.sqrt(1.0 / channels)
        for name in ("q", "k", "v", "o"):
            self.params["W" + name] = rng.standard_normal((channels, channels)) * scale
            self.params["b" + name] = np.zeros(channels)

    def forward(self, x, train=False, rng=None):
        p = self.params
        X = x.transpose(0, 2, 1)  # (B, T, C)
        Q = X @ p["Wq"].T + p["bq"]
        K = X @ p["Wk"].T + p["bk"]
        V = X @ p["Wv"].T + p["bv"]
        scale = 1.0 / np.sqrt(X.shape[2])
        A = softmax(Q @ K.transpose(0, 2, 1) * scale)
        O = A @ V
        Y = X + O @ p["Wo"].T + p["bo"]
        self.cache = (X, Q, K, V, A, O, scale)
        return Y.transpose(0, 2, 1)

    def backward(self, dy):
        p = self.params
        X, Q, K, V, A, O, scale = self.cache
        dY = dy.transpose(0, 2, 1)
        C = X.shape[2]

        def wgrad(d, inp):
            return d.reshape(-1, C).T @ inp.reshape(-1, C)

        self.grads["Wo"] = wgrad(dY, O)
        self.grads["bo"] = dY.sum(axis=(0, 1))
        dO = dY @ p["Wo"]
        dA = dO @ V.transpose(0, 2, 1)
        dV = A.transpose(0, 2, 1) @ dO
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        dX = dY.copy()
        for name, d in (("q", dQ), ("k", dK), ("v", dV)):
            self.grads["W" + name] = wgrad(d, X)
            self.grads["b" + name] = d.sum(axis=(0, 1))
            dX += d @ p["W" + name]
        return dX.transpose(0, 2, 1)


class ResidualBlock(Layer):
    """Pre-activation dilated residual block with a squeeze-excitation gate:
    ``skip(x) + SE(conv_b(dropout(relu(conv_a(relu(x))))))``; the skip is a
    1x1 convolution when the channel count changes."""

    def __init__(self, c_in, c_out, kernel, dilation, rng, dropout=0.1, se_ratio=8):
        super().__init__()
        self.body = Sequential(
            ReLU(),
            Conv1d(c_in, c_out, kernel, rng, dilation),
            ReLU(),
            Dropout(dropout),
            Conv1d(c_out, c_out, kernel, rng, dilation),
            SqueezeExcite(c_out, rng, se_ratio),
        )
        self.children["body"] = self.body
        self.skip = Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None
        if self.skip is not None:
            self.children["skip"] = self.skip

    def forward(self, x, train=False, rng=None):
        h = self.body.forward(x, train, rng)
        return h + (self.skip.forward(x) if self.skip is not None else x)

    def backward(self, dy):
        dx = self.body.backward(dy)
        return dx + (self.skip.backward(dy) if self.skip is not None else dy)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False, rng=None):
        self.length = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy):
        return np.repeat(dy[:, :, None], self.length, axis=2) / self.length


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, train=False, rng=None):
        self.in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self.in_shape)


class Crop(Layer):
    """Keep the first ``length`` time steps."""

    def __init__(self, length):
        super().__init__()
        self.length = length

    def forward(self, x, train=False, rng=None):
        self.in_len = x.shape[2]
        return x[:, :, :self.length]

    def backward(self, dy):
        out = np.zeros(dy.shape[:2] + (self.in_len,), dtype=dy.dtype)
        out[:, :, :self.length] = dy
        return out
