"""Layers with hand-written backward passes.

Arrays are NCHW. Each layer keeps what its backward pass needs from the
most recent forward call, so a layer instance serves one forward/backward
pair at a time. Computation follows the dtype of the parameters.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class NonFiniteTensor(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteTensor(f"non-finite values after {where}")
    return x


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v, self

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1, padding: int = 0):
    """Cross-correlation, ``x`` (N, C, H, W) with ``w`` (O, C, k, k). Returns (out, cols)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(dy, cols, x_shape, w, stride, padding):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    _, _, ho, wo = dy.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw, db


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, gain=1.0, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["W"] = (gain * np.sqrt(2.0 / fan_in) * rng.standard_normal((out_ch, in_ch, kernel, kernel))).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)
        self.stride, self.padding = stride, padding
        self.zero_grad()

    def forward(self, x):
        self._shape = x.shape
        y, self._cols = conv2d(x, self.params["W"], self.params["b"], self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._cols, self._shape, self.params["W"], self.stride, self.padding)
        self.grads["W"] += dw
        self.grads["b"] += db
        return dx


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, gain=1.0, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = (gain * np.sqrt(2.0 / n_in) * rng.standard_normal((n_in, n_out))).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ShapeMismatch(f"dense: input {x.shape} vs weight {self.params['W'].shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        self.grads["W"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), self._shape).astype(dy.dtype)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


class ResidualBlock(Layer):
    """conv3x3-relu-conv3x3 plus shortcut, then relu. Projection shortcut when shape changes."""

    def __init__(self, in_ch, out_ch, stride=1, rng=None, branch_gain=1.0, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng, gain=branch_gain, dtype=dtype)
        self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, rng, dtype=dtype) if (stride != 1 or in_ch != out_ch) else None
        self.relu2 = ReLU()

    def forward(self, x):
        h = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        s = self.proj.forward(x) if self.proj is not None else x
        return self.relu2.forward(h + s)

    def backward(self, dy):
        d = self.relu2.backward(dy)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(d)))
        dx = dx + (self.proj.backward(d) if self.proj is not None else d)
        return dx

    def named_params(self, prefix=""):
        yield from self.conv1.named_params(prefix + "conv1.")
        yield from self.conv2.named_params(prefix + "conv2.")
        if self.proj is not None:
            yield from self.proj.named_params(prefix + "proj.")

    def zero_grad(self):
        for layer in (self.conv1, self.conv2, self.proj):
            if layer is not None:
                layer.zero_grad()


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


BCE_CLAMP = 1e-7


def bce_loss(p, y) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"bce: predictions {p.shape} vs labels {y.shape}")
    p = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def bce_logit_grad(p, y):
    """d(mean BCE)/d(logit) for sigmoid outputs."""
    return (p - y) / len(p)
