"""Layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates nothing: ``backward`` overwrites ``grads`` for its parameters and
returns the gradient with respect to its input(s).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, ShapeError
from ..nsl import NslConfig, nsl_backward, nsl_forward


XAVIER_MODES = ("average", "fan_in")


def xavier_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32,
                mode: str = "average") -> np.ndarray:
    """Zero-mean uniform draws with variance 2 / (fan_in + fan_out), or 1 / fan_in for ``mode="fan_in"``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    if mode not in XAVIER_MODES:
        raise ValueError(f"mode must be one of {XAVIER_MODES}")
    limit = np.sqrt(3.0 / fan_in) if mode == "fan_in" else np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, rng, dtype, mode="average"):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2D(Layer):
    """Valid cross-correlation with stride 1."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.params = {
            "weight": np.zeros((out_channels, in_channels, kernel, kernel), np.float32),
            "bias": np.zeros(out_channels, np.float32),
        }

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel
        if c != self.in_channels:
            raise ShapeError(f"{self.kind} expects {self.in_channels} input channels, got {c}")
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} smaller than {k}x{k} kernel")
        return (self.out_channels, h - k + 1, w - k + 1)

    def init_params(self, rng, dtype, mode="average"):
        k2 = self.kernel * self.kernel
        self.params["weight"] = xavier_init(
            self.params["weight"].shape, self.in_channels * k2, self.out_channels * k2, rng, dtype, mode
        )
        self.params["bias"] = np.zeros(self.out_channels, dtype)

    def forward(self, x):
        w, b = self.params["weight"], self.params["bias"]
        B = x.shape[0]
        _, ho, wo = self.out_shape(x.shape[1:])
        k = self.kernel
        # (B, C, Ho, Wo, k, k) -> rows of C*k*k, ordered like the weight tensor
        cols = sliding_window_view(x, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(B * ho * wo, self.in_channels * k * k)
        out = cols @ w.reshape(self.out_channels, -1).T + b
        self._cols, self._in_shape = cols, x.shape
        return np.ascontiguousarray(out.reshape(B, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, dy):
        w = self.params["weight"]
        B, C, H, W = self._in_shape
        k = self.kernel
        _, o, ho, wo = dy.shape
        dy_rows = dy.transpose(0, 2, 3, 1).reshape(B * ho * wo, o)
        self.grads["weight"] = (dy_rows.T @ self._cols).reshape(w.shape)
        self.grads["bias"] = dy_rows.sum(axis=0)
        # (C, k, k, B, Ho, Wo): each kernel tap is then one contiguous block to scatter
        w_taps = w.transpose(1, 2, 3, 0).reshape(C * k * k, o)
        dy_cols = dy.transpose(1, 0, 2, 3).reshape(o, B * ho * wo)
        dcols = (w_taps @ dy_cols).reshape(C, k, k, B, ho, wo)
        dx = np.zeros((C, B, H, W), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + ho, j : j + wo] += dcols[:, i, j]
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


class NiN(Conv2D):
    """Network-in-network stream: 1x1 convolution followed by ReLU."""

    kind = "nin"

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, 1)

    def forward(self, x):
        z = super().forward(x)
        self._active = z > 0
        return z * self._active

    def backward(self, dy):
        return super().backward(dy * self._active)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._active = x > 0
        return x * self._active

    def backward(self, dy):
        return dy * self._active


class MaxPool(Layer):
    """Max pooling; ties route the gradient to the first maximum in row-major order."""

    kind = "maxpool"

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window, self.stride = window, stride

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.window, self.stride
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} smaller than pool window {k}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x):
        k, s = self.window, self.stride
        _, ho, wo = self.out_shape(x.shape[1:])
        best = x[:, :, : s * ho : s, : s * wo : s].copy()
        arg = np.zeros(best.shape, dtype=np.int8 if k * k < 128 else np.int32)
        # strict comparison in row-major tap order keeps the first maximum
        for t in range(1, k * k):
            i, j = divmod(t, k)
            tap = x[:, :, i : i + s * ho : s, j : j + s * wo : s]
            better = tap > best
            np.copyto(best, tap, where=better)
            arg[better] = t
        self._arg, self._in_shape = arg, x.shape
        return best

    def backward(self, dy):
        k, s = self.window, self.stride
        ho, wo = dy.shape[2:]
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dy * (self._arg == i * k + j)
        return dx


class NSLLayer(Layer):
    kind = "nsl"

    def __init__(self, cfg: NslConfig, workers: int = 1):
        super().__init__()
        self.cfg, self.workers = cfg, workers

    def out_shape(self, in_shape):
        _, h, w = in_shape
        return (self.cfg.neighborhood.m, h, w)

    def forward(self, x):
        psi, self._cache = nsl_forward(x, self.cfg, workers=self.workers)
        return psi

    def backward(self, dy):
        return nsl_backward(dy, self._cache, self.cfg, workers=self.workers)


class Concat(Layer):
    """Channel-wise concatenation of several branches, in declaration order."""

    kind = "concat"

    def __init__(self, n_inputs: int = 2):
        super().__init__()
        self.n_inputs = n_inputs

    def out_shape(self, in_shapes):
        hw = {s[1:] for s in in_shapes}
        if len(hw) != 1:
            raise ShapeError(f"concat inputs disagree on spatial dims: {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]

    def forward(self, xs):
        self._splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, dy):
        return [np.ascontiguousarray(part) for part in np.split(dy, self._splits, axis=1)]


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params = {
            "weight": np.zeros((out_features, in_features), np.float32),
            "bias": np.zeros(out_features, np.float32),
        }

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"fc expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def init_params(self, rng, dtype, mode="average"):
        self.params["weight"] = xavier_init(
            (self.out_features, self.in_features), self.in_features, self.out_features, rng, dtype, mode
        )
        self.params["bias"] = np.zeros(self.out_features, dtype)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        self.grads["weight"] = dy.T @ self._x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class Softmax(Layer):
    """Output probabilities; training bypasses it and uses :func:`softmax_nll_loss`."""

    kind = "softmax"

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._y = e / e.sum(axis=1, keepdims=True)
        return self._y

    def backward(self, dy):
        y = self._y
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def softmax_nll_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of ``labels`` and its gradient with respect to ``logits``."""
    logits = np.asarray(logits)
    logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n
