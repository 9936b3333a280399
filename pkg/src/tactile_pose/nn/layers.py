"""Layers with forward and reverse passes.

Conventions: image tensors are (batch, channel, height, width), dense tensors
(batch, features). Convolutions are 3x3, stride 1, no padding; pooling is 2x2
stride 2. Weights initialize uniform in [-s, s] with s = sqrt(1/fan_in);
biases start at zero.

Each layer caches what its backward pass needs during forward; backward may
only be called after a forward in the same mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-8
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Input tensor does not match the layer's declared shape."""


# -- layer specs (the serializable architecture description) ----------------

@dataclass(frozen=True)
class Conv3x3Spec:
    filters: int
    kind = "conv3x3"


@dataclass(frozen=True)
class MaxPool2x2Spec:
    kind = "maxpool2x2"


@dataclass(frozen=True)
class DenseSpec:
    units: int
    kind = "dense"


@dataclass(frozen=True)
class ActivationSpec:
    fn: str  # "relu" | "elu"
    kind = "activation"


@dataclass(frozen=True)
class BatchNormSpec:
    kind = "batchnorm"


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    kind = "dropout"


@dataclass(frozen=True)
class FlattenSpec:
    kind = "flatten"


@dataclass(frozen=True)
class LinearOutputSpec:
    units: int
    kind = "linear_output"


LAYER_SPECS = {
    "conv3x3": Conv3x3Spec,
    "maxpool2x2": MaxPool2x2Spec,
    "dense": DenseSpec,
    "activation": ActivationSpec,
    "batchnorm": BatchNormSpec,
    "dropout": DropoutSpec,
    "flatten": FlattenSpec,
    "linear_output": LinearOutputSpec,
}


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    s = math.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


class Layer:
    """Base layer: parameter dict, gradient dict, cached forward state."""

    spec: object

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        # Parameter names subject to L1/L2 penalties (dense/output weights only).
        self.regularized: tuple[str, ...] = ()

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Arrays persisted in checkpoints (parameters plus running stats)."""
        return dict(self.params)


class Conv3x3(Layer):
    def __init__(self, spec: Conv3x3Spec, in_channels: int, rng, dtype) -> None:
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        fan_in = in_channels * 9
        self.params = {
            "w": _uniform_init(rng, (spec.filters, in_channels, 3, 3), fan_in, dtype),
            "b": np.zeros(spec.filters, dtype=dtype),
        }
        self.zero_grads()

    # Model.backward sets this False on the first layer: the input gradient
    # of the network is never consumed, and for conv it is the costliest part.
    need_input_grad = True

    def forward(self, x, training):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv3x3 expects (B, {self.in_channels}, H, W), got {x.shape}"
            )
        if x.shape[2] < 3 or x.shape[3] < 3:
            raise ShapeError(f"conv3x3 needs spatial size >= 3, got {x.shape}")
        self._windows = sliding_window_view(x, (3, 3), axis=(2, 3))
        y = np.tensordot(self._windows, self.params["w"], axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + self.params["b"][None, :, None, None]

    def backward(self, dy):
        w = self.params["w"]
        self.grads["b"] = dy.sum(axis=(0, 2, 3))
        self.grads["w"] = np.tensordot(dy, self._windows, axes=([0, 2, 3], [0, 2, 3]))
        if not self.need_input_grad:
            return None
        dy_pad = np.pad(dy, ((0, 0), (0, 0), (2, 2), (2, 2)))
        win = sliding_window_view(dy_pad, (3, 3), axis=(2, 3))
        w_flip = w[:, :, ::-1, ::-1]
        dx = np.tensordot(win, w_flip, axes=([1, 4, 5], [0, 2, 3]))
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive loop convolution; the reference the fast path is checked against."""
    bsz, cin, h, wd = x.shape
    f = w.shape[0]
    out = np.zeros((bsz, f, h - 2, wd - 2), dtype=x.dtype)
    for i in range(h - 2):
        for j in range(wd - 2):
            patch = x[:, :, i : i + 3, j : j + 3]
            for k in range(f):
                out[:, k, i, j] = np.sum(patch * w[k], axis=(1, 2, 3))
    return out + b[None, :, None, None]


class MaxPool2x2(Layer):
    """2x2 stride-2 max pooling; an odd trailing row/column is dropped.

    Ties inside a window resolve to the first cell in (top-left, top-right,
    bottom-left, bottom-right) order.
    """

    def __init__(self, spec: MaxPool2x2Spec) -> None:
        super().__init__()
        self.spec = spec

    def forward(self, x, training):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2x2 expects a 4-d tensor, got {x.shape}")
        b, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2x2 needs spatial size >= 2, got {x.shape}")
        h2, w2 = h // 2, w // 2
        self._in_shape = x.shape
        self._slices = (
            x[:, :, 0 : h2 * 2 : 2, 0 : w2 * 2 : 2],
            x[:, :, 0 : h2 * 2 : 2, 1 : w2 * 2 : 2],
            x[:, :, 1 : h2 * 2 : 2, 0 : w2 * 2 : 2],
            x[:, :, 1 : h2 * 2 : 2, 1 : w2 * 2 : 2],
        )
        y = np.maximum(np.maximum(self._slices[0], self._slices[1]),
                       np.maximum(self._slices[2], self._slices[3]))
        self._y = y
        return y

    def backward(self, dy):
        h2, w2 = self._y.shape[2], self._y.shape[3]
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        remaining = dy
        targets = (
            dx[:, :, 0 : h2 * 2 : 2, 0 : w2 * 2 : 2],
            dx[:, :, 0 : h2 * 2 : 2, 1 : w2 * 2 : 2],
            dx[:, :, 1 : h2 * 2 : 2, 0 : w2 * 2 : 2],
            dx[:, :, 1 : h2 * 2 : 2, 1 : w2 * 2 : 2],
        )
        for s, t in zip(self._slices, targets):
            hit = s == self._y
            t += np.where(hit, remaining, 0.0)
            remaining = np.where(hit, 0.0, remaining)  # first hit wins ties
        return dx


class Dense(Layer):
    kind = "dense"

    def __init__(self, spec, in_features: int, rng, dtype) -> None:
        super().__init__()
        self.spec = spec
        self.in_features = in_features
        self.params = {
            "w": _uniform_init(rng, (in_features, spec.units), in_features, dtype),
            "b": np.zeros(spec.units, dtype=dtype),
        }
        self.regularized = ("w",)
        self.zero_grads()

    def forward(self, x, training):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (B, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads["w"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["w"].T


class LinearOutput(Dense):
    """Output layer: a dense map with no activation after it."""

    kind = "linear_output"


class Activation(Layer):
    def __init__(self, spec: ActivationSpec) -> None:
        super().__init__()
        if spec.fn not in ("relu", "elu"):
            raise ValueError(f"unsupported activation {spec.fn!r}")
        self.spec = spec

    def forward(self, x, training):
        self._x = x
        if self.spec.fn == "relu":
            return np.maximum(x, 0.0)
        return np.where(x > 0.0, x, np.expm1(x))

    def backward(self, dy):
        if self.spec.fn == "relu":
            return dy * (self._x > 0.0)
        return dy * np.where(self._x > 0.0, 1.0, np.exp(self._x))


class BatchNorm(Layer):
    """Normalizes per channel (4-d input) or per feature (2-d input).

    Training mode uses batch statistics and updates the running estimates;
    inference mode uses the running estimates only.
    """

    def __init__(self, spec: BatchNormSpec, channels: int, dtype) -> None:
        super().__init__()
        self.spec = spec
        self.channels = channels
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
        }
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.zero_grads()

    def _axes(self, x):
        if x.ndim == 4:
            return (0, 2, 3)
        if x.ndim == 2:
            return (0,)
        raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")

    def _expand(self, v, ndim):
        return v[None, :, None, None] if ndim == 4 else v[None, :]

    def forward(self, x, training):
        axes = self._axes(x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape}")
        if training:
            mean = x.mean(axis=axes)
            var = np.maximum((x * x).mean(axis=axes) - mean * mean, 0.0)
            self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean
            self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
            self._std = np.sqrt(var + BN_EPS)
            self._xhat = (x - self._expand(mean, x.ndim)) / self._expand(self._std, x.ndim)
            self._n = x.size // x.shape[1]
            return self._expand(self.params["gamma"], x.ndim) * self._xhat + self._expand(
                self.params["beta"], x.ndim
            )
        std = np.sqrt(self.running_var + BN_EPS)
        xhat = (x - self._expand(self.running_mean, x.ndim)) / self._expand(std, x.ndim)
        return self._expand(self.params["gamma"], x.ndim) * xhat + self._expand(
            self.params["beta"], x.ndim
        )

    def backward(self, dy):
        axes = self._axes(dy)
        ndim = dy.ndim
        xhat, std, n = self._xhat, self._std, self._n
        self.grads["gamma"] = np.sum(dy * xhat, axis=axes)
        self.grads["beta"] = np.sum(dy, axis=axes)
        dxhat = dy * self._expand(self.params["gamma"], ndim)
        mean_dxhat = self._expand(dxhat.mean(axis=axes), ndim)
        mean_dxhat_xhat = self._expand((dxhat * xhat).mean(axis=axes), ndim)
        return (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / self._expand(std, ndim)

    def state_arrays(self):
        d = dict(self.params)
        d["running_mean"] = self.running_mean
        d["running_var"] = self.running_var
        return d


class Dropout(Layer):
    """Inverted dropout: zero a fraction rate, scale survivors by 1/(1-rate)."""

    def __init__(self, spec: DropoutSpec, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        if not 0.0 <= spec.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {spec.rate}")
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, training):
        if not training or self.spec.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.spec.rate
        self._mask = (self.rng.random(x.shape) >= self.spec.rate) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Flatten(Layer):
    def __init__(self, spec: FlattenSpec) -> None:
        super().__init__()
        self.spec = spec

    def forward(self, x, training):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)
