"""Small numpy neural-network engine.

Layers work on batched NHWC tensors (or N x features for dense layers); the
public ``*_forward`` helpers also accept a single unbatched sample.  Tensors are
plain ``numpy`` arrays, float32 in normal use.  Reductions accumulate in float64
and results are stored back in the dtype of the inputs, so feeding float64
parameters and inputs gives a float64 "shadow" model for gradient checking.

Convolution is plain valid cross-correlation with stride 1 and the bias added
once per output element.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DataError, InternalError

GradientSet = dict[str, np.ndarray]


class ActivationKind(str, Enum):
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"


class LossKind(str, Enum):
    BINARY_CROSSENTROPY = "binary_crossentropy"
    MSE = "mse"
    MSLE = "msle"


class PoolMode(str, Enum):
    MAX = "max"
    AVG = "avg"


def _dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(*[a.dtype for a in arrays])


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.argmax(~np.isfinite(x.reshape(-1))))
        raise DataError(f"{what}: non-finite value at flat index {bad}")


# --------------------------------------------------------------------------
# layers


@dataclass(eq=False)
class ConvLayer:
    weight: np.ndarray  # k x k x in x out
    bias: np.ndarray  # out

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ConfigurationError(f"conv weight must be k x k x in x out, got {w.shape}")
        if self.bias.shape != (w.shape[3],):
            raise ConfigurationError(f"conv bias shape {self.bias.shape} != ({w.shape[3]},)")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[3]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(shape) != 3:
            raise ConfigurationError(f"conv expects H x W x C input, got {shape}")
        h, w, c = shape
        k = self.kernel_size
        if h < k or w < k:
            raise ConfigurationError(f"conv kernel {k} larger than input {h}x{w}")
        if c != self.in_channels:
            raise ConfigurationError(f"conv expects {self.in_channels} channels, got {c}")
        return (h - k + 1, w - k + 1, self.out_channels)

    def forward(self, x: np.ndarray):
        n = x.shape[0]
        ho, wo, o = self.output_shape(x.shape[1:])
        k, c = self.kernel_size, self.in_channels
        cols = np.lib.stride_tricks.sliding_window_view(
            x.astype(np.float64, copy=False), (k, k), axis=(1, 2)
        )  # N, Ho, Wo, C, k, k
        cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
        w = self.weight.astype(np.float64).reshape(k * k * c, o)
        out = cols @ w + self.bias.astype(np.float64)
        return out.reshape(n, ho, wo, o).astype(_dtype(x, self.weight)), (x.shape, cols)

    def backward(self, dout: np.ndarray, cache, need_dx: bool = True):
        x_shape, cols = cache
        n, h, w_, c = x_shape
        k, o = self.kernel_size, self.out_channels
        ho, wo = h - k + 1, w_ - k + 1
        d = dout.astype(np.float64).reshape(n * ho * wo, o)
        grads = {
            "weight": (cols.T @ d).reshape(self.weight.shape).astype(self.weight.dtype),
            "bias": d.sum(axis=0).astype(self.bias.dtype),
        }
        if not need_dx:
            return None, grads
        dcols = (d @ self.weight.astype(np.float64).reshape(k * k * c, o).T).reshape(n, ho, wo, k, k, c)
        dx = np.zeros(x_shape, dtype=np.float64)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
        return dx.astype(dout.dtype), grads


@dataclass(eq=False)
class PoolLayer:
    window: int
    mode: PoolMode = PoolMode.MAX

    def __post_init__(self):
        if self.window < 2:
            raise ConfigurationError(f"pool window must be >= 2, got {self.window}")
        self.mode = PoolMode(self.mode)

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(shape) != 3:
            raise ConfigurationError(f"pool expects H x W x C input, got {shape}")
        h, w, c = shape
        s = self.window
        if h % s or w % s:
            raise ConfigurationError(f"pool window {s} does not divide input {h}x{w}")
        return (h // s, w // s, c)

    def forward(self, x: np.ndarray):
        n = x.shape[0]
        ho, wo, c = self.output_shape(x.shape[1:])
        s = self.window
        v = x.reshape(n, ho, s, wo, s, c)
        if self.mode is PoolMode.MAX:
            return v.max(axis=(2, 4)), x
        out = v.astype(np.float64).sum(axis=(2, 4)) / (s * s)
        return out.astype(x.dtype), x.shape

    def backward(self, dout: np.ndarray, cache, need_dx: bool = True):
        if not need_dx:
            return None, {}
        s = self.window
        if self.mode is PoolMode.AVG:
            dx = np.repeat(np.repeat(dout.astype(np.float64) / (s * s), s, axis=1), s, axis=2)
            return dx.astype(dout.dtype), {}
        x = cache
        n, h, w, c = x.shape
        ho, wo = h // s, w // s
        win = x.reshape(n, ho, s, wo, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, s * s)
        first = np.argmax(win, axis=-1)  # first maximal element in row-major window order
        mask = np.arange(s * s) == first[..., None]
        dwin = mask * dout[..., None]
        dx = dwin.reshape(n, ho, wo, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return dx.astype(dout.dtype), {}


@dataclass(eq=False)
class ActivationLayer:
    kind: ActivationKind
    slope: float = 0.01

    def __post_init__(self):
        self.kind = ActivationKind(self.kind)
        if not 0.0 < self.slope < 1.0:
            raise ConfigurationError(f"leaky-relu slope must be in (0, 1), got {self.slope}")

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x: np.ndarray):
        if self.kind is ActivationKind.SIGMOID:
            out = sigmoid(x)
            return out, out
        return np.where(x >= 0, x, x * x.dtype.type(self.slope)), x

    def backward(self, dout: np.ndarray, cache, need_dx: bool = True):
        if not need_dx:
            return None, {}
        if self.kind is ActivationKind.SIGMOID:
            s = cache.astype(np.float64)
            return (dout * s * (1.0 - s)).astype(dout.dtype), {}
        return np.where(cache >= 0, dout, dout * self.slope).astype(dout.dtype), {}


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray  # in x out
    bias: np.ndarray  # out

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigurationError(
                f"dense weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ConfigurationError(f"dense expects ({self.in_features},) input, got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x: np.ndarray):
        self.output_shape(x.shape[1:])
        x64 = x.astype(np.float64)
        out = x64 @ self.weight.astype(np.float64) + self.bias.astype(np.float64)
        return out.astype(_dtype(x, self.weight)), x64

    def backward(self, dout: np.ndarray, cache, need_dx: bool = True):
        d = dout.astype(np.float64)
        grads = {
            "weight": (cache.T @ d).astype(self.weight.dtype),
            "bias": d.sum(axis=0).astype(self.bias.dtype),
        }
        dx = None
        if need_dx:
            dx = (d @ self.weight.astype(np.float64).T).astype(dout.dtype)
        return dx, grads


@dataclass(eq=False)
class FlattenLayer:
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout: np.ndarray, cache, need_dx: bool = True):
        return (dout.reshape(cache) if need_dx else None), {}


Layer = ConvLayer | PoolLayer | ActivationLayer | DenseLayer | FlattenLayer


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function clamped so float outputs stay strictly inside (0, 1)."""
    x64 = x.astype(np.float64)
    out = np.empty_like(x64)
    pos = x64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
    e = np.exp(x64[~pos])
    out[~pos] = e / (1.0 + e)
    eps = np.finfo(x.dtype).eps / 2
    return np.clip(out, eps, 1.0 - eps).astype(x.dtype)


def _single(fn, x: np.ndarray, layer, batched_ndim: int) -> np.ndarray:
    if x.ndim == batched_ndim - 1:
        return layer.forward(x[None])[0][0]
    if x.ndim != batched_ndim:
        raise ConfigurationError(f"{fn}: unexpected input rank {x.ndim}")
    return layer.forward(x)[0]


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _require_finite(x, "conv2d_forward")
    return _single("conv2d_forward", x, layer, 4)


def pool2d_forward(x: np.ndarray, layer: PoolLayer) -> np.ndarray:
    return _single("pool2d_forward", x, layer, 4)


def activation_forward(x: np.ndarray, kind: ActivationKind, slope: float = 0.01) -> np.ndarray:
    return ActivationLayer(kind, slope).forward(x)[0]


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    return _single("dense_forward", x, layer, 2)


# --------------------------------------------------------------------------
# losses


def _check_loss_domain(y: np.ndarray, yhat: np.ndarray, kind: LossKind) -> None:
    if y.shape != yhat.shape:
        raise DataError(f"label shape {y.shape} != prediction shape {yhat.shape}")
    if kind is LossKind.BINARY_CROSSENTROPY:
        bad = ~((yhat > 0) & (yhat < 1))
        if bad.any():
            raise DataError(f"binary crossentropy needs 0 < yhat < 1; index {int(np.argmax(bad))}")
        bad = ~((y == 0) | (y == 1))
        if bad.any():
            raise DataError(f"binary crossentropy needs labels in {{0, 1}}; index {int(np.argmax(bad))}")
    elif kind is LossKind.MSLE:
        for name, arr in (("y", y), ("yhat", yhat)):
            bad = ~(arr > -1)
            if bad.any():
                raise DataError(f"MSLE needs {name} > -1; index {int(np.argmax(bad))}")


def loss_elements(y, yhat, kind: LossKind) -> np.ndarray:
    """Per-element loss terms in float64 (flattened)."""
    kind = LossKind(kind)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    _check_loss_domain(y, yhat, kind)
    if kind is LossKind.BINARY_CROSSENTROPY:
        return -(y * np.log(yhat) + (1.0 - y) * np.log1p(-yhat))
    if kind is LossKind.MSE:
        return (y - yhat) ** 2
    return (np.log1p(y) - np.log1p(yhat)) ** 2


def loss_forward(y, yhat, kind: LossKind) -> float:
    terms = loss_elements(y, yhat, kind)
    if terms.size == 0:
        raise DataError("loss of an empty batch")
    return float(terms.mean())


def loss_gradient(y, yhat: np.ndarray, kind: LossKind) -> np.ndarray:
    """d(mean loss)/d(yhat), shaped like ``yhat``."""
    kind = LossKind(kind)
    y64 = np.asarray(y, dtype=np.float64).reshape(yhat.shape)
    p = yhat.astype(np.float64)
    _check_loss_domain(y64.reshape(-1), p.reshape(-1), kind)
    n = p.size
    if kind is LossKind.BINARY_CROSSENTROPY:
        g = (p - y64) / (p * (1.0 - p))
    elif kind is LossKind.MSE:
        g = 2.0 * (p - y64)
    else:
        g = -2.0 * (np.log1p(y64) - np.log1p(p)) / (1.0 + p)
    return (g / n).astype(yhat.dtype)


# --------------------------------------------------------------------------
# model parts


@dataclass(eq=False)
class ModelPart:
    """An ordered run of layers; parameter names are ``"<prefix>.<weight|bias>"``."""

    layers: list
    prefixes: list[str] = field(default_factory=list)
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.prefixes:
            self.prefixes = [str(i) for i in range(len(self.layers))]
        if len(self.prefixes) != len(self.layers):
            raise ConfigurationError("one prefix per layer required")

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in zip(self.prefixes, self.layers):
            for name, arr in layer.params().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def output_shape(self, shape=None) -> tuple[int, ...]:
        shape = tuple(shape if shape is not None else self.input_shape)
        for prefix, layer in zip(self.prefixes, self.layers):
            try:
                shape = tuple(layer.output_shape(shape))
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {prefix}: {exc}") from None
        return shape

    def astype(self, dtype=None) -> "ModelPart":
        """Deep copy with parameters cast to ``dtype`` (kept as-is when None)."""
        layers = []
        for layer in self.layers:
            clone = copy.copy(layer)
            for name, arr in layer.params().items():
                setattr(clone, name, arr.astype(dtype or arr.dtype, copy=True))
            layers.append(clone)
        return ModelPart(layers, list(self.prefixes), self.input_shape)

    def copy(self) -> "ModelPart":
        return self.astype()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return model_forward(self, x)[0]


def model_forward(part: ModelPart, x: np.ndarray):
    """Run ``x`` (batched) through every layer; returns (output, caches)."""
    if part.input_shape is not None and tuple(x.shape[1:]) != tuple(part.input_shape):
        raise ConfigurationError(
            f"input shape {tuple(x.shape[1:])} != declared {tuple(part.input_shape)}"
        )
    caches = []
    for idx, (prefix, layer) in enumerate(zip(part.prefixes, part.layers)):
        try:
            x, cache = layer.forward(x)
        except ConfigurationError as exc:
            raise ConfigurationError(f"layer {idx} ({prefix}): {exc}") from None
        caches.append(cache)
    return x, caches


def forward_backward(
    part: ModelPart,
    x: np.ndarray,
    y: np.ndarray,
    loss: LossKind,
    trainable: set[str] | None = None,
):
    """Mean batch loss, gradients for every (trainable) parameter, and the output.

    Layers in front of the first trainable parameter are not back-propagated
    through, which is how frozen leading blocks are kept cheap.
    """
    if x.shape[0] == 0:
        raise DataError("empty batch")
    out, caches = model_forward(part, x)
    value = loss_forward(y, out, loss)
    dout = loss_gradient(y, out, loss)
    names = part.parameters()
    wanted = set(names) if trainable is None else set(trainable) & set(names)
    first_needed = len(part.layers)
    for idx, (prefix, layer) in enumerate(zip(part.prefixes, part.layers)):
        if any(f"{prefix}.{p}" in wanted for p in layer.params()):
            first_needed = idx
            break
    grads: GradientSet = {}
    for idx in range(len(part.layers) - 1, first_needed - 1, -1):
        layer, prefix = part.layers[idx], part.prefixes[idx]
        dout, local = layer.backward(dout, caches[idx], need_dx=idx > first_needed)
        for name, g in local.items():
            if f"{prefix}.{name}" in wanted:
                grads[f"{prefix}.{name}"] = g
    return value, grads, out


def backprop(part, x, y, loss, trainable=None):
    """(mean loss, gradients); see ``forward_backward``."""
    value, grads, _ = forward_backward(part, x, y, loss, trainable)
    return value, grads


def sgd_step(params: dict[str, np.ndarray], grads: GradientSet, alpha: float, keys=None):
    """In-place descent ``theta <- theta - alpha * grad``."""
    if alpha < 0:
        raise ConfigurationError("learning rate must be non-negative")
    for key in params if keys is None else keys:
        if key not in grads:
            raise InternalError(f"missing gradient for parameter {key!r}")
        p = params[key]
        p[...] = (p.astype(np.float64) - alpha * grads[key].astype(np.float64)).astype(p.dtype)
    return params


def grad_check(
    part: ModelPart,
    x: np.ndarray,
    y: np.ndarray,
    loss: LossKind,
    h: float = 1e-3,
    analytic: GradientSet | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy of the model; ``part`` is not touched.  ``analytic``
    overrides the gradients under test.
    """
    if not 0 < h <= 0.1:
        raise ConfigurationError("h must be in (0, 0.1]")
    shadow = part.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    if analytic is None:
        _, analytic = backprop(shadow, x64, y, loss)
    worst = 0.0
    for name, p in shadow.parameters().items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_forward(y, model_forward(shadow, x64)[0], loss)
            flat[i] = orig - h
            down = loss_forward(y, model_forward(shadow, x64)[0], loss)
            flat[i] = orig
            num = (up - down) / (2 * h)
            err = abs(a[i] - num) / max(1e-8, abs(a[i]) + abs(num))
            worst = max(worst, err)
    return worst
