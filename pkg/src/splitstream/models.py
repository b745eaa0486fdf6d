"""Declarative model zoo and the client/server split."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .nn import (
    ActivationKind,
    ActivationLayer,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    LossKind,
    ModelPart,
    PoolLayer,
    PoolMode,
)
from .rng import Rng


class ModelKind(str, Enum):
    COVID_CNN = "covid_cnn"
    VGG19_LITE = "vgg19_lite"
    CHOLESTEROL_MLP = "cholesterol_mlp"


# --------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv:
    kernel_size: int
    out_channels: int
    type: str = field(default="conv", init=False)


@dataclass(frozen=True)
class Pool:
    window: int = 2
    mode: str = PoolMode.MAX.value
    type: str = field(default="pool", init=False)


@dataclass(frozen=True)
class Activation:
    kind: str
    slope: float = 0.01
    type: str = field(default="activation", init=False)


@dataclass(frozen=True)
class Dense:
    out_features: int
    type: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Flatten:
    type: str = field(default="flatten", init=False)


LayerSpec = Conv | Pool | Activation | Dense | Flatten
_BY_TYPE = {"conv": Conv, "pool": Pool, "activation": Activation, "dense": Dense, "flatten": Flatten}


def _layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    try:
        cls = _BY_TYPE[d.pop("type")]
    except KeyError as exc:
        raise ConfigurationError(f"unknown layer descriptor {exc}") from None
    return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture, split point, loss and seed of one model.

    ``blocks`` are the hidden-layer blocks that may be moved to the client;
    ``head`` always stays on the server.
    """

    name: str
    input_shape: tuple[int, ...]
    blocks: tuple[tuple[LayerSpec, ...], ...]
    head: tuple[LayerSpec, ...]
    loss: LossKind
    seed: int
    split_index: int = 1
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1

    def __post_init__(self):
        if not 0 <= self.split_index <= len(self.blocks):
            raise ConfigurationError(
                f"split_index {self.split_index} outside 0..{len(self.blocks)}"
            )
        self.shapes()

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for b in self.blocks for l in b) + tuple(self.head)

    @property
    def client_layer_count(self) -> int:
        return sum(len(b) for b in self.blocks[: self.split_index])

    def with_split(self, split_index: int) -> "ModelSpec":
        return replace(self, split_index=split_index)

    def shapes(self) -> list[tuple[int, ...]]:
        """Shape after every layer, validating the whole chain."""
        shape = tuple(self.input_shape)
        out = []
        for idx, spec in enumerate(self.layers):
            try:
                shape = _output_shape(spec, shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"{self.name} layer {idx}: {exc}") from None
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "blocks": [[asdict(l) for l in b] for b in self.blocks],
            "head": [asdict(l) for l in self.head],
            "loss": LossKind(self.loss).value,
            "seed": int(self.seed),
            "split_index": self.split_index,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            blocks=tuple(tuple(_layer_from_dict(l) for l in b) for b in d["blocks"]),
            head=tuple(_layer_from_dict(l) for l in d["head"]),
            loss=LossKind(d["loss"]),
            seed=int(d["seed"]),
            split_index=int(d["split_index"]),
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            learning_rate=float(d["learning_rate"]),
        )

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> int:
        digest = hashlib.blake2b(self.canonical().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


def _output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(spec, Conv):
        if len(shape) != 3:
            raise ConfigurationError(f"conv needs H x W x C input, got {shape}")
        h, w, _ = shape
        k = spec.kernel_size
        if k < 1 or h < k or w < k:
            raise ConfigurationError(f"kernel {k} does not fit {h}x{w}")
        return (h - k + 1, w - k + 1, spec.out_channels)
    if isinstance(spec, Pool):
        if len(shape) != 3:
            raise ConfigurationError(f"pool needs H x W x C input, got {shape}")
        if spec.window < 2 or shape[0] % spec.window or shape[1] % spec.window:
            raise ConfigurationError(f"pool window {spec.window} does not divide {shape[:2]}")
        return (shape[0] // spec.window, shape[1] // spec.window, shape[2])
    if isinstance(spec, Activation):
        return shape
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(spec, Dense):
        if len(shape) != 1:
            raise ConfigurationError(f"dense needs a flat input, got {shape}")
        return (spec.out_features,)
    raise ConfigurationError(f"unknown layer {spec!r}")


# --------------------------------------------------------------------------
# zoo

# (epochs, batch size, learning rate)
TRAIN_DEFAULTS = {
    ModelKind.COVID_CNN: (100, 64, 0.2),
    ModelKind.VGG19_LITE: (50, 128, 0.2),
    ModelKind.CHOLESTEROL_MLP: (200, 2048, 1e-3),
}

COVID_WIDTHS = (16, 32, 64, 128, 256)
VGG19_WIDTHS = (64, 64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512)
VGG19_GROUP_ENDS = {2, 4, 8, 12, 16}  # block indices (0-based) after which VGG pools
CHOLESTEROL_FEATURES = ("Age", "Sex", "Height", "Weight", "TC", "HDL-C", "TG")


def parse_scale(scale) -> Fraction:
    try:
        value = Fraction(str(scale)) if not isinstance(scale, Fraction) else scale
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"bad scale {scale!r}") from None
    if value <= 0:
        raise ConfigurationError(f"scale must be positive, got {scale}")
    return value


def _scaled(n: int, scale: Fraction, minimum: int = 4) -> int:
    return max(minimum, int(n * scale))


def _spatial(n: int, scale: Fraction) -> int:
    value = n * scale
    if value.denominator != 1 or value < 2:
        raise ConfigurationError(f"scale {scale} gives a non-integer input size {value}")
    return int(value)


def _conv_blocks(size: int, widths, act: Activation, pool_after) -> tuple[tuple, ...]:
    """Conv blocks for a square input.

    The first block is a 1x1 conv so the privacy block halves the resolution
    exactly; later convs are 3x3 while they fit and 1x1 once the map is smaller.
    Pools are inserted only where the window divides the map.
    """
    if size % 2:
        raise ConfigurationError(f"input size {size} is not divisible by the privacy pool")
    blocks = []
    for i, width in enumerate(widths):
        k = 1 if i == 0 else (3 if size >= 3 else 1)
        size = size - k + 1
        block = [Conv(k, width), act]
        if i == 0 or (i in pool_after and size >= 2 and size % 2 == 0):
            block.append(Pool(2, PoolMode.MAX.value))
            size //= 2
        blocks.append(tuple(block))
    return tuple(blocks)


def build_model(kind, scale=1, seed: int = 0, split_index: int = 1) -> ModelSpec:
    kind = ModelKind(kind)
    scale = parse_scale(scale)
    epochs, batch, lr = TRAIN_DEFAULTS[kind]
    sigmoid = Activation(ActivationKind.SIGMOID.value)
    if kind is ModelKind.CHOLESTEROL_MLP:
        leaky = Activation(ActivationKind.LEAKY_RELU.value, 0.01)
        blocks = ((Dense(_scaled(64, scale)), leaky), (Dense(_scaled(32, scale)), leaky))
        return ModelSpec(
            name=kind.value, input_shape=(len(CHOLESTEROL_FEATURES),), blocks=blocks,
            head=(Dense(1),), loss=LossKind.MSE, seed=seed, split_index=split_index,
            epochs=epochs, batch_size=batch, learning_rate=lr,
        )
    if kind is ModelKind.COVID_CNN:
        size = _spatial(64, scale)
        widths = [_scaled(w, scale) for w in COVID_WIDTHS]
        blocks = _conv_blocks(size, widths, sigmoid, pool_after=set(range(len(widths))))
    else:
        size = _spatial(224, scale)
        widths = [_scaled(w, scale) for w in VGG19_WIDTHS]
        blocks = _conv_blocks(size, widths, sigmoid, pool_after=VGG19_GROUP_ENDS)
    return ModelSpec(
        name=kind.value, input_shape=(size, size, 1), blocks=blocks,
        head=(Flatten(), Dense(1), sigmoid), loss=LossKind.BINARY_CROSSENTROPY, seed=seed,
        split_index=split_index, epochs=epochs, batch_size=batch, learning_rate=lr,
    )


# --------------------------------------------------------------------------
# instantiation and split


SIGMOID_GAIN = 4.0


def _glorot(rng: Rng, shape: tuple[int, ...], fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(int(np.prod(shape)), -limit, limit).reshape(shape).astype(np.float32)


def _is_sigmoid(desc) -> bool:
    return isinstance(desc, Activation) and ActivationKind(desc.kind) is ActivationKind.SIGMOID


def _sigmoid_context(layers) -> tuple[list[bool], list[bool]]:
    """Per layer: is it followed by a sigmoid, and does it read sigmoid outputs
    (looking through pools and flattens)."""
    n = len(layers)
    feeds, reads = [False] * n, [False] * n
    last = None
    for i, desc in enumerate(layers):
        if isinstance(desc, (Conv, Dense)):
            reads[i] = last is not None and _is_sigmoid(last)
            nxt = next((d for d in layers[i + 1 :] if not isinstance(d, (Pool, Flatten))), None)
            feeds[i] = nxt is not None and _is_sigmoid(nxt)
            last = desc
        elif isinstance(desc, Activation):
            last = desc
    return feeds, reads


def instantiate(spec: ModelSpec) -> ModelPart:
    """Full model with seed-derived initial weights; prefixes are layer indices.

    Weights are Glorot-uniform, scaled by 4 in front of a sigmoid.  Biases are
    zero, except behind a sigmoid where they cancel the 0.5 mean of the incoming
    activations so the next pre-activation starts centred.
    """
    shapes = [tuple(spec.input_shape)] + spec.shapes()
    feeds, reads = _sigmoid_context(spec.layers)
    root = Rng(spec.seed)
    layers = []
    for idx, desc in enumerate(spec.layers):
        rng = root.child("init", idx)
        in_shape = shapes[idx]
        gain = SIGMOID_GAIN if feeds[idx] else 1.0
        if isinstance(desc, (Conv, Dense)):
            if isinstance(desc, Conv):
                k, c, o = desc.kernel_size, in_shape[2], desc.out_channels
                w = _glorot(rng, (k, k, c, o), k * k * c, k * k * o, gain)
            else:
                i, o = in_shape[0], desc.out_features
                w = _glorot(rng, (i, o), i, o, gain)
            if reads[idx]:
                b = (-0.5 * w.astype(np.float64).reshape(-1, o).sum(axis=0)).astype(np.float32)
            else:
                b = np.zeros(o, dtype=np.float32)
            layers.append(ConvLayer(w, b) if isinstance(desc, Conv) else DenseLayer(w, b))
        elif isinstance(desc, Pool):
            layers.append(PoolLayer(desc.window, PoolMode(desc.mode)))
        elif isinstance(desc, Activation):
            layers.append(ActivationLayer(ActivationKind(desc.kind), desc.slope))
        else:
            layers.append(FlattenLayer())
    return ModelPart(layers, [str(i) for i in range(len(layers))], tuple(spec.input_shape))


@dataclass
class SplitModel:
    spec: ModelSpec
    client_part: ModelPart
    server_part: ModelPart

    @property
    def config_hash(self) -> int:
        return self.spec.config_hash

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.server_part.input_shape)

    def full(self) -> ModelPart:
        """Client and server layers rejoined (parameters shared, not copied)."""
        return ModelPart(
            self.client_part.layers + self.server_part.layers,
            self.client_part.prefixes + self.server_part.prefixes,
            self.client_part.input_shape,
        )


def split_model(spec: ModelSpec, model: ModelPart | None = None) -> SplitModel:
    if not 0 <= spec.split_index <= len(spec.blocks):
        raise ConfigurationError(f"split_index {spec.split_index} outside 0..{len(spec.blocks)}")
    model = model if model is not None else instantiate(spec)
    cut = spec.client_layer_count
    shapes = [tuple(spec.input_shape)] + spec.shapes()
    client = ModelPart(model.layers[:cut], model.prefixes[:cut], tuple(spec.input_shape))
    server = ModelPart(model.layers[cut:], model.prefixes[cut:], shapes[cut])
    return SplitModel(spec, client, server)


# --------------------------------------------------------------------------
# weights file: magic, u32 header length, canonical JSON header, float32 LE payloads

_WEIGHTS_MAGIC = b"STSW"


def save_weights(path, spec: ModelSpec, params: dict[str, np.ndarray]) -> None:
    names = sorted(params, key=lambda n: (int(n.split(".")[0]), n))
    header = {
        "spec": spec.to_dict(),
        "config_hash": f"{spec.config_hash:016x}",
        "params": [{"name": n, "dims": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC + struct.pack("<I", len(blob)) + blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_weights(path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != _WEIGHTS_MAGIC:
        raise ConfigurationError(f"{path}: not a weights file")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen])
    offset = 8 + hlen
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["dims"]))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(entry["dims"]).astype(np.float32)
        offset += 4 * count
    return ModelSpec.from_dict(header["spec"]), params


def load_into(model: ModelPart, params: dict[str, np.ndarray]) -> None:
    for name, arr in model.parameters().items():
        if name not in params or params[name].shape != arr.shape:
            raise ConfigurationError(f"weights file does not match parameter {name}")
        arr[...] = params[name]
