"""Sequential model container, shape inference and binary checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .layers import (
    LAYER_SPECS,
    Activation,
    ActivationSpec,
    BatchNorm,
    BatchNormSpec,
    Conv3x3,
    Conv3x3Spec,
    Dense,
    DenseSpec,
    Dropout,
    DropoutSpec,
    Flatten,
    FlattenSpec,
    LinearOutput,
    LinearOutputSpec,
    MaxPool2x2,
    MaxPool2x2Spec,
    ShapeError,
)

CHECKPOINT_MAGIC = b"TPNN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or from an incompatible version."""


class Model:
    """Ordered layers plus an input contract.

    Inference-mode forward is a pure function of (parameters, input): dropout
    is disabled and batchnorm uses running statistics.
    """

    def __init__(self, layers, input_shape: tuple[int, ...], dtype=np.float64,
                 metadata: dict | None = None) -> None:
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)  # per-sample shape, no batch axis
        self.dtype = np.dtype(dtype)
        self.metadata = dict(metadata or {})

    def seed_dropout(self, seed) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng(seed)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"model expects input shape (B, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, training)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from exc
        self._forward_ran = training
        return x

    def backward(self, dy: np.ndarray) -> None:
        """Accumulate parameter gradients for the last training-mode forward."""
        if not getattr(self, "_forward_ran", False):
            raise RuntimeError("backward requires a preceding training-mode forward")
        dy = np.asarray(dy, dtype=self.dtype)
        first = self.layers[0]
        if isinstance(first, Conv3x3):
            first.need_input_grad = False
        for layer in reversed(self.layers):
            dy = layer.backward(dy)

    def parameters(self):
        """(layer, name, array) triples for every trainable parameter."""
        out = []
        for layer in self.layers:
            for name in sorted(layer.params):
                out.append((layer, name, layer.params[name]))
        return out

    def get_parameter_copies(self) -> list[np.ndarray]:
        return [arr.copy() for _, _, arr in self.parameters()]

    def set_parameters(self, arrays) -> None:
        triples = self.parameters()
        if len(arrays) != len(triples):
            raise ValueError("parameter count mismatch")
        for (layer, name, current), new in zip(triples, arrays):
            if current.shape != new.shape:
                raise ValueError(f"shape mismatch for {type(layer).__name__}.{name}")
            layer.params[name] = np.array(new, dtype=self.dtype)

    def parameter_count(self) -> int:
        return sum(arr.size for _, _, arr in self.parameters())

    def specs(self):
        return [layer.spec for layer in self.layers]


def build_model(specs, input_shape: tuple[int, ...], seed=0, dtype=np.float64,
                metadata: dict | None = None) -> Model:
    """Instantiate layers from specs, inferring channel/feature wiring.

    input_shape is the per-sample shape: (channels, height, width) for image
    input or (features,) for flat input.
    """
    rng = np.random.default_rng([_seed_scalar(seed), 0])
    dtype = np.dtype(dtype)
    shape = tuple(input_shape)
    layers = []
    for i, spec in enumerate(specs):
        if isinstance(spec, Conv3x3Spec):
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: conv3x3 needs image input, have {shape}")
            c, h, w = shape
            if h < 3 or w < 3:
                raise ShapeError(f"layer {i}: conv3x3 needs spatial size >= 3, have {shape}")
            layers.append(Conv3x3(spec, c, rng, dtype))
            shape = (spec.filters, h - 2, w - 2)
        elif isinstance(spec, MaxPool2x2Spec):
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: maxpool needs image input, have {shape}")
            c, h, w = shape
            if h < 2 or w < 2:
                raise ShapeError(f"layer {i}: maxpool needs spatial size >= 2, have {shape}")
            layers.append(MaxPool2x2(spec))
            shape = (c, h // 2, w // 2)
        elif isinstance(spec, BatchNormSpec):
            layers.append(BatchNorm(spec, shape[0], dtype))
        elif isinstance(spec, ActivationSpec):
            layers.append(Activation(spec))
        elif isinstance(spec, DropoutSpec):
            layers.append(Dropout(spec))
        elif isinstance(spec, FlattenSpec):
            layers.append(Flatten(spec))
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, (DenseSpec, LinearOutputSpec)):
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: dense needs flat input, have {shape}")
            cls = LinearOutput if isinstance(spec, LinearOutputSpec) else Dense
            layers.append(cls(spec, shape[0], rng, dtype))
            shape = (spec.units,)
        else:
            raise TypeError(f"unknown layer spec {spec!r}")
    return Model(layers, input_shape, dtype, metadata)


def _seed_scalar(seed) -> int:
    if isinstance(seed, (list, tuple)):
        return int(seed[0])
    return int(seed)


def _spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["kind"] = spec.kind
    return d


def _spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = LAYER_SPECS[kind]
    except KeyError:
        raise CheckpointError(f"unknown layer kind {kind!r}") from None
    return cls(**d)


def save_model(model: Model, path: str | Path) -> None:
    """Versioned binary container: magic, header JSON, little-endian blobs."""
    arrays = []
    table = []
    for layer in model.layers:
        state = layer.state_arrays()
        entry = {"spec": _spec_to_dict(layer.spec), "arrays": []}
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype=model.dtype)
            entry["arrays"].append({"name": name, "shape": list(arr.shape)})
            arrays.append(arr)
        table.append(entry)
    header = {
        "dtype": model.dtype.name,
        "input_shape": list(model.input_shape),
        "layers": table,
        "metadata": model.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        le = np.dtype(model.dtype.name).newbyteorder("<")
        for arr in arrays:
            f.write(arr.astype(le).tobytes())


def load_model(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    dtype = np.dtype(header["dtype"])
    specs = [_spec_from_dict(entry["spec"]) for entry in header["layers"]]
    model = build_model(specs, tuple(header["input_shape"]), seed=0, dtype=dtype,
                        metadata=header.get("metadata"))

    offset = 12 + hlen
    le = dtype.newbyteorder("<")
    for layer, entry in zip(model.layers, header["layers"]):
        state = layer.state_arrays()
        for item in entry["arrays"]:
            name, shape = item["name"], tuple(item["shape"])
            if name not in state:
                raise CheckpointError(f"{path}: unexpected array {name!r}")
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated parameter data")
            arr = np.frombuffer(raw, dtype=le, count=count, offset=offset)
            arr = arr.astype(dtype).reshape(shape)
            offset += nbytes
            if name in layer.params:
                layer.params[name] = arr.copy()
            elif name == "running_mean":
                layer.running_mean = arr.copy()
            elif name == "running_var":
                layer.running_var = arr.copy()
            else:
                raise CheckpointError(f"{path}: array {name!r} has no destination")
        layer.zero_grads()
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
