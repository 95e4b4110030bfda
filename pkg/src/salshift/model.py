"""Declarative model specs, network construction and the binary checkpoint format.

A spec is a JSON-friendly description: an input shape (C, H, W), a class
count and an ordered list of layer dicts, each with a ``kind`` key.

==========  ==============================================================
kind        keys (defaults)
==========  ==============================================================
conv        out, kernel (3), stride (1), bias (false), padding (same)
sal         out, kernel (3), stride (1), k (1), bias (false), padding (same),
            init ("uniform"), literal_scaling (false)
shift       out, kernel (3), stride (1), padding (same) and either
            source "predetermined" with proportions (uniform), granularity
            ("channel"), seed (0); or source "converted" with k (1)
linear      out
bn          (none)
relu        (none)
avgpool     kernel (null = global average, output is (C,))
flatten     (none)
residual    out, stride (1), k (1), conv ("conv" | "sal" | "shift" |
            "shift-converted"); the block's 3x3 layers are of that kind
==========  ==============================================================
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .convert import ShiftInference
from .nn import (AvgPool, BatchNorm, Conv2d, Flatten, Linear, Module, ReLU, ResidualBlock, Sequential,
                 same_padding)
from .sal import SalLayer, TemperatureSchedule
from .shift import ShiftConv, ShiftLayer, ShiftTable, SparseShiftLayer, predetermined_table
from .tensor import Rng, Tensor, get_default_dtype

LAYER_KINDS = ("conv", "sal", "shift", "linear", "bn", "relu", "avgpool", "flatten", "residual")
RESIDUAL_CONVS = ("conv", "sal", "shift", "shift-converted")

_DEFAULTS = {
    "conv": {"kernel": 3, "stride": 1, "bias": False, "padding": None},
    "sal": {"kernel": 3, "stride": 1, "k": 1, "bias": False, "padding": None, "init": "uniform",
            "literal_scaling": False},
    "shift": {"kernel": 3, "stride": 1, "padding": None, "source": "predetermined", "proportions": None,
              "granularity": "channel", "seed": 0, "k": 1, "bias": False},
    "linear": {},
    "bn": {},
    "relu": {},
    "avgpool": {"kernel": None},
    "flatten": {},
    "residual": {"stride": 1, "conv": "conv", "k": 1},
}
_REQUIRED = {"conv": ("out",), "sal": ("out",), "shift": ("out",), "linear": ("out",), "residual": ("out",)}


def _layer_with_defaults(layer: dict, index: int) -> dict:
    if not isinstance(layer, dict) or "kind" not in layer:
        raise ValueError(f"layer {index}: expected a dict with a 'kind' key, got {layer!r}")
    kind = layer["kind"]
    if kind not in LAYER_KINDS:
        raise ValueError(f"layer {index}: unknown layer kind {kind!r}")
    unknown = set(layer) - set(_DEFAULTS[kind]) - set(_REQUIRED.get(kind, ())) - {"kind"}
    if unknown:
        raise ValueError(f"layer {index} ({kind}): unknown keys {sorted(unknown)}")
    for key in _REQUIRED.get(kind, ()):
        if key not in layer:
            raise ValueError(f"layer {index} ({kind}): missing required key {key!r}")
    out = dict(_DEFAULTS[kind])
    out.update(layer)
    return out


def _spatial(h: int, s: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - s) // stride + 1


@dataclass
class ModelSpec:
    input_shape: Tuple[int, int, int]
    classes: int
    layers: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be a positive (C, H, W), got {self.input_shape}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        self.layers = [_layer_with_defaults(layer, i) for i, layer in enumerate(self.layers)]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        missing = {"input_shape", "classes", "layers"} - set(d)
        if missing:
            raise ValueError(f"model spec is missing {sorted(missing)}")
        return cls(tuple(d["input_shape"]), int(d["classes"]), list(d["layers"]))

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "classes": self.classes,
                "layers": copy.deepcopy(self.layers)}

    def shapes(self) -> List[tuple]:
        """Output shape after every layer; raises ValueError on incompatible neighbours."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _next_shape(layer, shape, i)
            out.append(shape)
        if shape != (self.classes,):
            raise ValueError(f"model output shape {shape} does not match ({self.classes},) classes")
        return out

    def validate(self) -> "ModelSpec":
        self.shapes()
        return self


def _next_shape(layer: dict, shape: tuple, i: int) -> tuple:
    kind = layer["kind"]
    where = f"layer {i} ({kind})"
    if kind in ("conv", "sal", "shift", "residual"):
        if len(shape) != 3:
            raise ValueError(f"{where}: expects a (C, H, W) input, got {shape}")
        s = 3 if kind == "residual" else int(layer["kernel"])
        if s < 1 or s % 2 == 0:
            raise ValueError(f"{where}: kernel size must be odd and positive, got {s}")
        stride = int(layer["stride"])
        if stride < 1:
            raise ValueError(f"{where}: stride must be positive")
        pad = same_padding(s) if layer.get("padding") is None else int(layer["padding"])
        ho, wo = _spatial(shape[1], s, stride, pad), _spatial(shape[2], s, stride, pad)
        if ho < 1 or wo < 1:
            raise ValueError(f"{where}: input {shape} is too small for kernel {s}")
        if kind == "sal" and not 1 <= int(layer["k"]) <= s * s:
            raise ValueError(f"{where}: k must lie in [1, {s * s}]")
        if kind == "residual" and layer["conv"] not in RESIDUAL_CONVS:
            raise ValueError(f"{where}: conv must be one of {', '.join(RESIDUAL_CONVS)}")
        return (int(layer["out"]), ho, wo)
    if kind == "linear":
        if len(shape) != 1:
            raise ValueError(f"{where}: expects a flat input, got {shape}; add flatten or avgpool")
        return (int(layer["out"]),)
    if kind == "bn":
        if len(shape) != 3:
            raise ValueError(f"{where}: expects a (C, H, W) input, got {shape}")
        return shape
    if kind == "relu":
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "avgpool":
        if len(shape) != 3:
            raise ValueError(f"{where}: expects a (C, H, W) input, got {shape}")
        k = layer["kernel"]
        if k is None:
            return (shape[0],)
        if shape[1] % k or shape[2] % k:
            raise ValueError(f"{where}: spatial size {shape[1:]} not divisible by {k}")
        return (shape[0], shape[1] // k, shape[2] // k)
    raise ValueError(f"{where}: unknown layer kind")


# --------------------------------------------------------------------------
# building


class Network(Sequential):
    """Sequential model that remembers its spec and the shared temperature schedule."""

    def __init__(self, layers, spec: ModelSpec, schedule: TemperatureSchedule):
        super().__init__(layers)
        self.spec = spec
        self.schedule = schedule

    def sal_layers(self) -> List[SalLayer]:
        return [m for m in self.modules() if isinstance(m, SalLayer)]

    def attention_parameters(self) -> List[Tensor]:
        return [m.attention for m in self.sal_layers()]


def _conv_like(kind: str, c: int, layer: dict, rng: Rng, schedule, stride: int, s: int = 3,
               padding=None) -> Module:
    if kind == "conv":
        return Conv2d(c, layer["out"], s, stride, bias=layer.get("bias", False), rng=rng, padding=padding)
    if kind == "sal":
        return SalLayer(c, layer["out"], s, stride, schedule=schedule, k=layer.get("k", 1),
                        bias=layer.get("bias", False), init=layer.get("init", "uniform"),
                        literal_scaling=layer.get("literal_scaling", False), rng=rng, padding=padding)
    if kind in ("shift", "shift-converted"):
        source = "converted" if kind == "shift-converted" else layer.get("source", "predetermined")
        d = layer["out"]
        if source == "predetermined":
            table = predetermined_table(c, d, s, layer.get("proportions"), layer.get("granularity", "channel"),
                                        seed=layer.get("seed", 0))
            return ShiftConv(table, stride, rng, padding=padding)
        if source == "converted":
            k = int(layer.get("k", 1))
            dtype = get_default_dtype()
            if k == 1:
                inner = ShiftLayer(ShiftTable(np.zeros((d, c), np.int64), s), np.zeros((d, c), dtype),
                                   np.zeros(d, dtype) if layer.get("bias") else None, stride, padding)
            else:
                inner = SparseShiftLayer(np.zeros((d, c, k), np.int64), np.zeros((d, c, k), dtype), s,
                                         np.zeros(d, dtype) if layer.get("bias") else None, stride, padding)
            return ShiftInference(inner)
        raise ValueError(f"unknown shift source {source!r}")
    raise ValueError(f"unknown conv kind {kind!r}")


def build_model(spec: ModelSpec, rng: Optional[Rng] = None, schedule: Optional[TemperatureSchedule] = None) -> Network:
    """Instantiate ``spec`` with weights drawn from ``rng``; all SAL layers share ``schedule``."""
    spec.validate()
    rng = rng or Rng(0)
    schedule = schedule or TemperatureSchedule()
    shape = spec.input_shape
    layers: List[Module] = []
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind in ("conv", "sal", "shift"):
            layers.append(_conv_like(kind, shape[0], layer, rng, schedule, layer["stride"], layer["kernel"],
                                     layer["padding"]))
        elif kind == "residual":
            c, d, stride, inner = shape[0], layer["out"], layer["stride"], layer["conv"]
            conv1 = _conv_like(inner, c, layer, rng, schedule, stride)
            conv2 = _conv_like(inner, d, layer, rng, schedule, 1)
            shortcut = shortcut_bn = None
            if stride != 1 or c != d:
                shortcut = Conv2d(c, d, 1, stride, rng=rng)
                shortcut_bn = BatchNorm(d)
            layers.append(ResidualBlock(conv1, BatchNorm(d), conv2, BatchNorm(d), shortcut, shortcut_bn))
        elif kind == "linear":
            layers.append(Linear(shape[0], layer["out"], rng=rng))
        elif kind == "bn":
            layers.append(BatchNorm(shape[0]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "avgpool":
            layers.append(AvgPool(layer["kernel"]))
        elif kind == "flatten":
            layers.append(Flatten())
        shape = _next_shape(layer, shape, i)
    return Network(layers, spec, schedule)


def converted_spec(spec: ModelSpec) -> ModelSpec:
    """Spec of the network obtained by binarising every SAL layer of ``spec``."""
    layers = []
    for layer in spec.layers:
        layer = dict(layer)
        if layer["kind"] == "sal":
            layer = {"kind": "shift", "source": "converted", "out": layer["out"], "kernel": layer["kernel"],
                     "stride": layer["stride"], "padding": layer["padding"], "k": layer["k"],
                     "bias": layer["bias"]}
        elif layer["kind"] == "residual" and layer["conv"] == "sal":
            layer["conv"] = "shift-converted"
        layers.append(layer)
    return ModelSpec(spec.input_shape, spec.classes, layers)


# --------------------------------------------------------------------------
# state


def _slot_names(module: Module, prefix: str = ""):
    """(name, array-or-tensor) for everything a checkpoint must hold, in a stable order."""
    for name, value in vars(module).items():
        if isinstance(value, Tensor) and value.requires_grad:
            yield prefix + name, value
        elif isinstance(value, Module):
            yield from _slot_names(value, prefix + name + ".")
        elif isinstance(value, list):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _slot_names(item, f"{prefix}{name}.{i}.")
    if isinstance(module, BatchNorm):
        yield prefix + "running_mean", module.running_mean
        yield prefix + "running_var", module.running_var
    elif isinstance(module, ShiftConv):
        yield prefix + "table", module.table.entries
    elif isinstance(module, ShiftInference):
        inner = module.layer
        if isinstance(inner, ShiftLayer):
            yield prefix + "table", inner.table.entries
            yield prefix + "w_tilde", inner.w_tilde
        else:
            yield prefix + "positions", inner.positions
            yield prefix + "weights", inner.weights
        if inner.bias is not None:
            yield prefix + "bias", inner.bias


def state_dict(model: Module) -> Dict[str, np.ndarray]:
    """Copies of every parameter, buffer and shift table, keyed by dotted path."""
    return {name: np.array(_array_of(v)) for name, v in _slot_names(model)}


def _array_of(slot) -> np.ndarray:
    return slot.data if isinstance(slot, Tensor) else slot


def load_state_dict(model: Module, state: Dict[str, np.ndarray]) -> None:
    slots = dict(_slot_names(model))
    missing, unexpected = set(slots) - set(state), set(state) - set(slots)
    if missing or unexpected:
        raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for name, slot in slots.items():
        target = _array_of(slot)
        value = np.asarray(state[name])
        if value.shape != target.shape:
            raise ValueError(f"{name}: expected shape {target.shape}, got {value.shape}")
        target[...] = value
    for m in model.modules():
        if isinstance(m, ShiftConv):
            m._onehot = None


# --------------------------------------------------------------------------
# checkpoint file: magic, u32 version, u32 header length, JSON header, blobs

MAGIC = b"SALCKPT\0"
VERSION = 1
_BLOB_DTYPES = {"f4": "<f4", "i4": "<i4"}


@dataclass
class Checkpoint:
    """Spec, arrays and training metadata; serialises deterministically."""

    spec: dict
    arrays: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index = []
        blobs = io.BytesIO()
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name])
            code = "i4" if arr.dtype.kind in "iu" else "f4"
            raw = np.ascontiguousarray(arr, dtype=_BLOB_DTYPES[code]).tobytes()
            index.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": blobs.tell(),
                          "nbytes": len(raw)})
            blobs.write(raw)
        header = {"spec": self.spec, "meta": self.meta, "blobs": index}
        text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<II", VERSION, len(text)) + text + blobs.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "checkpoint") -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise ValueError(f"{source}: not a checkpoint (bad magic)")
        if len(blob) < 16:
            raise ValueError(f"{source}: truncated header")
        version, hlen = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise ValueError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
        base = 16 + hlen
        arrays = {}
        for entry in header["blobs"]:
            dtype = np.dtype(_BLOB_DTYPES[entry["dtype"]])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            if entry["nbytes"] != count * dtype.itemsize:
                raise ValueError(f"{source}: blob {entry['name']} has {entry['nbytes']} bytes for shape "
                                 f"{entry['shape']}")
            start = base + entry["offset"]
            if start + entry["nbytes"] > len(blob):
                raise ValueError(f"{source}: blob {entry['name']} runs past the end of the file")
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(np.int64 if entry["dtype"] == "i4" else np.float32)
        return cls(header["spec"], arrays, header["meta"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), str(path))

    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.spec)

    def schedule(self) -> TemperatureSchedule:
        s = self.meta.get("schedule")
        return TemperatureSchedule(**s) if s else TemperatureSchedule()

    def build(self) -> Network:
        """Network with this checkpoint's weights (optimizer state is ignored)."""
        net = build_model(self.model_spec(), Rng(0), self.schedule())
        load_state_dict(net, {k: v for k, v in self.arrays.items() if not k.startswith("opt.")})
        return net


def network_checkpoint(net: Network, meta: Optional[dict] = None, extra: Optional[dict] = None) -> Checkpoint:
    meta = dict(meta or {})
    meta["schedule"] = net.schedule.state_dict()
    arrays = state_dict(net)
    arrays.update(extra or {})
    return Checkpoint(net.spec.to_dict(), arrays, meta)


def convert_network(net: Network, verify: bool = True, report: Optional[list] = None) -> Network:
    """Binarise every SAL layer; returns a new Network with the converted spec."""
    from .convert import convert_module

    clone = build_model(net.spec, Rng(0), TemperatureSchedule(**net.schedule.state_dict()))
    load_state_dict(clone, state_dict(net))
    converted = convert_module(clone, verify=verify, report=report)
    return Network(converted.layers, converted_spec(net.spec), converted.schedule)
