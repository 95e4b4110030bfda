"""Binarisation of trained attention layers and model cost accounting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .nn import (AvgPool, BatchNorm, Conv2d, Flatten, Linear, Module, ReLU, ResidualBlock, Sequential,
                 conv2d_reference)
from .sal import SalLayer, hard_mask, topk_positions
from .shift import ShiftConv, ShiftLayer, ShiftTable, SparseShiftLayer, shift_forward
from .tensor import Rng, Tensor


class EquivalenceError(AssertionError):
    """A converted layer does not reproduce its hardened attention layer."""


def binarize(layer: SalLayer) -> Union[ShiftLayer, SparseShiftLayer]:
    """Keep the top-k attention logits per slice and drop everything else.

    k == 1 yields a per-pair :class:`ShiftLayer`; larger k yields a
    :class:`SparseShiftLayer` whose kept positions are stored in ascending
    order, the same order a dense convolution visits them. Kept weights are
    the raw conv weights.
    """
    A = layer.attention.data
    W = layer.conv.weight.data
    d, c, s, _ = W.shape
    pos = np.sort(topk_positions(A, layer.k), axis=-1)
    weights = np.take_along_axis(W.reshape(d, c, s * s), pos, axis=-1)
    bias = None if layer.conv.bias is None else layer.conv.bias.data.copy()
    if layer.k == 1:
        return ShiftLayer(ShiftTable(pos[..., 0], s), np.ascontiguousarray(weights[..., 0]), bias, layer.stride,
                          layer.padding)
    return SparseShiftLayer(pos, weights, s, bias, layer.stride, layer.padding)


def hardened_weight(layer: SalLayer) -> np.ndarray:
    W = layer.conv.weight.data
    return W * hard_mask(layer.attention.data, layer.k, W.dtype)


def verify_equivalence(sal: SalLayer, shifted, trials: int = 3, seed: int = 0,
                       input_hw: Tuple[int, int] = (8, 8), batch: int = 2) -> float:
    """Max |soft SAL - converted| over random unit-normal inputs.

    Independently of that gap, raises :class:`EquivalenceError` unless the
    hardened SAL (dense nested-loop convolution) matches the converted layer
    bit for bit.
    """
    c = sal.conv.weight.shape[1]
    expected_c = shifted.positions.shape[1] if isinstance(shifted, SparseShiftLayer) else shifted.table.in_channels
    if c != expected_c:
        raise ValueError(f"shape mismatch: SAL has {c} input channels, shift layer {expected_c}")
    dense_hard = hardened_weight(sal)
    if not np.array_equal(dense_hard, shifted.dense_weight().astype(dense_hard.dtype)):
        raise EquivalenceError("hardened SAL weights differ from the converted layer")
    rng = Rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(batch, c) + tuple(input_hw), dtype=dense_hard.dtype)
        y_shift = shift_forward(x, shifted)
        y_hard = conv2d_reference(x, dense_hard, sal.conv.bias, stride=sal.stride, padding=sal.padding)
        if not np.array_equal(y_hard, y_shift):
            raise EquivalenceError(
                f"hardened SAL and converted layer disagree (max diff {np.abs(y_hard - y_shift).max():.3g})")
        y_soft = sal(Tensor(x)).data
        worst = max(worst, float(np.abs(y_soft - y_shift).max()))
    return worst


class ShiftInference(Module):
    """Inference-only wrapper that runs a converted layer with the fused kernel."""

    def __init__(self, layer: Union[ShiftLayer, SparseShiftLayer]):
        self.layer = layer

    @property
    def kernel_size(self) -> int:
        return self.layer.s

    @property
    def stride(self) -> int:
        return self.layer.stride

    @property
    def padding(self) -> int:
        return self.layer.padding

    def forward(self, x):
        return Tensor(shift_forward(x, self.layer))


def convert_module(module: Module, verify: bool = True, report: Optional[list] = None) -> Module:
    """Return ``module`` with every :class:`SalLayer` replaced by its binarised form.

    Containers are rebuilt in place; with ``verify`` each conversion is checked.
    """
    if isinstance(module, SalLayer):
        shifted = binarize(module)
        if verify:
            gap = verify_equivalence(module, shifted)
            if report is not None:
                report.append(gap)
        return ShiftInference(shifted)
    for name, value in list(vars(module).items()):
        if isinstance(value, Module):
            setattr(module, name, convert_module(value, verify, report))
        elif isinstance(value, list) and any(isinstance(v, Module) for v in value):
            setattr(module, name, [convert_module(v, verify, report) if isinstance(v, Module) else v
                                   for v in value])
    return module


# --------------------------------------------------------------------------
# cost accounting


@dataclass
class LayerCost:
    name: str
    category: str
    params: int
    macs: int
    shift_index_bits: int = 0
    kernel_size: int = 1
    output_shape: Tuple[int, ...] = ()


@dataclass
class CostReport:
    params: int = 0
    flops: int = 0
    shift_index_bits: int = 0
    activation_bytes: int = 0
    layers: List[LayerCost] = field(default_factory=list)

    @property
    def macs(self) -> int:
        return self.flops // 2

    def by_category(self) -> dict:
        out: dict = {}
        for layer in self.layers:
            entry = out.setdefault(layer.category, {"params": 0, "macs": 0, "shift_index_bits": 0})
            entry["params"] += layer.params
            entry["macs"] += layer.macs
            entry["shift_index_bits"] += layer.shift_index_bits
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macs"] = self.macs
        d["by_category"] = self.by_category()
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def table(self) -> str:
        lines = [f"{'layer':<28}{'kind':<12}{'params':>10}{'MACs':>14}{'idx bits':>10}"]
        for lc in self.layers:
            lines.append(f"{lc.name:<28}{lc.category:<12}{lc.params:>10}{lc.macs:>14}{lc.shift_index_bits:>10}")
        lines.append(f"{'total':<40}{self.params:>10}{self.macs:>14}{self.shift_index_bits:>10}")
        lines.append(f"FLOPs {self.flops}  peak activations {self.activation_bytes} B/sample")
        return "\n".join(lines)


def _index_bits_per_entry(s: int) -> int:
    return math.ceil(math.log2(s * s)) if s > 1 else 0


def _conv_out(shape, s, stride, pad):
    c, h, w = shape
    return (h + 2 * pad - s) // stride + 1, (w + 2 * pad - s) // stride + 1


class _Profiler:
    def __init__(self, bytes_per_value: int):
        self.report = CostReport()
        self.bpv = bytes_per_value
        self.peak = 0

    def add(self, name, category, params, macs, bits, s, out_shape, live_values):
        self.report.layers.append(LayerCost(name, category, int(params), int(macs), int(bits), s, tuple(out_shape)))
        self.peak = max(self.peak, int(live_values))

    def walk(self, module: Module, shape: tuple, name: str) -> tuple:
        size = int(np.prod(shape))
        if isinstance(module, Sequential):
            for i, layer in enumerate(module.layers):
                shape = self.walk(layer, shape, f"{name}{i}")
            return shape
        if isinstance(module, ResidualBlock):
            inner = self.walk(module.conv1, shape, name + ".conv1")
            inner = self.walk(module.bn1, inner, name + ".bn1")
            inner = self.walk(module.conv2, inner, name + ".conv2")
            inner = self.walk(module.bn2, inner, name + ".bn2")
            if module.shortcut is not None:
                self.walk(module.shortcut, shape, name + ".shortcut")
                self.walk(module.shortcut_bn, inner, name + ".shortcut_bn")
            self.peak = max(self.peak, size + 2 * int(np.prod(inner)))
            return inner
        if isinstance(module, (Conv2d, SalLayer)):
            conv = module.conv if isinstance(module, SalLayer) else module
            d, c, s, _ = conv.weight.shape
            ho, wo = _conv_out(shape, s, conv.stride, conv.padding)
            params = d * c * s * s + (d if conv.bias is not None else 0)
            category = "sal" if isinstance(module, SalLayer) else "conv"
            self.add(name, category, params, d * c * s * s * ho * wo, 0, s, (d, ho, wo), size + d * ho * wo)
            if isinstance(module, SalLayer):
                self.add(name + ".attention", "attention", d * c * s * s, 0, 0, s, (d, ho, wo), 0)
            return (d, ho, wo)
        if isinstance(module, (ShiftConv, ShiftInference)):
            if isinstance(module, ShiftConv):
                layer = module.to_shift_layer()
            else:
                layer = module.layer
            if isinstance(layer, SparseShiftLayer):
                d, c, k = layer.positions.shape
                bits = layer.positions.size * _index_bits_per_entry(layer.s)
            else:
                d, c, k = layer.table.out_channels, layer.table.in_channels, 1
                bits = layer.table.index_bits()
            s = layer.s
            ho, wo = _conv_out(shape, s, layer.stride, layer.padding)
            params = k * d * c + (d if layer.bias is not None else 0)
            self.add(name, "shift", params, k * d * c * ho * wo, bits, s, (d, ho, wo), size + d * ho * wo)
            return (d, ho, wo)
        if isinstance(module, Linear):
            out_f, in_f = module.weight.shape
            self.add(name, "linear", out_f * in_f + out_f, out_f * in_f, 0, 1, (out_f,), size + out_f)
            return (out_f,)
        if isinstance(module, BatchNorm):
            c = shape[0]
            self.add(name, "bn", 2 * c, size, 0, 1, shape, 2 * size)
            return shape
        if isinstance(module, ReLU):
            return shape
        if isinstance(module, Flatten):
            return (size,)
        if isinstance(module, AvgPool):
            c, h, w = shape
            if module.kernel is None:
                return (c,)
            return (c, h // module.kernel, w // module.kernel)
        raise ValueError(f"unknown layer kind {type(module).__name__}")


def profile(model: Module, input_shape: Tuple[int, int, int], bytes_per_value: int = 4) -> CostReport:
    """Parameter, MAC and shift-index accounting for one (C, H, W) sample.

    Convolutions count D*C*S*S*Ho*Wo MACs, shift layers D*C*Ho*Wo (k times
    that for k kept weights), linear layers in*out and batch norm one MAC per
    element. FLOPs are twice the MACs. Attention logits are listed under
    their own category and are not part of the inference parameter count.
    """
    prof = _Profiler(bytes_per_value)
    prof.walk(model, tuple(input_shape), "")
    rep = prof.report
    rep.params = sum(lc.params for lc in rep.layers if lc.category != "attention")
    rep.flops = 2 * sum(lc.macs for lc in rep.layers)
    rep.shift_index_bits = sum(lc.shift_index_bits for lc in rep.layers)
    rep.activation_bytes = prof.peak * bytes_per_value
    return rep
