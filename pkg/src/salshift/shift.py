"""Shift layers: a per-connection spatial shift followed by a 1x1 convolution.

A shift table stores, for every (output d, input c) pair, which position of
an S x S kernel neighbourhood is read. Position ``p`` corresponds to kernel
tap ``(p // S, p % S)`` and spatial offset ``(p // S - pad, p % S - pad)``.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import _kernels
from .nn import Module, conv2d, conv2d_reference, same_padding
from .tensor import Rng, Tensor, get_default_dtype


@dataclass
class ShiftTable:
    """Kernel position kept for every connection.

    ``granularity='pair'``: entries has shape (D, C).
    ``granularity='channel'``: entries has shape (C,) and is shared by all
    ``out_channels`` outputs.
    """

    entries: np.ndarray
    s: int
    granularity: str = "pair"
    out_channels: Optional[int] = None

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.int64)
        if self.s < 1 or self.s % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.s}")
        if self.granularity == "pair":
            if self.entries.ndim != 2:
                raise ValueError(f"per-pair table must be 2-d, got shape {self.entries.shape}")
            self.out_channels = self.entries.shape[0]
        elif self.granularity == "channel":
            if self.entries.ndim != 1 or self.out_channels is None:
                raise ValueError("per-channel table needs 1-d entries and out_channels")
        else:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.entries.size and (self.entries.min() < 0 or self.entries.max() >= self.s * self.s):
            raise ValueError(f"table entries must lie in [0, {self.s * self.s})")

    @property
    def in_channels(self) -> int:
        return self.entries.shape[-1]

    def as_pairs(self) -> np.ndarray:
        if self.granularity == "pair":
            return self.entries
        return np.ascontiguousarray(np.broadcast_to(self.entries, (self.out_channels, self.in_channels)))

    def offsets(self) -> np.ndarray:
        """Spatial offsets (..., 2) read by each entry."""
        pad = same_padding(self.s)
        u, v = np.divmod(self.entries, self.s)
        return np.stack([u - pad, v - pad], axis=-1)

    def index_bits(self) -> int:
        per_entry = math.ceil(math.log2(self.s * self.s)) if self.s > 1 else 0
        return int(self.entries.size) * per_entry


def one_hot_positions(positions: np.ndarray, s: int, dtype=None) -> np.ndarray:
    """(D, C[, k]) positions -> (D, C, S, S) indicator (k positions summed)."""
    positions = np.asarray(positions)
    if positions.ndim == 2:
        positions = positions[..., None]
    d, c, k = positions.shape
    m = np.zeros((d, c, s * s), dtype=dtype or get_default_dtype())
    for j in range(k):
        np.put_along_axis(m, positions[..., j : j + 1], 1, axis=-1)
    return m.reshape(d, c, s, s)


@dataclass
class ShiftLayer:
    """Inference-time shift layer (immutable once built)."""

    table: ShiftTable
    w_tilde: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.padding is None:
            self.padding = same_padding(self.table.s)
        self.w_tilde = np.ascontiguousarray(self.w_tilde)
        expected = (self.table.out_channels, self.table.in_channels)
        if self.w_tilde.shape != expected:
            raise ValueError(f"w_tilde shape {self.w_tilde.shape} does not match table {expected}")

    @property
    def s(self) -> int:
        return self.table.s

    def dense_weight(self) -> np.ndarray:
        """Equivalent (D, C, S, S) convolution weights: w_tilde at the table position, zero elsewhere."""
        return one_hot_positions(self.table.as_pairs(), self.s, self.w_tilde.dtype) * self.w_tilde[:, :, None, None]

    def __call__(self, x):
        return shift_forward(x, self)


@dataclass
class SparseShiftLayer:
    """k kept weights per slice, stored as (position, weight) pairs of shape (D, C, k)."""

    positions: np.ndarray
    weights: np.ndarray
    s: int
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.padding is None:
            self.padding = same_padding(self.s)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.int64)
        self.weights = np.ascontiguousarray(self.weights)
        if self.positions.shape != self.weights.shape or self.positions.ndim != 3:
            raise ValueError("positions and weights must share a (D, C, k) shape")

    @property
    def k(self) -> int:
        return self.positions.shape[2]

    def dense_weight(self) -> np.ndarray:
        d, c, k = self.positions.shape
        w = np.zeros((d, c, self.s * self.s), dtype=self.weights.dtype)
        np.put_along_axis(w, self.positions, self.weights, axis=-1)
        return w.reshape(d, c, self.s, self.s)

    def __call__(self, x):
        return shift_forward(x, self)


def _input_array(x, c_expected: int) -> np.ndarray:
    x = np.ascontiguousarray(getattr(x, "data", x))
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
    if x.shape[1] != c_expected:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {c_expected}")
    return x


def shift_forward(x, layer, path: str = "auto") -> np.ndarray:
    """Run a shift layer on an (N, C, H, W) array.

    ``path='pair'`` uses the fused per-connection gather kernel. For
    per-channel tables ``path='channel'`` (the ``auto`` choice) shifts every
    input map once and finishes with a plain 1x1 convolution.
    """
    if isinstance(layer, SparseShiftLayer):
        x = _input_array(x, layer.positions.shape[1])
        w = layer.weights.astype(x.dtype, copy=False)
        y = _kernels.sparse_gather(x, layer.positions, w, layer.s, layer.stride, layer.padding).astype(x.dtype)
    else:
        table = layer.table
        x = _input_array(x, table.in_channels)
        w = layer.w_tilde.astype(x.dtype, copy=False)
        pad = layer.padding
        if path == "auto":
            path = "channel" if table.granularity == "channel" else "pair"
        if path == "channel":
            if table.granularity != "channel":
                raise ValueError("the per-channel path needs a per-channel table")
            shifted = _kernels.shift_channels(x, table.entries, table.s, layer.stride, pad)
            # float64 sums, rounded once, like the fused kernels
            y = np.einsum("dc,nchw->ndhw", w.astype(np.float64), shifted.astype(np.float64), optimize=True)
            y = np.ascontiguousarray(y.astype(x.dtype))
        elif path == "pair":
            y = _kernels.shift_gather(x, table.as_pairs(), w, table.s, layer.stride, pad).astype(x.dtype)
        else:
            raise ValueError(f"unknown path {path!r}")
    if layer.bias is not None:
        y = y + np.asarray(layer.bias, dtype=y.dtype).reshape(1, -1, 1, 1)
    return y


def largest_remainder(proportions: Sequence[float], total: int, rng: Optional[Rng] = None) -> np.ndarray:
    """Integer counts summing to ``total`` with |count - p * total| < 1 for every entry.

    Leftover units go to the largest fractional parts; ties are broken by a
    seeded random priority (or by index when no rng is given).
    """
    p = np.asarray(proportions, dtype=np.float64)
    quotas = p * total
    counts = np.floor(quotas).astype(np.int64)
    # float noise can leave quotas like 4.9999999; treat near-integers as exact
    near = np.isclose(quotas, np.round(quotas), rtol=0, atol=1e-9)
    counts[near] = np.round(quotas[near]).astype(np.int64)
    remainders = np.where(near, 0.0, quotas - counts)
    left = total - int(counts.sum())
    if left > 0:
        priority = rng.random(len(p)) if rng is not None else -np.arange(len(p), dtype=float)
        order = np.lexsort((-priority, -remainders))
        counts[order[:left]] += 1
    return counts


def predetermined_table(C: int, D: int, S: int, proportions=None, granularity: str = "channel",
                        seed: int = 0) -> ShiftTable:
    """Fixed (untrained) shift table whose position histogram follows ``proportions``.

    ``proportions=None`` spreads shifts uniformly over the S*S positions.
    """
    n_pos = S * S
    if proportions is None:
        proportions = np.full(n_pos, 1.0 / n_pos)
    proportions = np.asarray(proportions, dtype=np.float64)
    if proportions.shape != (n_pos,):
        raise ValueError(f"need {n_pos} proportions for S={S}, got {proportions.shape}")
    if np.any(proportions < 0) or abs(proportions.sum() - 1.0) > 1e-9:
        raise ValueError("proportions must be non-negative and sum to 1")
    rng = Rng(seed)
    total = C if granularity == "channel" else D * C
    counts = largest_remainder(proportions, total, rng)
    entries = np.repeat(np.arange(n_pos), counts)
    entries = entries[rng.permutation(total)]
    if granularity == "channel":
        return ShiftTable(entries, S, "channel", out_channels=D)
    return ShiftTable(entries.reshape(D, C), S, "pair")


class ShiftConv(Module):
    """Trainable shift layer with a fixed table: only the 1x1 weights learn."""

    def __init__(self, table: ShiftTable, stride: int = 1, rng: Optional[Rng] = None,
                 padding: Optional[int] = None):
        rng = rng or Rng(0)
        self.table = table
        self.stride = stride
        self.padding = same_padding(table.s) if padding is None else int(padding)
        d, c = table.out_channels, table.in_channels
        self.w_tilde = Tensor(rng.normal(0.0, math.sqrt(2.0 / c), (d, c)), requires_grad=True)
        self._onehot = None

    @property
    def kernel_size(self) -> int:
        return self.table.s

    def forward(self, x):
        if self._onehot is None or self._onehot.dtype != self.w_tilde.dtype:
            self._onehot = one_hot_positions(self.table.as_pairs(), self.table.s, self.w_tilde.dtype)
        d, c = self.w_tilde.shape
        dense = self.w_tilde.reshape(d, c, 1, 1) * Tensor(self._onehot)
        return conv2d(x, dense, None, self.stride, self.padding)

    def to_shift_layer(self) -> ShiftLayer:
        return ShiftLayer(self.table, self.w_tilde.data.copy(), None, self.stride, self.padding)


# --------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchRow:
    shape: str
    kernel: str
    macs: int
    ns_per_call: float


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["shape", "kernel", "macs", "ns_per_call"])
            for r in self.rows:
                writer.writerow([r.shape, r.kernel, r.macs, f"{r.ns_per_call:.0f}"])

    def ratio(self, shape: str) -> float:
        macs = {r.kernel: r.macs for r in self.rows if r.shape == shape}
        return macs["conv"] / macs["shift"]


def shift_bench(shapes, repetitions: int = 5, seed: int = 0) -> BenchReport:
    """Time dense conv against the shift kernel on identical (N, C, D, H, W, S) shapes.

    MAC counts assume stride 1: conv does N*D*C*S*S*H*W, shift N*D*C*H*W.
    """
    rng = Rng(seed)
    report = BenchReport()
    for n, c, d, h, w, s in shapes:
        label = f"{n}x{c}x{d}x{h}x{w}x{s}"
        x = rng.normal(size=(n, c, h, w))
        table = ShiftTable(rng.integers(0, s * s, (d, c)), s)
        layer = ShiftLayer(table, rng.normal(size=(d, c)))
        dense = layer.dense_weight()
        candidates = {
            "conv": (lambda: conv2d(x, dense), n * d * c * s * s * h * w),
            "shift": (lambda: shift_forward(x, layer), n * d * c * h * w),
        }
        for kernel, (fn, macs) in candidates.items():
            fn()  # warm-up, includes JIT compilation
            start = time.perf_counter_ns()
            for _ in range(repetitions):
                fn()
            elapsed = (time.perf_counter_ns() - start) / max(repetitions, 1)
            report.rows.append(BenchRow(label, kernel, macs, elapsed))
    return report


def reference_output(x, layer) -> np.ndarray:
    """Dense nested-loop convolution with the layer's densified weights."""
    y = conv2d_reference(x, layer.dense_weight().astype(np.asarray(getattr(x, "data", x)).dtype),
                         stride=layer.stride, padding=layer.padding)
    if layer.bias is not None:
        y = y + np.asarray(layer.bias).reshape(1, -1, 1, 1)
    return y
