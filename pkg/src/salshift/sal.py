"""Shift Attention Layer: a convolution whose weights are gated by an annealed,
per-slice softmax mask.

Each (output, input) channel pair owns an S x S slice of attention logits.
The slice is divided by its population standard deviation, scaled by the
current temperature and passed through a softmax; the convolution then uses
``W * mask``. As the temperature decreases the mask approaches one-hot, at
which point the layer is a shift layer in disguise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import Conv2d, Module, conv2d
from .tensor import Rng, Tensor, as_tensor

STD_EPS = 1e-8


@dataclass
class TemperatureSchedule:
    """Geometric annealing t <- max(alpha * t, tf), one step per iteration."""

    t0: float = 6.7
    tf: float = 0.02
    alpha: float = 0.99994
    t: Optional[float] = None

    def __post_init__(self):
        if self.t0 <= 0 or self.tf <= 0:
            raise ValueError(f"temperatures must be positive, got t0={self.t0}, tf={self.tf}")
        if self.tf > self.t0:
            raise ValueError(f"final temperature {self.tf} exceeds initial {self.t0}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.t is None:
            self.t = float(self.t0)

    @classmethod
    def from_steps(cls, t0: float, tf: float, total_steps: int) -> "TemperatureSchedule":
        return cls(t0, tf, alpha_for(t0, tf, total_steps))

    def step(self) -> float:
        return anneal(self)

    def state_dict(self) -> dict:
        return {"t0": self.t0, "tf": self.tf, "alpha": self.alpha, "t": self.t}


def anneal(sched: TemperatureSchedule) -> float:
    sched.t = max(sched.alpha * sched.t, sched.tf)
    return sched.t


def alpha_for(t0: float, tf: float, total_steps: int) -> float:
    """Decay factor that takes t0 to tf in exactly ``total_steps`` multiplications."""
    if not t0 > tf > 0:
        raise ValueError(f"need t0 > tf > 0, got t0={t0}, tf={tf}")
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    return math.exp(math.log(tf / t0) / total_steps)


def attention_mask(A, t: float, literal_scaling: bool = False, eps: float = STD_EPS) -> Tensor:
    """Soft mask of the same shape as ``A`` (D, C, S, S); each slice sums to 1.

    Logits are divided by ``t`` so small temperatures sharpen the mask. With
    ``literal_scaling=True`` they are multiplied by ``t`` instead.
    """
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    A = as_tensor(A)
    d, c, s, s2 = A.shape
    flat = A.reshape(d, c, s * s2)
    normed = flat / flat.std(axis=-1, keepdims=True, eps=eps)
    logits = normed * t if literal_scaling else normed * (1.0 / t)
    return logits.softmax(axis=-1).reshape(d, c, s, s2)


def topk_positions(A: np.ndarray, k: int = 1) -> np.ndarray:
    """Indices of the k largest logits per slice, shape (D, C, k).

    Ties go to the lowest linear index; the result is ordered by rank.
    """
    d, c = A.shape[:2]
    flat = np.asarray(A).reshape(d, c, -1)
    if not 1 <= k <= flat.shape[-1]:
        raise ValueError(f"k must lie in [1, {flat.shape[-1]}], got {k}")
    # stable sort on the negated values keeps lower indices first among equals
    return np.argsort(-flat, axis=-1, kind="stable")[..., :k]


def hard_mask(A: np.ndarray, k: int = 1, dtype=None) -> np.ndarray:
    """Binary mask keeping the top-k logits of every slice."""
    A = np.asarray(A)
    pos = topk_positions(A, k)
    d, c = A.shape[:2]
    m = np.zeros((d, c, A.shape[2] * A.shape[3]), dtype=dtype or A.dtype)
    np.put_along_axis(m, pos, 1, axis=-1)
    return m.reshape(A.shape)


def init_attention(rng: Rng, shape, mode: str = "uniform") -> np.ndarray:
    """Uniform [0, 1) logits; ``mode='center'`` also lifts each slice centre to the slice max."""
    A = rng.uniform(0.0, 1.0, shape)
    if mode == "uniform":
        return A
    if mode == "center":
        s = shape[2]
        A[:, :, s // 2, s // 2] = A.reshape(shape[0], shape[1], -1).max(axis=-1)
        return A
    raise ValueError(f"unknown attention init mode {mode!r}")


class SalLayer(Module):
    """Convolution trained jointly with an attention tensor of the same shape.

    ``k`` is the number of weights per slice kept at binarisation time (1 for
    a plain shift layer, 2 for the two-weight variant). It does not change
    the soft mask.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        schedule: Optional[TemperatureSchedule] = None,
        k: int = 1,
        bias: bool = False,
        init: str = "uniform",
        literal_scaling: bool = False,
        rng: Optional[Rng] = None,
        padding: Optional[int] = None,
    ):
        rng = rng or Rng(0)
        if not 1 <= k <= kernel_size * kernel_size:
            raise ValueError(f"k must lie in [1, {kernel_size * kernel_size}], got {k}")
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, bias=bias, rng=rng, padding=padding)
        self.attention = Tensor(init_attention(rng, self.conv.weight.shape, init), requires_grad=True)
        self.schedule = schedule if schedule is not None else TemperatureSchedule()
        self.k = k
        self.literal_scaling = literal_scaling
        self.hard = False

    @property
    def kernel_size(self) -> int:
        return self.conv.kernel_size

    @property
    def stride(self) -> int:
        return self.conv.stride

    @property
    def padding(self) -> int:
        return self.conv.padding

    def mask(self, t: Optional[float] = None) -> Tensor:
        if self.hard:
            return Tensor(hard_mask(self.attention.data, self.k))
        return attention_mask(self.attention, self.schedule.t if t is None else t, self.literal_scaling)

    def masked_weight(self, t: Optional[float] = None) -> Tensor:
        return self.conv.weight * self.mask(t)

    def forward(self, x):
        return conv2d(x, self.masked_weight(), self.conv.bias, self.conv.stride, self.conv.padding)

    def harden(self, flag: bool = True) -> "SalLayer":
        """Switch the mask to its binarised top-k form (or back)."""
        self.hard = flag
        return self


def sal_forward(x, layer: SalLayer) -> Tensor:
    return layer(x)
