"""Standard layers, their differentiable primitives, and the SGD optimizer."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from . import _kernels
from .tensor import Rng, Tensor, as_tensor, get_default_dtype, matmul


def same_padding(s: int) -> int:
    return (s - 1) // 2


def _check_conv_args(x: Tensor, w: Tensor, stride: int):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, H, W) input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d expects (D, C, S, S) weights, got shape {w.shape}")
    if w.shape[2] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"empty spatial extent {x.shape[2:]}")


_CHUNK_BYTES = 1 << 22


def _flush_negligible(wmat: np.ndarray) -> np.ndarray:
    """Zero weights below eps**2 of the largest one.

    A sharp attention mask leaves weights around 1e-30; their products with
    small gradients are subnormal, which slows BLAS down several times. Terms
    that far below the dominant weight cannot change a rounded sum.
    """
    info = np.finfo(wmat.dtype)
    a = np.abs(wmat)
    peak = a.max(initial=0.0)
    small = a < max(info.tiny, peak * info.eps * info.eps)
    small &= a > 0
    if small.any():
        wmat = np.where(small, 0, wmat).astype(wmat.dtype, copy=False)
    return wmat


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Zero-padded 2-D correlation via im2col + matrix products.

    With the default padding of (S - 1) // 2 and stride 1, the output has the
    same spatial size as the input. The batch is processed in slices whose
    patch matrix stays cache-sized; backward rebuilds the patches instead of
    keeping them.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(x, w, stride)
    d, c, s, _ = w.shape
    pad = same_padding(s) if padding is None else padding
    xd = np.ascontiguousarray(x.data)
    n, _, h, wd = xd.shape
    ho, wo = _kernels.out_size(h, s, stride, pad), _kernels.out_size(wd, s, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape[2:]} is too small for kernel {s} with padding {pad}")
    k = s * s * c
    # channels-last weight matrix matching the (u, v, c) column order
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1).reshape(d, k), dtype=xd.dtype)
    wmat = _flush_negligible(wmat)
    step = max(1, _CHUNK_BYTES // max(ho * wo * k * xd.itemsize, 1))
    out = np.empty((n, d, ho, wo), dtype=xd.dtype)
    for lo in range(0, n, step):
        cols = _kernels.im2col(xd[lo : lo + step], s, stride, pad).reshape(-1, k)
        m = len(cols) // (ho * wo)
        out[lo : lo + m] = (cols @ wmat.T).reshape(m, ho, wo, d).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, d, 1, 1).astype(out.dtype, copy=False)

    def backward(g):
        dx = np.empty(xd.shape, dtype=xd.dtype) if x.requires_grad else None
        dw = np.zeros((d, k), dtype=xd.dtype) if w.requires_grad else None
        for lo in range(0, n, step):
            gs = g[lo : lo + step]
            m = len(gs)
            g2 = np.ascontiguousarray(gs.transpose(0, 2, 3, 1)).reshape(m * ho * wo, d)
            if dx is not None:
                dcols = (g2 @ wmat).reshape(m, ho, wo, s, s, c)
                dx[lo : lo + m] = _kernels.col2im(dcols, m, c, h, wd, stride, pad)
            if dw is not None:
                cols = _kernels.im2col(xd[lo : lo + m], s, stride, pad).reshape(-1, k)
                dw += g2.T @ cols
        if dw is not None:
            dw = dw.reshape(d, s, s, c).transpose(0, 3, 1, 2)
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(out, parents, backward, "conv2d")


def conv2d_reference(x, w, bias=None, stride: int = 1, padding: Optional[int] = None) -> np.ndarray:
    """Direct nested-loop convolution on plain arrays; the oracle for :func:`conv2d`."""
    x = np.ascontiguousarray(getattr(x, "data", x))
    w = np.ascontiguousarray(getattr(w, "data", w), dtype=x.dtype)
    _check_conv_args(Tensor(x), Tensor(w), stride)
    pad = same_padding(w.shape[2]) if padding is None else padding
    y = _kernels.conv2d_direct(x, w, stride, pad)
    if bias is not None:
        y = y + np.asarray(getattr(bias, "data", bias)).reshape(1, -1, 1, 1)
    return y


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ weight.T + bias, with weight stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = matmul(x, weight.transpose())
    return y + bias if bias is not None else y


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over every axis except axis 1.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm: input {x.shape} incompatible with {gamma.shape[0]} features")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    a = x.data
    if training:
        mu = a.mean(axis=axes)
        var = a.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m = a.size // a.shape[1]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._make(out.astype(a.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def avg_pool2d(x: Tensor, kernel: Optional[int] = None) -> Tensor:
    """Average pooling with stride == kernel; ``kernel=None`` pools globally to (N, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"avg_pool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if kernel is None:
        return x.mean(axis=(2, 3))
    if h % kernel or w % kernel:
        raise ValueError(f"spatial size {(h, w)} not divisible by pooling kernel {kernel}")
    return x.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = np.asarray((lse - z[np.arange(n), labels]).mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return Tensor._make(loss, (logits,), backward, "softmax_xent")


# --------------------------------------------------------------------------
# layers


class Module:
    training = True

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def buffers(self, prefix: str = "") -> Iterator:
        """Non-trainable arrays that belong in a checkpoint (e.g. running stats)."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.buffers(prefix + name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x):
        return self.forward(x)


def kaiming_normal(rng: Rng, shape, fan_in: int, dtype=None) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape, dtype=dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 bias: bool = False, rng: Optional[Rng] = None, padding: Optional[int] = None):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        rng = rng or Rng(0)
        self.stride = stride
        self.padding = same_padding(kernel_size) if padding is None else int(padding)
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {padding}")
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=get_default_dtype()), requires_grad=True) if bias else None

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Optional[Rng] = None):
        rng = rng or Rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=get_default_dtype()), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features: int, momentum: float = 0.9, eps: float = 1e-5):
        dtype = get_default_dtype()
        self.gamma = Tensor(np.ones(features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class AvgPool(Module):
    def __init__(self, kernel: Optional[int] = None):
        self.kernel = kernel

    def forward(self, x):
        return avg_pool2d(x, self.kernel)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


# --------------------------------------------------------------------------
# optimisation


@dataclass
class SgdConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    drop_every: int = 100
    drop_factor: float = 10.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.drop_every < 1:
            raise ValueError(f"drop_every must be >= 1, got {self.drop_every}")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.drop_factor ** (-(epoch // self.drop_every))


class SGD:
    """Momentum SGD: v <- mu * v + g ; p <- p - lr * v.

    Parameters listed in ``no_decay`` are exempt from weight decay.
    """

    def __init__(self, params, cfg: SgdConfig, no_decay=()):
        self.params = list(params)
        self.cfg = cfg
        self._no_decay = {id(p) for p in no_decay}
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, epoch: int) -> float:
        lr = self.cfg.lr(epoch)
        sgd_step(self.params, [p.grad for p in self.params], self.cfg, epoch,
                 self.velocity, self._no_decay)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params, grads, cfg: SgdConfig, epoch: int, velocity=None, no_decay=frozenset()) -> None:
    """In-place SGD update; ``velocity`` buffers are updated when momentum is used."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    lr = cfg.lr(epoch)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if cfg.weight_decay and id(p) not in no_decay:
            g = g + cfg.weight_decay * p.data
        if velocity is not None and cfg.momentum:
            v = velocity[i]
            v *= cfg.momentum
            v += g
            g = v
        p.data -= (lr * g).astype(p.dtype, copy=False)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class ResidualBlock(Module):
    """Two conv-like layers with batch norm, plus an identity or 1x1 projection shortcut."""

    def __init__(self, conv1: Module, bn1: BatchNorm, conv2: Module, bn2: BatchNorm,
                 shortcut: Optional[Module] = None, shortcut_bn: Optional[BatchNorm] = None):
        self.conv1, self.bn1 = conv1, bn1
        self.conv2, self.bn2 = conv2, bn2
        self.shortcut, self.shortcut_bn = shortcut, shortcut_bn

    def forward(self, x):
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        sc = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return relu(out + sc)
