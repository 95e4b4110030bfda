"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

The graph is dynamic: every differentiable operation records its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks the recorded graph in reverse topological order exactly once.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_default_dtype = np.dtype(np.float32)
_debug = os.environ.get("SALSHIFT_DEBUG", "") not in ("", "0")


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Select float32 (training) or float64 (gradient checks)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug(flag: bool) -> None:
    """In debug mode every op checks its output for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Rng:
    """Seeded generator backed by numpy's PCG64.

    PCG64 produces the same stream on every platform for a given seed, and
    its state round-trips through JSON via :attr:`state`.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def uniform(self, low=0.0, high=1.0, size=None, dtype=None):
        out = self._gen.uniform(low, high, size)
        return np.asarray(out, dtype=dtype or _default_dtype)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=None):
        out = self._gen.normal(loc, scale, size)
        return np.asarray(out, dtype=dtype or _default_dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


class Tensor:
    """A dense array with an optional gradient and a link to its creator."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable] = None,
        _op: str = "",
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        data = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        if _debug and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values produced by op {_op or 'leaf'!r}")

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op) -> "Tensor":
        track = any(p.requires_grad for p in parents)
        return Tensor(
            data,
            requires_grad=track,
            dtype=data.dtype if data.dtype.kind == "f" else None,
            _parents=tuple(parents) if track else (),
            _backward=backward if track else None,
            _op=op,
        )

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # -- reverse mode -------------------------------------------------------
    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Without an explicit seed the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.shape).astype(parent.dtype, copy=False)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic -------------------------------------------
    def _check_broadcast(self, other: "Tensor", op: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ValueError(f"{op}: shapes {self.shape} and {other.shape} are not broadcast-compatible") from None

    def __add__(self, other):
        other = self._lift(other)
        self._check_broadcast(other, "add")
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        self._check_broadcast(other, "sub")
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        self._check_broadcast(other, "mul")
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        self._check_broadcast(other, "div")
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        out = a**exponent
        return Tensor._make(out, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary functions ----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),), "relu")

    # -- shape manipulation -------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose"
        )

    @property
    def T(self):
        return self.transpose()

    # -- reductions ---------------------------------------------------------
    def _reduced_count(self, axes: Tuple[int, ...]) -> int:
        n = 1
        for a in axes:
            n *= self.shape[a]
        if n == 0:
            raise ValueError(f"empty reduction over axes {axes} of shape {self.shape}")
        return n

    def sum(self, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, self.ndim)
        self._reduced_count(axes)
        shape = self.shape
        out = self.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, self.ndim)
        n = self._reduced_count(axes)
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims: bool = False):
        axes = _normalize_axes(axis, self.ndim)
        self._reduced_count(axes)
        a = self.data
        out_k = a.max(axis=axes, keepdims=True)
        mask = a == out_k
        mask = mask / mask.sum(axis=axes, keepdims=True)
        out = out_k if keepdims else np.squeeze(out_k, axis=axes)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (g * mask,)

        return Tensor._make(np.asarray(out), (self,), backward, "max")

    def std(self, axis=None, keepdims: bool = False, eps: float = 0.0):
        """Population standard deviation (divide by n).

        ``eps`` is added to the result; it is not part of the square root.
        """
        axes = _normalize_axes(axis, self.ndim)
        n = self._reduced_count(axes)
        a = self.data
        centered = a - a.mean(axis=axes, keepdims=True)
        sd = np.sqrt((centered**2).sum(axis=axes, keepdims=True) / n)
        out = sd + eps
        if not keepdims:
            out = np.squeeze(out, axis=axes)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            safe = np.where(sd > 0, sd, 1.0)
            return (np.where(sd > 0, g * centered / (n * safe), 0.0),)

        return Tensor._make(np.asarray(out), (self,), backward, "std")

    def softmax(self, axis=-1):
        a = self.data
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        out = shifted / shifted.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), backward, "softmax")


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return Tensor._make(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def add(a, b):
    return as_tensor(a) + b


def sub(a, b):
    return as_tensor(a) - b


def mul(a, b):
    return as_tensor(a) * b


def div(a, b):
    return as_tensor(a) / b


def elementwise(op: str, a, b) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op](a, b)


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if op == "sum":
        return a.sum(axes, keepdims)
    if op == "mean":
        return a.mean(axes, keepdims)
    if op == "max":
        return a.max(axes, keepdims)
    if op == "std":
        return a.std(axes, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def parameters_of(tensors: Iterable[Tensor]):
    return [t for t in tensors if t.requires_grad]
