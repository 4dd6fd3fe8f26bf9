"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray and records a backward closure per op; calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates ``.grad`` on every tensor that requires it. Only the ops the
pipeline needs are implemented. Training runs in float32; gradient checking
builds the same graphs in float64.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

# python floats stay "weak" under NEP 50 and do not promote float32 graphs
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
            if data.dtype.kind in "iub":
                data = data.astype(np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=self.data.dtype), self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # --- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if _is_number(other):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# --- elementwise ----------------------------------------------------------

def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    # python scalars stay scalars so float32 graphs are not promoted
    if _is_number(a):
        a, b = b, a
    if _is_number(b):
        a = as_tensor(a)
        s = b

        def bw_s(g):
            a._accumulate(g)

        return _result(a.data + s, (a,), bw_s)
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(data, (a, b), bw)


def mul(a, b) -> Tensor:
    if _is_number(a):
        a, b = b, a
    if _is_number(b):
        a = as_tensor(a)
        s = b

        def bw_s(g):
            a._accumulate(g * s)

        return _result(a.data * s, (a,), bw_s)
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(data, (a, b), bw)


def div(a, b) -> Tensor:
    if _is_number(b):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _result(data, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(2.0 * a.data * g)

    return _result(a.data * a.data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / data)

    return _result(data, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * data)

    return _result(data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accumulate(g * (a.data > 0.0))

    return _result(data, (a,), bw)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    data = x * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _result(data, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), bw)


# --- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def bw(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(data, (a, b), bw)


# --- shape ops --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(data, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(g.transpose(inv))

    return _result(data, (a,), bw)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        a._accumulate(buf)

    return _result(data, (a,), bw)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0 with an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _result(data, (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _result(data, tuple(tensors), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        a._accumulate(g)

    return _result(data, (a,), bw)


# --- reductions -------------------------------------------------------------

def _restore_axes(g, axis, keepdims, shape):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    if isinstance(axis, tuple):
        return int(np.prod([shape[ax] for ax in axis]))
    return shape[axis]


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        a._accumulate(_restore_axes(g, axis, keepdims, a.data.shape))

    return _result(data, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = _axis_count(a.data.shape, axis)

    def bw(g):
        a._accumulate(_restore_axes(g, axis, keepdims, a.data.shape) / count)

    return _result(data, (a,), bw)


def sorted_mean(a, axis: int) -> Tensor:
    """Mean reduction with a canonical (sorted) summation order, so the result
    is bit-identical under any permutation along ``axis``. The gradient of a
    mean is uniform, so sorting does not affect the backward pass."""
    a = as_tensor(a)
    data = np.sort(a.data, axis=axis).mean(axis=axis)
    count = a.data.shape[axis]

    def bw(g):
        a._accumulate(_restore_axes(g, axis, False, a.data.shape) / count)

    return _result(data, (a,), bw)


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient routes to the first (lowest-index) argmax."""
    a = as_tensor(a)
    if axis is None or isinstance(axis, tuple):
        raise ValueError("reduce_max requires a single explicit axis")
    data = a.data.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def bw(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, arg, g_exp, axis)
        a._accumulate(buf)

    return _result(data, (a,), bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _result(data, (a,), bw)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def bw(g):
        a._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), bw)


# --- parameter store --------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples rejected outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class ParamStore:
    """Named parameter tensors with a per-entry trainable mask.

    Iteration is always lexicographic by name so optimizer traversal and
    serialization are deterministic.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._entries[n].requires_grad]

    def set_trainable(self, name: str, trainable: bool) -> None:
        self._entries[name].requires_grad = trainable

    def freeze_prefix(self, prefix: str) -> None:
        for n in self.names():
            if n.startswith(prefix):
                self.set_trainable(n, False)

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def clone_data(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_data(self, arrays: dict[str, np.ndarray]) -> None:
        for n, arr in arrays.items():
            if n not in self._entries:
                raise KeyError(f"unknown parameter: {n}")
            t = self._entries[n]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n}")
            t.data = arr.astype(t.data.dtype, copy=True)
