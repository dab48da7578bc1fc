"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a float32 or float64 numpy array. Operations build a
backward graph; calling backward() on a scalar result walks the graph in
reverse topological order and accumulates gradients into every tensor
with requires_grad set. Training runs in float32; gradient checking uses
float64 (cast modules with Module.to_dtype).

Rules the op implementations follow:

  * Gradients are never mutated in place. Accumulation always writes
    ``t.grad = t.grad + g``, producing a new array, so aliasing a view
    into a gradient is harmless.
  * Reduction tie-breaking is the first (lowest linear index) maximum,
    inherited from np.argmax.
  * An op's result requires grad iff grad mode is on and any input does;
    otherwise no graph node is built.

The op set is deliberately small: arithmetic, 2-D matmul, shape moves,
and axis reductions live here; convolution, pooling, normalization and
losses are fused kernels in mvdg.nn.layers.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self, grad=None, free_graph: bool = True):
        """Accumulate gradients of this tensor w.r.t. every graph leaf.

        grad defaults to ones and may be omitted only for single-element
        tensors. With free_graph (the default) the traversed graph edges
        are released afterwards, which frees the op closures' buffers.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatchError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}"
                )

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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        accumulate_grad(self, grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._parents = ()
                node._backward = None

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _scalar_scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_shift(self, -float(other))
        return add(self, _scalar_scale(other, -1.0))

    def __rsub__(self, other):
        return _scalar_shift(_scalar_scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not part of the op set")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- shape and reductions -------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_along(self, axis)

    def mean(self, axis=None):
        return mean_along(self, axis)

    def max(self, axis):
        return max_along(self, axis)


def accumulate_grad(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def from_op(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap an op result, attaching the graph node when grad is active."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = inputs
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _scalar_scale(t: Tensor, s: float) -> Tensor:
    def bw(g):
        accumulate_grad(t, g * s)

    return from_op(t.data * s, (t,), bw)


def _scalar_shift(t: Tensor, s: float) -> Tensor:
    def bw(g):
        accumulate_grad(t, g)

    return from_op(t.data + s, (t,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(g, b.data.shape))

    return from_op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    return from_op(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return from_op(data, (a, b), bw)


def reshape(t: Tensor, shape) -> Tensor:
    data = t.data.reshape(shape)

    def bw(g):
        accumulate_grad(t, g.reshape(t.data.shape))

    return from_op(data, (t,), bw)


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(t.ndim)))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bw(g):
        accumulate_grad(t, g.transpose(inverse))

    return from_op(t.data.transpose(axes), (t,), bw)


def getitem(t: Tensor, key) -> Tensor:
    data = t.data[key]

    def bw(g):
        out = np.zeros_like(t.data)
        out[key] = g
        accumulate_grad(t, out)

    return from_op(data, (t,), bw)


def concat(tensors: list, axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            accumulate_grad(t, g[tuple(sl)])
            start += size

    return from_op(data, tuple(tensors), bw)


def sum_along(t: Tensor, axis=None) -> Tensor:
    data = t.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            accumulate_grad(t, np.broadcast_to(g, t.data.shape).copy())
        else:
            accumulate_grad(t, np.broadcast_to(np.expand_dims(g, axis), t.data.shape).copy())

    return from_op(data, (t,), bw)


def mean_along(t: Tensor, axis=None) -> Tensor:
    data = t.data.mean(axis=axis)
    count = t.data.size if axis is None else t.data.shape[axis]

    def bw(g):
        scaled = g / count
        if axis is None:
            accumulate_grad(t, np.broadcast_to(scaled, t.data.shape).copy())
        else:
            accumulate_grad(
                t, np.broadcast_to(np.expand_dims(scaled, axis), t.data.shape).copy()
            )

    return from_op(data, (t,), bw)


def max_along(t: Tensor, axis: int) -> Tensor:
    """Maximum over one axis; gradient flows to the first argmax on ties."""
    data = t.data.max(axis=axis)
    idx = np.argmax(t.data, axis=axis)

    def bw(g):
        out = np.zeros_like(t.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        accumulate_grad(t, out)

    return from_op(data, (t,), bw)


def stack(tensors: list, axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis (reshape + concat)."""
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)
