"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was computed; backward() on a
scalar walks the graph in reverse topological order and accumulates gradients
into every tensor that requires them. Ops support numpy broadcasting; the
gradient of a broadcast input is summed back down to its shape.

Gradients are exact for the implemented ops (no numerical shortcuts), which is
what lets finite-difference checks demand 1e-5 agreement in float64.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # --- graph plumbing ---

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _acc(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatch("backward() needs a scalar loss")
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
            if node._backward is not None:
                node._backward(node)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # --- niceties ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    # --- arithmetic ---

    def __add__(self, other):
        a, b = self, Tensor._wrap(other)

        def backward(out):
            a._acc(_unbroadcast(out.grad, a.data.shape))
            b._acc(_unbroadcast(out.grad, b.data.shape))
        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, Tensor._wrap(other)

        def backward(out):
            a._acc(_unbroadcast(out.grad * b.data, a.data.shape))
            b._acc(_unbroadcast(out.grad * a.data, b.data.shape))
        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward(out):
            a._acc(-out.grad)
        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __truediv__(self, other):
        a, b = self, Tensor._wrap(other)

        def backward(out):
            a._acc(_unbroadcast(out.grad / b.data, a.data.shape))
            b._acc(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        return Tensor._result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents")
        a = self

        def backward(out):
            a._acc(out.grad * p * np.power(a.data, p - 1))
        return Tensor._result(np.power(a.data, p), (a,), backward)

    def __matmul__(self, other):
        a, b = self, Tensor._wrap(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeMismatch("matmul operands need >= 2 dims")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")

        def backward(out):
            a._acc(_unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.data.shape))
            b._acc(_unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.data.shape))
        return Tensor._result(a.data @ b.data, (a, b), backward)

    # --- elementwise functions ---

    def exp(self):
        a = self
        value = np.exp(a.data)

        def backward(out):
            a._acc(out.grad * out.data)
        return Tensor._result(value, (a,), backward)

    def log(self):
        a = self

        def backward(out):
            a._acc(out.grad / a.data)
        return Tensor._result(np.log(a.data), (a,), backward)

    def tanh(self):
        a = self
        value = np.tanh(a.data)

        def backward(out):
            a._acc(out.grad * (1.0 - out.data * out.data))
        return Tensor._result(value, (a,), backward)

    def sigmoid(self):
        a = self
        x = a.data
        value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(out):
            a._acc(out.grad * out.data * (1.0 - out.data))
        return Tensor._result(value, (a,), backward)

    def relu(self):
        a = self

        def backward(out):
            a._acc(out.grad * (a.data > 0))
        return Tensor._result(np.maximum(a.data, 0.0), (a,), backward)

    # --- reductions / shaping ---

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._acc(np.broadcast_to(g, a.data.shape).copy())
        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(out):
            a._acc(out.grad.reshape(a.data.shape))
        return Tensor._result(a.data.reshape(shape), (a,), backward)

    def swapaxes(self, i: int, j: int):
        a = self

        def backward(out):
            a._acc(out.grad.swapaxes(i, j))
        return Tensor._result(a.data.swapaxes(i, j), (a,), backward)

    def __getitem__(self, idx):
        a = self

        def backward(out):
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._acc(g)
        return Tensor._result(a.data[idx], (a,), backward)

    # --- gathers / masking ---

    def take_rows(self, ids):
        """Row gather (embedding lookup): self[ids] with duplicate-safe grads."""
        ids = np.asarray(ids)
        a = self

        def backward(out):
            g = np.zeros_like(a.data)
            np.add.at(g, ids, out.grad)
            a._acc(g)
        return Tensor._result(a.data[ids], (a,), backward)

    def gather_last(self, idx):
        """Pick one entry along the last axis per leading position."""
        idx = np.asarray(idx)
        if idx.shape != self.data.shape[:-1]:
            raise ShapeMismatch(f"gather_last idx {idx.shape} vs {self.data.shape}")
        a = self
        expanded = idx[..., None]

        def backward(out):
            g = np.zeros_like(a.data)
            np.put_along_axis(g, expanded, out.grad[..., None], axis=-1)
            a._acc(g)
        value = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]
        return Tensor._result(value, (a,), backward)

    def masked_fill(self, mask, value: float):
        """Replace entries where mask is True with a constant; their gradient is 0."""
        mask = np.asarray(mask, dtype=bool)
        a = self

        def backward(out):
            g = np.where(mask, 0.0, out.grad)
            a._acc(_unbroadcast(g, a.data.shape))
        return Tensor._result(np.where(mask, value, a.data), (a,), backward)
