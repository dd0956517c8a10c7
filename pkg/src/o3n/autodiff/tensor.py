"""Reverse-mode autodiff over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and remembers the closure that pushes
its gradient back to its parents. Calling :meth:`Tensor.backward` on a scalar
walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # elementwise sugar for tests and small graphs
    def __add__(self, other):
        from .functional import add

        return add(self, other)

    def __mul__(self, other):
        from .functional import mul

        return mul(self, other)

    def sum(self):
        from .functional import total

        return total(self)


class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping of trainable parameters."""

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.items())

    def copy(self) -> "ParamSet":
        return ParamSet((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def grads(self) -> dict:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self.values())


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(array, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)
