"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation in execution order; ``backward``
walks that list in reverse and accumulates gradients into each node. The
operation set is exactly what the encoders and losses of this package
need, nothing more.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class Node:
    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __repr__(self):
        return f"Node(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if np.shape(grad) == tuple(shape):
        return grad
    while np.ndim(grad) > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tape:
    """Operation recorder. One tape per forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- leaves ---------------------------------------------------------------

    def param(self, value, name=None) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), name=name)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def _record(self, value, parents, backward_fn: Callable, name=None) -> Node:
        needs = any(p.requires_grad for p in parents)
        node = Node(self, value, parents, backward_fn if needs else None, needs, name)
        self.nodes.append(node)
        return node

    # -- elementwise ----------------------------------------------------------

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record(
            a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record(
            a.value - b.value, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record(
            a.value * b.value, (a, b),
            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    def div(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        out = a.value / b.value
        return self._record(
            out, (a, b),
            lambda g: (_unbroadcast(g / b.value, a.shape),
                       _unbroadcast(-g * out / b.value, b.shape)))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def stop_gradient(self, x: Node) -> Node:
        """Identity in the forward pass; nothing flows back through it."""
        node = Node(self, x.value, (), None, False, name="stop_gradient")
        self.nodes.append(node)
        return node

    # -- linear algebra and reductions ---------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._record(
            a.value @ b.value, (a, b),
            lambda g: (g @ b.value.T, a.value.T @ g))

    def sum(self, x: Node, axis=None) -> Node:
        shape = x.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record(np.sum(x.value, axis=axis), (x,), back)

    def mean(self, x: Node) -> Node:
        n = np.size(x.value)
        return self.mul(self.sum(x), 1.0 / n)

    def rowdot(self, a: Node, b: Node) -> Node:
        """Row-wise inner product of two (N, D) arrays."""
        a, b = self._lift(a), self._lift(b)
        return self._record(
            np.einsum("ij,ij->i", a.value, b.value), (a, b),
            lambda g: (g[:, None] * b.value, g[:, None] * a.value))

    def normalize_rows(self, x: Node, eps: float = 1e-12) -> Node:
        """x / max(||x||, eps) row-wise."""
        norm = np.linalg.norm(x.value, axis=1, keepdims=True)
        small = norm < eps
        denom = np.where(small, eps, norm)
        y = x.value / denom

        def back(g):
            proj = np.einsum("ij,ij->i", g, y)[:, None]
            dx = (g - np.where(small, 0.0, proj * y)) / denom
            return (dx,)

        return self._record(y, (x,), back)

    def standardize(self, x: Node, eps: float = 1e-5) -> Node:
        """Column-wise (x - mean) / sqrt(var + eps) over the rows."""
        sd = np.sqrt(x.value.var(axis=0) + eps)
        y = (x.value - x.value.mean(axis=0)) / sd

        def back(g):
            return ((g - g.mean(axis=0) - y * (g * y).mean(axis=0)) / sd,)

        return self._record(y, (x,), back)

    def take_rows(self, x: Node, index) -> Node:
        index = np.asarray(index, dtype=np.int64)
        shape = x.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return self._record(x.value[index], (x,), back)

    def slice_reshape(self, flat: Node, start: int, stop: int, shape) -> Node:
        """View a contiguous slice of a flat parameter vector as an array."""
        n = np.size(flat.value)

        def back(g):
            out = np.zeros(n)
            out[start:stop] = np.ravel(g)
            return (out,)

        return self._record(flat.value[start:stop].reshape(shape), (flat,), back)

    def custom(self, value, parents, backward_fn, name=None) -> Node:
        """Record an op whose vector-Jacobian product is supplied by the caller."""
        parents = tuple(self._lift(p) for p in parents)
        return self._record(value, parents, backward_fn, name)

    # -- backward -------------------------------------------------------------

    def backward(self, root: Node, seed=1.0):
        """Accumulate d(root)/d(node) into ``node.grad`` for every recorded node."""
        for node in self.nodes:
            node.grad = None
        root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.shape).copy()
        position = {id(n): i for i, n in enumerate(self.nodes)}
        for node in reversed(self.nodes[: position[id(root)] + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g

    @staticmethod
    def grad_of(node: Node) -> np.ndarray:
        """Gradient of a leaf, zeros when nothing reached it."""
        return np.zeros(node.shape) if node.grad is None else node.grad
