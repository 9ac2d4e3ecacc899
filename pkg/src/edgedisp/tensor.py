"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package (feature extraction, cost aggregation, losses)
is expressed through :class:`Tensor`. Forward results are computed eagerly
with numpy; when any input of an operation requires gradients, the
operation is recorded and ``backward()`` on a scalar loss replays the
records in exact reverse execution order.

All arithmetic is float64 with a fixed (row-major) summation order, so
identical inputs give bit-identical results.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# When enabled, every op asserts its output is finite. Cheap insurance
# while debugging new layers; off by default for speed.
DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


_ids = itertools.count()


class Tensor:
    """N-dimensional float64 array, optionally tracked for autodiff.

    ``_parents`` and ``_backward`` are filled in by the op that produced
    the tensor; leaves have neither. ``_id`` is a global creation counter
    used to replay the tape in reverse execution order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._id = next(_ids)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # -- autodiff core --------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        tape = _collect_tape(self)
        self.grad = np.ones_like(self.data)
        # Records were appended in execution order; _id sorting restores it
        # exactly even when the graph was built from several subexpressions.
        for node in sorted(tape, key=lambda t: t._id, reverse=True):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _make_op(np.add(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def bwd(g):
                _accum(a, _unbroadcast(g, a.data.shape))
                _accum(b, _unbroadcast(g, b.data.shape))

            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make_op(-self.data, (self,))
        if out._parents:
            out._backward = lambda g, a=self: _accum(a, -g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _make_op(np.multiply(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def bwd(g):
                if a.requires_grad or a._backward is not None:
                    _accum(a, _unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad or b._backward is not None:
                    _accum(b, _unbroadcast(g * a.data, b.data.shape))

            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _make_op(np.divide(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def bwd(g):
                if a.requires_grad or a._backward is not None:
                    _accum(a, _unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad or b._backward is not None:
                    _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

            out._backward = bwd
        return out

    # -- nonlinearities -------------------------------------------------------

    def relu(self):
        out = _make_op(np.maximum(self.data, 0.0), (self,))
        if out._parents:
            mask = self.data > 0
            out._backward = lambda g, a=self, m=mask: _accum(a, g * m)
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = _make_op(y, (self,))
        if out._parents:
            out._backward = lambda g, a=self, yy=y: _accum(a, g * yy * (1.0 - yy))
        return out

    def exp(self):
        y = np.exp(self.data)
        out = _make_op(y, (self,))
        if out._parents:
            out._backward = lambda g, a=self, yy=y: _accum(a, g * yy)
        return out

    def log(self):
        out = _make_op(np.log(self.data), (self,))
        if out._parents:
            out._backward = lambda g, a=self: _accum(a, g / a.data)
        return out

    def abs(self):
        out = _make_op(np.abs(self.data), (self,))
        if out._parents:
            sign = np.sign(self.data)
            out._backward = lambda g, a=self, s=sign: _accum(a, g * s)
        return out

    def clamp(self, lo: float, hi: float):
        """Clip values; gradient passes through only inside [lo, hi]."""
        out = _make_op(np.clip(self.data, lo, hi), (self,))
        if out._parents:
            mask = (self.data >= lo) & (self.data <= hi)
            out._backward = lambda g, a=self, m=mask: _accum(a, g * m)
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make_op(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            shape = self.data.shape

            def bwd(g, a=self):
                gg = g
                if axis is not None and not keepdims:
                    gg = np.expand_dims(gg, axis)
                _accum(a, np.broadcast_to(gg, shape))

            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis: int, keepdims: bool = False):
        """Max along one axis; ties send the gradient to the first maximum."""
        y = self.data.max(axis=axis, keepdims=True)
        out_data = y if keepdims else np.squeeze(y, axis=axis)
        out = _make_op(out_data, (self,))
        if out._parents:
            idx = np.expand_dims(self.data.argmax(axis=axis), axis)

            def bwd(g, a=self):
                gg = g if keepdims else np.expand_dims(g, axis)
                gx = np.zeros_like(a.data)
                np.put_along_axis(gx, idx, np.take_along_axis(gx, idx, axis) + gg, axis)
                _accum(a, gx)

            out._backward = bwd
        return out

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make_op(self.data.reshape(shape), (self,))
        if out._parents:
            orig = self.data.shape
            out._backward = lambda g, a=self: _accum(a, g.reshape(orig))
        return out

    def __getitem__(self, key):
        out = _make_op(self.data[key], (self,))
        if out._parents:
            shape = self.data.shape

            def bwd(g, a=self):
                gx = np.zeros(shape)
                gx[key] += g
                _accum(a, gx)

            out._backward = bwd
        return out


# -- helpers ------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make_op(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    """Wrap an op result; tracks parents only when some input needs grads."""
    out = Tensor(data)
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    if any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out.requires_grad = True
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Sum gradients across fan-out."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Invert numpy broadcasting by summing over expanded axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _collect_tape(root: Tensor) -> list:
    """All recorded ops reachable from ``root`` (iterative DFS)."""
    seen = set()
    tape = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        tape.append(node)
        stack.extend(node._parents)
    return tape


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Optional[Callable[[np.ndarray], None]] = None) -> Tensor:
    """Public hook for modules that define their own primitives."""
    out = _make_op(data, parents)
    if out._parents and backward is not None:
        out._backward = backward
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    _accum(t, g)


def needs_grad(t: Tensor) -> bool:
    return _needs_grad(t)
