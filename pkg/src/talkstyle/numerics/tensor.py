"""Dense float64 tensors with a dynamically recorded reverse-mode graph.

Every differentiable op builds its output with :meth:`Tensor._from_op`, which
stores the parents and a closure mapping the output gradient to parent
gradients. :meth:`Tensor.backward` walks the graph once in reverse
topological order and then drops all graph references.
"""
from __future__ import annotations

import numpy as np

from .. import kernels

_grad_enabled = True


class no_grad:
    """Context manager: ops inside record no graph (pure evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("tensor values must be finite (NaN/Inf rejected)")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward):
        # internal constructor: skips the finiteness scan on hot paths
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def constant(cls, data) -> "Tensor":
        """Wrap an array without copying or validation (no gradient)."""
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor.constant(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # graph traversal -----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(g, _Outer):
                g = g.materialize()
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = pg
                elif isinstance(prev, _Outer):
                    prev.add(pg)
                elif isinstance(pg, _Outer):
                    pg.add(prev)
                    grads[key] = pg
                else:
                    grads[key] = prev + pg
        # free the tape
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Outer:
    """Lazy sum of ``x.T @ g`` products plus dense terms.

    Weight gradients of a rollout arrive one thin step at a time; stacking
    the factors and doing a single product at the end is far cheaper than
    adding many dense outer products.
    """

    __slots__ = ("xs", "gs", "dense")

    def __init__(self, x, g):
        self.xs, self.gs, self.dense = [x], [g], None

    def add(self, other):
        if isinstance(other, _Outer):
            self.xs.extend(other.xs)
            self.gs.extend(other.gs)
            if other.dense is not None:
                self.add(other.dense)
        else:
            self.dense = other if self.dense is None else self.dense + other

    def materialize(self) -> np.ndarray:
        x = self.xs[0] if len(self.xs) == 1 else np.concatenate(self.xs, axis=0)
        g = self.gs[0] if len(self.gs) == 1 else np.concatenate(self.gs, axis=0)
        out = x.T @ g
        return out if self.dense is None else out + self.dense


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor.constant(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Elementwise ``max(x, slope * x)``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky-ReLU slope must lie in (0, 1), got {slope}")
    xd = x.data
    scale = np.where(xd > 0.0, 1.0, slope)
    return Tensor._from_op(xd * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = (xd > 0.0).astype(np.float64)
    return Tensor._from_op(xd * mask, (x,), lambda g: (g * mask,))


# reductions / shape ------------------------------------------------------------
def total(x: Tensor) -> Tensor:
    shape = x.data.shape
    return Tensor._from_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.array(np.vdot(xd, xd)), (x,), lambda g: (2.0 * g * xd,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,))


def index(x: Tensor, idx) -> Tensor:
    shape = x.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(x.data[idx], (x,), backward)


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous rows ``x[start:stop]`` (cheaper backward than :func:`index`)."""
    shape = x.data.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return Tensor._from_op(x.data[start:stop], (x,), backward)


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.data.shape

    def backward(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return Tensor._from_op(x.data[..., start:stop], (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack_rows(rows) -> Tensor:
    """Stack 1-D (or 1×D) tensors into an N×D matrix."""
    rows = list(rows)
    data = np.stack([r.data.reshape(-1) for r in rows])
    shapes = [r.data.shape for r in rows]

    def backward(g):
        return tuple(g[i].reshape(shapes[i]) for i in range(len(rows)))

    return Tensor._from_op(data, tuple(rows), backward)


# linear algebra ----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif ad.ndim == 2 and bd.ndim == 2:
            gb = _Outer(ad, g)
        else:
            gb = ad.T @ g
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward)


def matmul_rows(a, b) -> Tensor:
    """``a @ b`` computed one row at a time.

    Each output row is bit-identical to multiplying that row alone, whatever
    the number of rows; a single BLAS call may round differently for
    different matrix heights.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul_rows needs (n, k) @ (k, m), got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad[:, None, :], bd)[:, 0, :]

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = _Outer(ad, g) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (..., Din) and ``W`` of shape (Din, Dout)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim == 0 or W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (W.data.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        gx = g @ Wd.T if x.requires_grad else None
        if W.requires_grad:
            gW = _Outer(xd.reshape(-1, xd.shape[-1]), g.reshape(-1, g.shape[-1]))
        else:
            gW = None
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return Tensor._from_op(out, parents, backward)


linear_forward = linear


# normalisation -------------------------------------------------------------------
class DegenerateRowError(ValueError):
    """A softmax row had no finite entry."""


def softmax_rows(x, bias=None) -> Tensor:
    """Row-wise softmax of ``x + bias`` along the last axis.

    ``bias`` is a constant array that may hold ``-inf`` to mask entries; those
    map to exactly 0. Plain arrays with ``-inf`` are also accepted as ``x``.
    """
    if not isinstance(x, Tensor):
        x = Tensor.constant(np.asarray(x, dtype=np.float64))
    z = x.data if bias is None else x.data + bias
    peak = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise DegenerateRowError("softmax row has no finite entry")
    e = np.exp(z - peak)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    y, xhat, rstd = kernels.layer_norm_forward(x.data, gamma.data, beta.data, eps)
    gd = gamma.data

    def backward(g):
        return kernels.layer_norm_backward(g, xhat, rstd, gd)

    return Tensor._from_op(y, (x, gamma, beta), backward)
