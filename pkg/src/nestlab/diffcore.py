"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Nodes carry a
monotonically increasing creation index, so sorting the reachable nodes by that
index recovers execution order; :func:`backward` walks it once in reverse.

Broadcasting follows numpy rules; gradients flowing into a broadcast operand
are summed back down to its shape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_node_ids = itertools.count()


class Tensor:
    """Dense differentiable array.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple[Tensor, ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(values: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    # results of numpy ops are fresh arrays; skip the defensive copy in __init__
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.values = np.asarray(values, dtype=np.float64)
    out.grad = None
    out.requires_grad = needs
    out.op = op
    out._parents = parents if needs else ()
    out._backward = backward_fn if needs else None
    out._id = next(_node_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.values + b.values,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.values - b.values,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(
        av * bv,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.values * c, "scale", (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if np.any(av <= 0) or np.any(np.isnan(av)):
        raise DomainError("log: input contains non-positive entries")
    return _make(np.log(av), "log", (a,), lambda g: (g / av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


# ------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand contraction, e.g. ``einsum("ktbc,kubc->ktub", a, b)``.

    Every index of an operand must appear in the output or the other operand,
    which keeps the backward pass a pair of contractions.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        ins, out_spec = spec.replace(" ", "").split("->")
        a_spec, b_spec = ins.split(",")
    except ValueError:
        raise ShapeError(f"einsum: expected 'ab,bc->ac' style spec, got {spec!r}") from None
    for own, other in ((a_spec, b_spec), (b_spec, a_spec)):
        if len(set(own)) != len(own) or not set(own) <= set(other) | set(out_spec):
            raise ShapeError(f"einsum: unsupported spec {spec!r}")
    av, bv = a.values, b.values
    try:
        out = np.einsum(spec, av, bv)
    except ValueError as err:
        raise ShapeError(f"einsum: {err}") from None

    def backward_fn(g):
        ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bv) if a.requires_grad else None
        gb = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, av) if b.requires_grad else None
        return ga, gb

    return _make(out, "einsum", (a, b), backward_fn)


# ---------------------------------------------------------------- reductions


def _check_axis(t: Tensor, axis, op: str):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    norm = []
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise ShapeError(f"{op}: axis {ax} invalid for shape {t.shape}")
        norm.append(ax % t.ndim)
    return tuple(norm)


def _expand_reduced(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _check_axis(a, axis, "sum")
    shape = a.shape
    return _make(
        a.values.sum(axis=axes, keepdims=keepdims),
        "sum",
        (a,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims).copy(),),
    )


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _check_axis(a, axis, "mean")
    shape = a.shape
    count = a.size if axes is None else int(np.prod([shape[ax] for ax in axes]))
    return _make(
        a.values.mean(axis=axes, keepdims=keepdims),
        "mean",
        (a,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims) / count,),
    )


def reduce_max(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    if isinstance(axis, tuple):
        raise ShapeError("max: reduce over a single axis or all axes")
    axes = _check_axis(a, axis, "max")
    av = a.values
    if axes is None:
        flat = int(np.argmax(av))  # argmax returns the lowest index among ties
        out = av.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * av.ndim)

        def backward_all(g):
            grad = np.zeros(av.size)
            grad[flat] = np.reshape(g, -1)[0]
            return (grad.reshape(av.shape),)

        return _make(np.asarray(out), "max", (a,), backward_all)

    ax = axes[0]
    idx = np.expand_dims(np.argmax(av, axis=ax), ax)
    out = np.take_along_axis(av, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def backward_axis(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros_like(av)
        np.put_along_axis(grad, idx, g, axis=ax)
        return (grad,)

    return _make(out, "max", (a,), backward_axis)


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """``log(sum(exp(a)))`` along ``axis`` (kept as size 1), max-shifted.

    With ``mask`` only masked-in entries contribute; every reduced slice must
    contain at least one of them. ``mask`` may broadcast ``a`` to a larger shape.
    """
    a = as_tensor(a)
    _check_axis(a, axis, "logsumexp")
    av = a.values
    if mask is None:
        shift = av.max(axis=axis, keepdims=True)
        e = np.exp(av - shift)
    else:
        mask = np.asarray(mask, dtype=bool)
        shift = np.where(mask, av, -np.inf).max(axis=axis, keepdims=True)
        if not np.all(np.isfinite(shift)):
            raise DomainError("logsumexp: a reduced slice has no masked-in entries")
        e = np.where(mask, np.exp(np.where(mask, av - shift, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    out = np.log(total) + shift
    soft = e / total
    shape = av.shape
    return _make(out, "logsumexp", (a,), lambda g: (_unbroadcast(g * soft, shape),))


# ------------------------------------------------------------- restructuring


def gather(a, indices, axis: int | None = None) -> Tensor:
    """Select entries by integer index.

    With ``axis=None`` indices address the flattened tensor; otherwise they
    select slices along ``axis``. Repeated indices accumulate gradient.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    extent = a.size if axis is None else a.shape[_check_axis(a, axis, "gather")[0]]
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise IndexError(f"gather: index out of range for extent {extent}")
    av = a.values
    if axis is None:
        out = av.reshape(-1)[idx]

        def backward_flat(g):
            grad = np.zeros(av.size)
            np.add.at(grad, idx, g)
            return (grad.reshape(av.shape),)

        return _make(out, "gather", (a,), backward_flat)

    ax = axis % av.ndim
    out = np.take(av, idx, axis=ax)

    def backward_axis(g):
        grad = np.zeros_like(av)
        moved = np.moveaxis(grad, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (grad,)

    return _make(out, "gather", (a,), backward_axis)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(src),))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack: need at least one tensor")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.values for t in ts], axis=axis)
    n = len(ts)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, "stack", ts, backward_fn)


def detach(a) -> Tensor:
    """Copy of ``a`` that no backward pass can traverse."""
    a = as_tensor(a)
    return Tensor(a.values.copy(), requires_grad=False, op="detach")


# ------------------------------------------------------------------ backward


def trace(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in execution order."""
    seen: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack_.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Interior gradients are accumulated too; call :func:`zero_grad` on leaves
    between steps, since repeated calls add onto existing gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = trace(loss)
    pending: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    for node in reversed(order):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node.grad is None:
            # interior grads may alias each other; leaves get their own buffer
            node.grad = g if node._backward is not None else np.array(g, dtype=np.float64)
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)
