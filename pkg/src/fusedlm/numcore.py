"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When gradient tracking is on and any
input requires a gradient, the output remembers its parents and a closure that
pushes the output gradient back into them. ``Tensor.backward`` walks that graph
once in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# Additive mask for disallowed attention positions. Large enough that exp() of it
# underflows to exactly 0 after max-subtraction, small enough to stay finite.
MASK_VALUE = -1e9

_state = threading.local()


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class NumericError(ArithmeticError):
    """A non-finite value reached an op that requires finite input."""


class GraphError(RuntimeError):
    """Backward was requested on a graph that cannot provide it."""


class EmptyLossError(ValueError):
    """Every position of a loss was masked out."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "_retain")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        # fresh=True: caller hands over a newly allocated array nobody else references
        if self.grad is None:
            self.grad = g if fresh and g.shape == self.shape else np.array(np.broadcast_to(g, self.shape), dtype=DTYPE)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep this interior node's gradient after backward (for inspection)."""
        self._retain = True
        return self

    def backward(self) -> None:
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it with a new forward pass")
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is not connected to any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._backward is not None:
                # interior nodes drop their buffers; leaves keep .grad
                if not node._retain:
                    node.grad = None
                node._parents = ()
                node._backward = None
                node._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    on = a.data > 0

    def backward(g):
        a._accumulate(g * on, fresh=True)

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from e

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inv)), fresh=True)

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along an existing axis; used to line up per-specialist scores."""
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, tensors, backward)


concat_scores = concat


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from e

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(out, tensors, backward)


def gather_rows(a: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Pick ``a[batch_idx[i], pos_idx[i]]`` for each i from a ``[B, T, ...]`` tensor."""
    batch_idx = np.asarray(batch_idx, dtype=np.intp)
    pos_idx = np.asarray(pos_idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch_idx, pos_idx), g)
        a._accumulate(full)

    return _make(a.data[batch_idx, pos_idx], (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), fresh=True)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb, fresh=True)

    return _make(out, (a, b), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _make(table.data[ids], (table,), backward)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to unit RMS, then scale by ``weight``."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"rmsnorm: width {x.shape[-1]} vs weight {weight.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    n = x.shape[-1]

    def backward(g):
        if weight.requires_grad:
            weight._accumulate((g * normed).reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gn = g * weight.data
            x._accumulate(inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True)), fresh=True)

    return _make(normed * weight.data, (x, weight), backward)


def causal_self_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over ``[..., T, d]`` with a causal mask."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    t, d = q.shape[-2], q.shape[-1]
    c = 1.0 / np.sqrt(d)
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    scores = np.where(future, MASK_VALUE, scores)
    p = _softmax_np(scores, axis=-1)
    out = p @ v.data

    def backward(g):
        if v.requires_grad:
            v._accumulate(np.swapaxes(p, -1, -2) @ g, fresh=True)
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        ds *= c
        if q.requires_grad:
            q._accumulate(ds @ k.data, fresh=True)
        if k.requires_grad:
            k._accumulate(np.swapaxes(ds, -1, -2) @ q.data, fresh=True)

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------- normalizers and loss


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    _check_finite(x.data, "softmax")
    p = _softmax_np(x.data, axis)

    def backward(g):
        x._accumulate(p * (g - np.sum(g * p, axis=axis, keepdims=True)))

    return _make(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    out = _log_softmax_np(x.data, axis)

    def backward(g):
        x._accumulate(g - np.exp(out) * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the masked-in rows.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` match its leading shape.
    Masked-out rows contribute neither loss nor gradient and their targets are
    not inspected.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} rows vs {targets.shape[0]} targets")
    keep = np.ones(flat.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is masked out")
    rows = np.nonzero(keep)[0]
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    _check_finite(flat[rows], "cross_entropy")
    logp = _log_softmax_np(flat[rows], axis=-1)
    loss = -logp[np.arange(count), tgt].sum() / count

    def backward(g):
        gl = np.exp(logp)
        gl[np.arange(count), tgt] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = gl * (float(g) / count)
        logits._accumulate(full.reshape(logits.shape))

    return _make(np.asarray(loss), (logits,), backward)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
