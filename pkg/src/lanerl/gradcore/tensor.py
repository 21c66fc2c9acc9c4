"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float64 ndarray. Operations executed while a ``Tape``
is active are recorded so that ``backward`` can replay them in reverse and
accumulate gradients. With no active tape every operation is a plain numpy
computation (the inference fast path used during rollouts).

The engine is deliberately small: the set of primitives below is exactly
what the dense / convolutional / attention stacks in this package need.
There is no general broadcasting engine beyond what numpy itself provides,
no graph rewriting, and no GPU support.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "pow_const",
    "tsum",
    "tmean",
    "softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "minimum",
    "clip_const",
]


class Tensor:
    """A float64 array with an optional gradient and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; every operator routes through a module-level primitive.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    """Wrap a float / ndarray as a constant Tensor (no copy for Tensors)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Append-only record of operations.

    Node ids are assigned to tensors the first time they touch the tape.
    By construction every recorded operation's inputs carry ids assigned at
    or before the operation itself, so the record is already topologically
    ordered and ``backward`` can walk it in reverse.

    Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        grads = backward(loss, tape)
    """

    def __init__(self):
        # each entry: (output tensor, input tensors, backward fn)
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._ids: dict[int, int] = {}  # id(tensor) -> node id
        self._keep: list[Tensor] = []  # keeps registered tensors alive
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def touch(self, t: Tensor) -> int:
        """Assign (or look up) this tensor's node id on the tape."""
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = self._next_id
            self._next_id += 1
            self._ids[key] = nid
            self._keep.append(t)
            t.node_id = nid
        return nid

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> None:
        for t in inputs:
            self.touch(t)
        self.touch(out)
        self._ops.append((out, inputs, bwd))


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Record an op on the active tape when any input participates in grad."""
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), bwd)
    return out


def backward(loss: Tensor, tape: Tape, zero_fill: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every tape node reachable from ``loss``.

    Returns a map from node id to gradient array and adds gradients into the
    ``.grad`` field of every reachable tensor with ``requires_grad``. Tensors
    passed via ``zero_fill`` that turn out to be unreachable get a zero
    gradient instead of ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._ids:
        raise ContractError("loss was not computed on this tape")

    grads: dict[int, np.ndarray] = {tape._ids[id(loss)]: np.ones_like(loss.data)}
    for out, inputs, bwd in reversed(tape._ops):
        gout = grads.get(tape._ids[id(out)])
        if gout is None:
            continue
        for inp, g in zip(inputs, bwd(gout)):
            if g is None or not inp.requires_grad:
                continue
            nid = tape._ids[id(inp)]
            if nid in grads:
                grads[nid] = grads[nid] + g
            else:
                grads[nid] = g

    for t in tape._keep:
        if t.requires_grad:
            g = grads.get(tape._ids[id(t)])
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g
    for t in zero_fill:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return grads


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _finish(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _finish(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _finish(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _finish(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _finish(out, (a,), lambda g: (-g,))


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.minimum(a.data, b.data))
    take_a = a.data <= b.data

    def bwd(g):
        return (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))

    return _finish(out, (a, b), bwd)


def clip_const(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is passed inside the interval only."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _finish(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# nonlinearities and transcendental functions


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _finish(out, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _finish(out, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _finish(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _finish(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _finish(out, (a,), lambda g: (g * 0.5 / y,))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**p)
    return _finish(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _finish(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).copy(),)

    return _finish(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product. 2-d operands or identically stacked batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or stacked operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (ga, gb)

    return _finish(out, (a, b), bwd)


def conv2d(x, k, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (C,H,W or N,C,H,W) with kernels k (O,C,kh,kw).

    Output spatial size is floor((dim + 2*padding - kdim)/stride) + 1. The
    kernel loop runs over the kh*kw offsets with everything else vectorized.
    """
    x, k = as_tensor(x), as_tensor(k)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d needs (N,C,H,W) input and (O,C,kh,kw) kernels, got {x.shape} and {k.shape}")
    n, c, h, w = xd.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernels expect {ck}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out_data = np.zeros((n, o, ho, wo))
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
            out_data += np.einsum("ncij,oc->noij", patch, k.data[:, :, a, b], optimize=True)
    out = Tensor(out_data[0] if squeeze else out_data)

    def bwd(g):
        gd = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for a in range(kh):
            for b in range(kw):
                patch = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
                gk[:, :, a, b] = np.einsum("noij,ncij->oc", gd, patch, optimize=True)
                gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += np.einsum(
                    "noij,oc->ncij", gd, k.data[:, :, a, b], optimize=True
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return ((gx[0] if squeeze else gx), gk)

    return _finish(out, (x, k), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    a = as_tensor(a)
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _finish(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _finish(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    orig = a.shape
    return _finish(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    inverse = np.argsort(axes)
    return _finish(out, (a,), lambda g: (g.transpose(inverse),))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(parts), bwd)


def gather_rows(a, index) -> Tensor:
    """Pick one column per row: a (N, M), index (N,) -> out (N,)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"gather_rows needs (N,M) and index (N,), got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _finish(out, (a,), bwd)
