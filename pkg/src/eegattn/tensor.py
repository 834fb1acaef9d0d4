"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable op builds a new :class:`Tensor` whose ``_backward``
closure maps the upstream gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates into ``.grad`` of every leaf that requires it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import fft as sp_fft

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        extra = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{extra})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def clear_graph(self) -> None:
        """Drop the backward graph below this tensor so its buffers can be freed."""
        stack = [self]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.extend(t._parents)
            t._parents = ()
            t._backward = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    for p in parents:
        if p.requires_grad:
            break
    else:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    # only size-1 axes (and missing leading axes) broadcast
    sa, sb = a.shape, b.shape
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), backward, "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of clamping it to zero
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    pos = a.data > 0
    out = np.where(pos, a.data, neg_part)

    def backward(g):
        return (g * np.where(pos, 1.0, neg_part + alpha),)

    return _make(out, (a,), backward, "elu")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must appear in the
    output or in the other operand, so the backward is again an einsum."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for name, idx, other in (("first", ia, ib), ("second", ib, ia)):
        if len(set(idx)) != len(idx):
            raise ValueError(f"einsum: repeated index in {name} operand of {spec!r}")
        if any(c not in out_idx and c not in other for c in idx):
            raise ValueError(f"einsum: {spec!r} sums an index private to the {name} operand")
    # path planning costs more than it saves on small operands
    big = max(a.size, b.size) > 4096
    try:
        out = np.einsum(spec, a.data, b.data, optimize=big)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: shapes {a.shape} and {b.shape} do not conform") from exc

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=big) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=big) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "einsum")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = math.prod(a.shape[i] for i in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, ts[0].ndim)[0]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make(out, ts, backward, "concat")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def sliding_windows(x, k: int, pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """Zero-pad the last axis and expose every length-``k`` window:
    ``[..., T] -> [..., T + pad_left + pad_right - k + 1, k]``."""
    x = as_tensor(x)
    n = x.shape[-1] + pad_left + pad_right - k + 1
    if k < 1 or n < 1:
        raise ShapeError(f"sliding_windows: kernel {k} longer than padded length of {x.shape}")
    width = [(0, 0)] * (x.ndim - 1) + [(pad_left, pad_right)]
    padded = np.pad(x.data, width)
    out = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-1)

    def backward(g):
        gp = np.zeros(padded.shape, dtype=DTYPE)
        for j in range(k):
            gp[..., j : j + n] += g[..., j]
        return (gp[..., pad_left : pad_left + x.shape[-1]],)

    return _make(out, (x,), backward, "sliding_windows")


def conv_time(x, w, pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """Bank of 1-D cross-correlations along the last axis, via FFT.

    ``x [..., T]`` and ``w [F, K]`` give ``out [..., F, T_out]`` with
    ``out[..., f, t] = sum_j w[f, j] * xpad[..., t + j]``, where ``xpad`` is
    ``x`` zero-padded by ``pad_left``/``pad_right``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"conv_time: kernel bank must be [F, K], got {w.shape}")
    t_in = x.shape[-1]
    n_filt, k = w.shape
    t_out = t_in + pad_left + pad_right - k + 1
    if t_out < 1 or pad_left > k - 1 or pad_right > k - 1:
        raise ShapeError(f"conv_time: kernel {w.shape} incompatible with input {x.shape} and padding")
    # long enough that neither the convolution nor the kernel-gradient lags wrap
    n = sp_fft.next_fast_len(max(t_in + k - 1, t_in + pad_left + 1, t_out + k))
    xf = sp_fft.rfft(x.data, n)
    wf = sp_fft.rfft(w.data[:, ::-1], n)
    full = sp_fft.irfft(xf[..., None, :] * wf, n)
    start = k - 1 - pad_left
    out = full[..., start : start + t_out]

    def backward(g):
        gf = sp_fft.rfft(g, n)
        gx = gw = None
        if x.requires_grad:
            # full convolution of g with the unreversed kernel, shifted by pad_left
            z = sp_fft.irfft((gf * sp_fft.rfft(w.data, n)).sum(axis=-2), n)
            gx = z[..., pad_left : pad_left + t_in]
        if w.requires_grad:
            lead = tuple(range(x.ndim - 1))
            cross = (np.conj(gf) * xf[..., None, :]).sum(axis=lead)
            r = sp_fft.irfft(cross, n)
            lags = np.arange(k) - pad_left
            gw = r[:, lags % n]
        return gx, gw

    return _make(out, (x, w), backward, "conv_time")


def zeros_like(x) -> Tensor:
    return Tensor(np.zeros_like(as_tensor(x).data))


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    passed: bool


def numerical_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar(fn(Tensor(x)))
        flat[i] = orig - eps
        lo = _scalar(fn(Tensor(x)))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ShapeError(f"gradient check needs a scalar-valued op, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])


def finite_diff_check(
    op: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "",
) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``op`` against central differences.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = op(leaf)
    _scalar(out)
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    numeric = numerical_grad(op, base, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(name or getattr(op, "__name__", "op"), max_err, bool(max_err < tol))
