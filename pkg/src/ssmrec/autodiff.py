"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every tracked tensor gets a monotonically increasing node id when it is
created, so reverse id order is a valid topological order of the graph and
gradient accumulation is deterministic.  Tensors created from plain arrays
without ``requires_grad`` are constants: they carry no node id and ops whose
inputs are all constants record nothing.

Broadcasting follows numpy rules (new leading axes, or size-1 axes expanded);
the vector-Jacobian products sum the upstream gradient back to each operand's
shape.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "gelu",
    "softplus",
    "log1mexp",
    "power",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "getitem",
    "take",
    "concatenate",
    "stack",
    "transpose",
    "reshape",
    "ssm_scan",
    "backward",
    "finite_diff_check",
]

_node_ids = itertools.count(1)
_recording = True

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{what} produced a non-finite value")


class Tensor:
    """Dense float64 array, optionally registered in the computation graph."""

    __slots__ = ("value", "node_id", "parents", "vjp", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.array(value, dtype=np.float64)
        _check_finite(value, "tensor construction")
        self.value = value
        self.node_id = next(_node_ids) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @classmethod
    def _result(cls, value: np.ndarray, parents: Sequence["Tensor"], vjp, op: str) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, op)
        out = cls.__new__(cls)
        out.value = value
        out.name = None
        if _recording and any(p.node_id is not None for p in parents):
            out.node_id = next(_node_ids)
            out.parents = tuple(parents)
            out.vjp = vjp
        else:
            out.node_id = None
            out.parents = ()
            out.vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f"node={self.node_id}" if self.node_id is not None else "const"
        return f"Tensor(shape={self.shape}, {tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes (inference only)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def tensor(value) -> Tensor:
    """Constant tensor (no gradient)."""
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Tensor._result(av * bv, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return Tensor._result(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = tensor(a)
    return Tensor._result(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = tensor(a)
    av = a.value
    if (av <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._result(np.log(av), (a,), lambda g: (g / av,), "log")


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _expit(a.value)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.value)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = tensor(a)
    x = a.value
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._result(out, (a,), vjp, "gelu")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._result(out, (a,), lambda g: (g * _expit(x),), "softplus")


def log1mexp(a) -> Tensor:
    """log(1 - exp(x)) for x < 0, switching between expm1 and log1p forms."""
    a = tensor(a)
    x = a.value
    if (x >= 0).any():
        raise NonFiniteError("log1mexp needs strictly negative input")
    near = x > -math.log(2.0)
    out = np.where(near, np.log(-np.expm1(np.where(near, x, -1.0))), np.log1p(-np.exp(np.where(near, -1.0, x))))
    return Tensor._result(out, (a,), lambda g: (-g / np.expm1(-x),), "log1mexp")


def power(a, p: float) -> Tensor:
    a = tensor(a)
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x**p
    return Tensor._result(out, (a,), lambda g: (g * p * x ** (p - 1.0),), "power")


def softmax(a) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    a = tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (a,), vjp, "softmax")


def log_softmax(a) -> Tensor:
    a = tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), vjp, "log_softmax")


# ---------------------------------------------------------------- contractions


def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics: 1-D operands are promoted then squeezed,
    leading (batch) axes broadcast."""
    a, b = tensor(a), tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    a2 = a.value[None, :] if a.ndim == 1 else a.value
    b2 = b.value[:, None] if b.ndim == 1 else b.value
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out2 = a2 @ b2
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]
    a1, b1 = a.ndim == 1, b.ndim == 1

    def vjp(g):
        g2 = g
        if b1:
            g2 = g2[..., None]
        if a1:
            g2 = g2[..., None, :]
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        ga = _unbroadcast(ga, a2.shape)
        gb = _unbroadcast(gb, b2.shape)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return Tensor._result(out, (a, b), vjp, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- structural


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    """Slice/index.  Advanced (array) indices accumulate repeated positions."""
    a = tensor(a)
    shape = a.shape
    try:
        out = a.value[idx]
    except IndexError as err:
        raise ShapeError(f"getitem: index {idx!r} invalid for shape {shape}: {err}") from None
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), vjp, "getitem")


def take(table, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    table = tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take: ids out of range for table of shape {table.shape}")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._result(table.value[ids], (table,), vjp, "take")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            "concatenate: incompatible shapes " + ", ".join(str(t.shape) for t in ts)
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, ts, vjp, "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack: shapes differ " + ", ".join(str(t.shape) for t in ts)) from None

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(out, ts, vjp, "stack")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes by default, else permute by ``axes``."""
    a = tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def ssm_scan(decay, gain, readout, x) -> Tensor:
    """Diagonal state-space recurrence, scanned left to right.

    Shapes: ``decay``, ``gain``, ``readout`` are ``[..., T, N]`` and ``x`` is
    ``[..., T, D]``.  With a ``[D, N]`` state and ``h_0 = 0``::

        h_t[d, n] = decay_t[n] * h_{t-1}[d, n] + gain_t[n] * x_t[d]
        y_t[d]    = sum_n readout_t[n] * h_t[d, n]

    Returns ``y`` with the shape of ``x``.  The backward pass runs the adjoint
    recurrence right to left over the stored states.
    """
    decay, gain, readout, x = (tensor(t) for t in (decay, gain, readout, x))
    if not (decay.shape == gain.shape == readout.shape):
        raise ShapeError(
            f"ssm_scan: decay/gain/readout shapes differ: {decay.shape}, {gain.shape}, {readout.shape}"
        )
    if decay.ndim < 2 or x.shape[:-1] != decay.shape[:-1]:
        raise ShapeError(f"ssm_scan: shapes {decay.shape} and {x.shape} disagree on [..., T]")
    lead, steps = x.shape[:-2], x.shape[-2]
    d, n = x.shape[-1], decay.shape[-1]
    # time-major layout: [T, batch, ...]
    a = np.moveaxis(decay.value.reshape(-1, steps, n), 1, 0)
    bb = np.moveaxis(gain.value.reshape(-1, steps, n), 1, 0)
    cc = np.moveaxis(readout.value.reshape(-1, steps, n), 1, 0)
    xx = np.moveaxis(x.value.reshape(-1, steps, d), 1, 0)
    batch = xx.shape[1]
    states = np.empty((steps, batch, d, n))
    y = np.empty((steps, batch, d))
    h = np.zeros((batch, d, n))
    for t in range(steps):
        np.multiply(h, a[t, :, None, :], out=h)
        h += xx[t, :, :, None] * bb[t, :, None, :]
        states[t] = h
        y[t] = (h @ cc[t, :, :, None])[..., 0]

    def vjp(g):
        gy = np.moveaxis(g.reshape(-1, steps, d), 1, 0)
        ga = np.zeros((steps, batch, n))
        gb = np.empty((steps, batch, n))
        gc = np.empty((steps, batch, n))
        gx = np.empty((steps, batch, d))
        lam = np.zeros((batch, d, n))  # adjoint of h_t
        tmp = np.empty((batch, d, n))
        for t in range(steps - 1, -1, -1):
            if t + 1 < steps:
                np.multiply(lam, a[t + 1, :, None, :], out=lam)
            np.multiply(gy[t, :, :, None], cc[t, :, None, :], out=tmp)
            lam += tmp
            gc[t] = np.einsum("bd,bdn->bn", gy[t], states[t])
            if t > 0:
                ga[t] = np.einsum("bdn,bdn->bn", lam, states[t - 1])
            gb[t] = np.einsum("bd,bdn->bn", xx[t], lam)
            gx[t] = np.einsum("bdn,bn->bd", lam, bb[t])
        shape_n = lead + (steps, n)
        return tuple(
            np.moveaxis(v, 0, 1).reshape(shape)
            for v, shape in ((ga, shape_n), (gb, shape_n), (gc, shape_n), (gx, x.shape))
        )

    return Tensor._result(np.moveaxis(y, 0, 1).reshape(x.shape), (decay, gain, readout, x), vjp, "ssm_scan")


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each of ``params``.

    Parameters that do not influence ``loss`` get a zero gradient.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    params = list(params)
    keep = {p.node_id for p in params if p.node_id is not None}
    grads: dict[int, np.ndarray] = {}
    if loss.node_id is not None:
        nodes: dict[int, Tensor] = {}
        stack_ = [loss]
        while stack_:
            node = stack_.pop()
            if node.node_id in nodes:
                continue
            nodes[node.node_id] = node
            stack_.extend(p for p in node.parents if p.node_id is not None and p.node_id not in nodes)
        grads[loss.node_id] = np.ones(loss.shape)
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.get(nid)
            if g is None or node.vjp is None:
                continue
            if node.parents:
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if parent.node_id is None:
                        continue
                    prev = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if prev is None else prev + pg
                if nid not in keep:
                    del grads[nid]
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        g = grads.get(p.node_id) if p.node_id is not None else None
        out[p] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` rebuilds the graph from ``params`` on every call; parameter values
    are perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    analytic = backward(f(params), params)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        ga = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(params).item()
            flat[i] = orig - step
            down = f(params).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(ga[i] - numeric) / max(1.0, abs(ga[i]))
            worst = max(worst, err)
    return worst
