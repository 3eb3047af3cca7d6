"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors store float32 by default. Every op result that depends on a
``requires_grad`` operand keeps a reference to the :class:`Function` that made
it; :class:`Tape` linearises that graph (creation order is a valid topological
order because inputs always exist before outputs).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import NondeterminismError, NumericError, ShapeError

_node_ids = itertools.count()

OPS: dict[str, type["Function"]] = {}


def register(kind):
    def deco(cls):
        cls.kind = kind
        OPS[kind] = cls
        return cls

    return deco


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_ctx")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=np.float32, name=None):
        arr = np.array(data, dtype=dtype)
        if not np.isfinite(arr).all():
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_node_ids)
        self.name = name
        self._ctx = None

    @classmethod
    def _from_op(cls, data, ctx):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = ctx is not None
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = None
        out._ctx = ctx
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype == np.float64 else np.float32
    return Tensor(x, dtype=dtype)


def _operand(x, ref_dtype):
    # bare python scalars follow the precision of the array operands
    if ref_dtype is not None and not isinstance(x, (Tensor, np.ndarray)) and np.ndim(x) == 0:
        return as_tensor(x, ref_dtype)
    return as_tensor(x)


class Function:
    """One differentiable op. Subclasses implement ``forward`` on arrays and
    ``backward`` returning one gradient (or None) per input."""

    kind = "?"

    def __init__(self, **attrs):
        self.attrs = attrs
        self.inputs: tuple[Tensor, ...] = ()
        self.saved: dict = {}

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *operands, **attrs):
        ref = next((x.dtype for x in operands if isinstance(x, (Tensor, np.ndarray)) and x.dtype.kind == "f"), None)
        tensors = tuple(_operand(x, ref) for x in operands)
        fn = cls(**attrs)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = fn.forward(*(t.data for t in tensors), **attrs)
        if not np.isfinite(out).all():
            raise NumericError(f"{cls.kind} produced non-finite values")
        if any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            return Tensor._from_op(out, fn)
        return Tensor._from_op(out, None)


def apply(kind: str, *operands, **attrs) -> Tensor:
    """Generic entry point: run op ``kind`` on ``operands``."""
    try:
        cls = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return cls.apply(*operands, **attrs)


def unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"shapes {shapes} are not broadcast-compatible") from None


# ----------------------------------------------------------------------------
# elementwise


@register("add")
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.saved = {"shapes": (a.shape, b.shape)}
        return a + b

    def backward(self, grad):
        sa, sb = self.saved["shapes"]
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


@register("sub")
class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.saved = {"shapes": (a.shape, b.shape)}
        return a - b

    def backward(self, grad):
        sa, sb = self.saved["shapes"]
        return unbroadcast(grad, sa), unbroadcast(-grad, sb)


@register("mul")
class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.saved = {"a": a, "b": b}
        return a * b

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


@register("div")
class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.saved = {"a": a, "b": b}
        return a / b

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        ga = grad / b
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a / b, b.shape)


@register("neg")
class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


@register("relu")
class ReLU(Function):
    def forward(self, a):
        self.saved = {"mask": a > 0}
        return np.where(self.saved["mask"], a, np.zeros((), dtype=a.dtype))

    def backward(self, grad):
        return (grad * self.saved["mask"],)


@register("exp")
class Exp(Function):
    def forward(self, a):
        with np.errstate(over="ignore"):
            out = np.exp(a)
        self.saved = {"out": out}
        return out

    def backward(self, grad):
        return (grad * self.saved["out"],)


@register("log")
class Log(Function):
    def forward(self, a):
        self.saved = {"a": a}
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, grad):
        return (grad / self.saved["a"],)


@register("sqrt")
class Sqrt(Function):
    def forward(self, a):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(a)
        self.saved = {"out": out}
        return out

    def backward(self, grad):
        return (grad / (2 * self.saved["out"]),)


def stable_sigmoid(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


@register("sigmoid")
class Sigmoid(Function):
    def forward(self, a):
        out = stable_sigmoid(a)
        self.saved = {"out": out}
        return out

    def backward(self, grad):
        s = self.saved["out"]
        return (grad * s * (1 - s),)


# ----------------------------------------------------------------------------
# linear algebra


@register("matmul")
class MatMul(Function):
    """``a @ b`` over the last two axes, numpy broadcasting on leading axes."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        self.saved = {"a": a, "b": b}
        return _matmul(a, b)

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        ga = _matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            # fold every leading axis into one contraction for the weight gradient
            k, m = a.shape[-1], grad.shape[-1]
            gb = kernels.matmul_tn(a.reshape(-1, k), grad.reshape(-1, m))
        else:
            gb = _matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


def _matmul(a, b):
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    if b.ndim == 2:
        lead = a.shape[:-2]
        out = kernels.batched_matmul(a.reshape(1, -1, k), b[None])
        return out.reshape(lead + (m, n))
    lead = _broadcast_shape(a.shape[:-2], b.shape[:-2])
    a3 = np.broadcast_to(a, lead + (m, k)).reshape(-1, m, k)
    b3 = np.broadcast_to(b, lead + (k, n)).reshape(-1, k, n)
    return kernels.batched_matmul(a3, b3).reshape(lead + (m, n))


# ----------------------------------------------------------------------------
# shape manipulation


@register("reshape")
class Reshape(Function):
    def forward(self, a, shape):
        self.saved = {"shape": a.shape}
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.saved["shape"]),)


@register("transpose")
class Transpose(Function):
    def forward(self, a, axes):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
        self.saved = {"axes": axes}
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.saved["axes"])),)


@register("broadcast_to")
class BroadcastTo(Function):
    def forward(self, a, shape):
        self.saved = {"shape": a.shape}
        _broadcast_shape(a.shape, shape)
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    def backward(self, grad):
        return (unbroadcast(grad, self.saved["shape"]),)


@register("getitem")
class GetItem(Function):
    def forward(self, a, index):
        self.saved = {"shape": a.shape, "dtype": a.dtype, "index": index}
        try:
            return np.ascontiguousarray(a[index])
        except IndexError as exc:
            raise ShapeError(str(exc)) from None

    def backward(self, grad):
        out = np.zeros(self.saved["shape"], dtype=grad.dtype)
        np.add.at(out, self.saved["index"], grad)
        return (out,)


@register("concat")
class Concat(Function):
    def forward(self, *arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        self.saved = {"splits": np.cumsum([x.shape[axis] for x in arrays])[:-1], "axis": axis}
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.saved["splits"], axis=self.saved["axis"]))


@register("upsample_bilinear")
class UpsampleBilinear(Function):
    """Bilinear upscaling of ``(..., h, w, c)`` grids by an integer factor."""

    def forward(self, a, factor):
        if a.ndim < 3:
            raise ShapeError("upsample_bilinear expects (..., h, w, c)")
        self.saved = {"shape": a.shape, "factor": factor}
        h, w, c = a.shape[-3:]
        out = kernels.upsample_bilinear(a.reshape(-1, h, w, c), factor)
        return out.reshape(a.shape[:-3] + out.shape[1:])

    def backward(self, grad):
        shape, factor = self.saved["shape"], self.saved["factor"]
        hh, ww, c = grad.shape[-3:]
        g = kernels.upsample_bilinear_adjoint(grad.reshape(-1, hh, ww, c), factor)
        return (g.reshape(shape),)


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@register("sum")
class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        axis = _norm_axis(axis, a.ndim)
        self.saved = {"shape": a.shape, "axis": axis, "keepdims": keepdims}
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape, axis, keepdims = self.saved["shape"], self.saved["axis"], self.saved["keepdims"]
        if not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


@register("mean")
class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        axis = _norm_axis(axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axis]))
        self.saved = {"shape": a.shape, "axis": axis, "keepdims": keepdims, "count": count}
        return np.asarray(a.sum(axis=axis, keepdims=keepdims) / a.dtype.type(count))

    def backward(self, grad):
        s = self.saved
        if not s["keepdims"]:
            grad = np.expand_dims(grad, s["axis"])
        return (np.broadcast_to(grad / grad.dtype.type(s["count"]), s["shape"]).copy(),)


@register("logsumexp")
class LogSumExp(Function):
    """Max-shifted log-sum-exp along one axis (reduced away)."""

    def forward(self, a, axis=-1):
        m = a.max(axis=axis, keepdims=True)
        e = np.exp(a - m)
        s = e.sum(axis=axis, keepdims=True)
        self.saved = {"p": e / s, "axis": axis}
        return np.squeeze(m + np.log(s), axis=axis)

    def backward(self, grad):
        axis = self.saved["axis"]
        return (np.expand_dims(grad, axis) * self.saved["p"],)


@register("softmax")
class Softmax(Function):
    def forward(self, a, axis=-1):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        p = e / e.sum(axis=axis, keepdims=True)
        self.saved = {"p": p, "axis": axis}
        return p

    def backward(self, grad):
        p, axis = self.saved["p"], self.saved["axis"]
        return (p * (grad - (grad * p).sum(axis=axis, keepdims=True)),)


# ----------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def relu(a):
    return ReLU.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def matmul(a, b):
    return MatMul.apply(a, b)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def broadcast_to(a, shape):
    return BroadcastTo.apply(a, shape=tuple(shape))


def getitem(a, index):
    return GetItem.apply(a, index=index)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def upsample_bilinear(a, factor):
    return UpsampleBilinear.apply(a, factor=int(factor))


def sum_(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def logsumexp(a, axis=-1):
    return LogSumExp.apply(a, axis=axis)


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)


def masked_sum(a, mask, axis=None):
    """Sum of ``a * mask`` over ``axis`` (mask broadcast against ``a``)."""
    return sum_(mul(a, mask), axis=axis)


# ----------------------------------------------------------------------------
# tape & backward


@dataclass
class TapeEntry:
    node_id: int
    kind: str
    input_ids: tuple[int, ...]
    saved: dict


class Tape:
    """Ordered op records reachable from one output; inputs precede users."""

    def __init__(self, nodes: Sequence[Tensor], leaves: Sequence[Tensor]):
        self.nodes = list(nodes)
        self.leaves = list(leaves)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes, leaves = [], []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen.add(t.node_id)
            if t._ctx is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            nodes.append(t)
            stack.extend(t._ctx.inputs)
        nodes.sort(key=lambda t: t.node_id)
        leaves.sort(key=lambda t: t.node_id)
        return cls(nodes, leaves)

    def entries(self) -> list[TapeEntry]:
        return [
            TapeEntry(t.node_id, t._ctx.kind, tuple(i.node_id for i in t._ctx.inputs), t._ctx.saved)
            for t in self.nodes
        ]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, params: Sequence[Tensor] = (), tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from scalar ``loss``.

    Returns gradients keyed by ``node_id`` for every requires_grad leaf on the
    tape plus every tensor in ``params``; unreached ones get zeros. Leaf
    ``.grad`` attributes are set as a side effect.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        ctx = node._ctx
        for inp, gi in zip(ctx.inputs, ctx.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi
    table = {}
    for leaf in list(tape.leaves) + list(params):
        g = grads.get(leaf.node_id)
        if g is None or not leaf.requires_grad:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        table[leaf.node_id] = g
    return table


# ----------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    """Max relative error per parameter between analytic and numeric gradients."""

    errors: dict[str, float]
    tol: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    tol: float = 1e-4,
    max_elements: int = 10_000,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradReport:
    """Compare ``backward`` against central differences of ``f``.

    ``f`` takes no arguments and must read ``params`` through closure; their
    data is promoted to float64 for the duration of the check and restored
    afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    originals = [p.data for p in params]
    rng = np.random.default_rng(seed)
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        first, second = f(), f()
        if first.data.tobytes() != second.data.tobytes():
            raise NondeterminismError("f returned different values for identical inputs")
        analytic = backward(second, params)
        errors, checked = {}, {}
        for name, p in zip(names, params):
            flat = p.data.reshape(-1)
            grad = analytic[p.node_id].reshape(-1)
            if flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            else:
                idx = np.arange(flat.size)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                worst = max(worst, float(relative_error(grad[i], numeric)))
            errors[name] = worst
            checked[name] = len(idx)
        return GradReport(errors, tol, checked)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
