"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`TapeNode` on its output.
Nodes carry a monotonically increasing creation id, so walking the recorded
graph in descending id order is a valid reverse topological order and
``backward`` can propagate gradients in a single pass. Gradients arriving at
a tensor from several consumers accumulate by summation.

Two dtypes are supported: float32 for training speed and float64 for
verification (finite differences are unreliable in float32). Binary ops
refuse mixed dtypes so a float32 operand cannot silently degrade a float64
gradient check.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "ShapeError",
    "set_nan_checks",
    "nan_checks_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "tensor_sum",
    "tensor_mean",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "elementwise_activation",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "conv2d",
    "max_pool2d",
    "global_max_pool",
    "backward",
    "zero_grads",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count()

_nan_checks = False


def set_nan_checks(enabled: bool) -> None:
    """Enable or disable debug NaN checks after every forward op."""
    global _nan_checks
    _nan_checks = bool(enabled)


def nan_checks_enabled() -> bool:
    return _nan_checks


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class TapeNode:
    """One recorded operation: enough to replay its backward rule.

    ``inputs`` are the operand tensors; ``saved`` holds whatever arrays the
    backward rule needs; ``backward_fn`` maps the output gradient to one
    gradient array (or None) per input. ``input_ids``/``output_id`` expose
    the creation-ordered ids, so inputs always precede the output.
    """

    __slots__ = ("op_kind", "inputs", "saved", "backward_fn", "output_id")

    def __init__(self, op_kind, inputs, saved, backward_fn, output_id):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        self.saved = saved
        self.backward_fn = backward_fn
        self.output_id = output_id

    @property
    def input_ids(self):
        return [t.tid for t in self.inputs]

    def __repr__(self):
        return f"TapeNode({self.op_kind}, inputs={self.input_ids}, out={self.output_id})"


class Tensor:
    """Row-major contiguous numeric array with an optional gradient slot.

    Data is treated as immutable once created; the exceptions are the
    ``grad`` slot (written by ``backward``) and in-place parameter updates
    performed by an optimizer that owns the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tid")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float64
        arr = np.asarray(arr, dtype=dtype)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional["Tensor"] = None
        self.node: Optional[TapeNode] = None
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data, off the tape and without gradient."""
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; all recording goes through the module-level ops
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _record(op_kind: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable, saved=None) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if _nan_checks and np.isnan(out.data).any():
        raise FloatingPointError(f"debug check: NaN in output of {op_kind}")
    if requires:
        out.node = TapeNode(op_kind, inputs, saved, backward_fn, out.tid)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.reshape(g, tuple(1 if i in axes else d for i, d in enumerate(a.shape)))
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _record("sum", out, (a,), bw)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.reshape(g, tuple(1 if i in axes else d for i, d in enumerate(a.shape)))
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) / count,)

    return _record("mean", out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two tensors")
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-d tensor, got {a.shape}")
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,),
                   lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    first = tensors[0]
    ax = axis % first.ndim
    for t in tensors[1:]:
        _check_same_dtype("concat", first, t)
        if t.ndim != first.ndim or any(
            i != ax and d != e for i, (d, e) in enumerate(zip(t.shape, first.shape))
        ):
            raise ShapeError(
                f"concat: incompatible shapes {first.shape} and {t.shape} on axis {ax}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return _record("concat", out, tensors, bw, saved={"offsets": offsets, "axis": ax})


# ---------------------------------------------------------------------------
# activations

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # derivative at exactly 0 is defined as 0
    out = np.where(mask, a.data, a.dtype.type(0))

    def bw(g):
        return (g * mask,)

    return _record("relu", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), bw)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise_activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(a)


def softmax(logits: Tensor) -> Tensor:
    """Row softmax with max-subtraction for overflow safety."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects a 2-d logits tensor, got {logits.shape}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (logits,), bw)


# ---------------------------------------------------------------------------
# 2-d convolution and pooling (N x C x H x W layout throughout)

def _out_side(size, kernel, pad, stride):
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, C*kh*kw, oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im_add(shape, cols: np.ndarray, kh: int, kw: int, stride: int,
                oh: int, ow: int) -> np.ndarray:
    """Scatter-add the patch matrix back onto a zeroed (N,C,Hp,Wp) array."""
    n, c = shape[:2]
    xp = np.zeros(shape, dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for a in range(kh):
        for b in range(kw):
            xp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += cols6[:, :, a, b]
    return xp


def conv2d(inp: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of an N x C x H x W batch.

    Output sides follow floor((side - kernel + 2*padding) / stride) + 1.
    """
    if inp.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {inp.shape} and {weight.shape}")
    if bias.ndim != 1:
        raise ShapeError(f"conv2d bias must be 1-d, got {bias.shape}")
    _check_same_dtype("conv2d", inp, weight)
    _check_same_dtype("conv2d", inp, bias)
    n, c, h, w = inp.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if bias.shape[0] != f:
        raise ShapeError(f"conv2d bias length {bias.shape[0]} != filter count {f}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    oh = _out_side(h, kh, padding, stride)
    ow = _out_side(w, kw, padding, stride)
    if padding:
        xp = np.pad(inp.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = inp.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = weight.data.reshape(f, c * kh * kw)
    out = (w2 @ cols).reshape(n, f, oh, ow) + bias.data.reshape(1, f, 1, 1)

    def bw(g):
        g2 = g.reshape(n, f, oh * ow)
        dw = np.einsum("nfl,nkl->fk", g2, cols).reshape(weight.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = np.einsum("fk,nfl->nkl", w2, g2)
        dxp = _col2im_add(xp.shape, dcols, kh, kw, stride, oh, ow)
        if padding:
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
        else:
            dx = dxp
        return np.ascontiguousarray(dx), dw, db

    return _record("conv2d", out, (inp, weight, bias), bw)


def max_pool2d(inp: Tensor, extent: int, stride: int) -> Tensor:
    """Windowed spatial max; gradient flows to the first argmax in each window."""
    if inp.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-d input, got {inp.shape}")
    n, c, h, w = inp.shape
    if extent > h or extent > w:
        raise ShapeError(f"max_pool2d extent {extent} exceeds input {h}x{w}")
    if extent < 1 or stride < 1:
        raise ValueError(f"max_pool2d: extent and stride must be >= 1, got {extent}, {stride}")
    oh = _out_side(h, extent, 0, stride)
    ow = _out_side(w, extent, 0, stride)
    cols = _im2col(inp.data, extent, extent, stride, oh, ow).reshape(n, c, extent * extent, oh * ow)
    arg = cols.argmax(axis=2)  # first occurrence in row-major window order
    out = np.take_along_axis(cols, arg[:, :, None, :], axis=2).reshape(n, c, oh, ow)

    def bw(g):
        dcols = np.zeros((n, c, extent * extent, oh * ow), dtype=g.dtype)
        np.put_along_axis(dcols, arg[:, :, None, :], g.reshape(n, c, 1, oh * ow), axis=2)
        dx = _col2im_add(inp.shape, dcols.reshape(n, c * extent * extent, oh * ow),
                         extent, extent, stride, oh, ow)
        return (dx,)

    return _record("max_pool2d", out, (inp,), bw)


def global_max_pool(inp: Tensor) -> Tensor:
    """Per-channel spatial maximum: (N,C,H,W) -> (N,C)."""
    if inp.ndim != 4:
        raise ShapeError(f"global_max_pool expects a 4-d input, got {inp.shape}")
    n, c, h, w = inp.shape
    flat = inp.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(n, c)

    def bw(g):
        dflat = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(dflat, arg[:, :, None], g.reshape(n, c, 1), axis=2)
        return (dflat.reshape(inp.shape),)

    return _record("global_max_pool", out, (inp,), bw)


# ---------------------------------------------------------------------------
# reverse pass

def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``root``.

    ``root`` must be a scalar produced on the tape. Gradients accumulate into
    any pre-existing ``grad`` values, so callers owning parameters should
    clear them between steps (see :func:`zero_grads`).
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor root")
    if root.node is None:
        raise ValueError("backward root is detached: not produced on the tape")
    if root.data.ndim != 0:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")

    # collect every tensor reachable through tape nodes
    seen = {root.tid: root}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for inp in t.node.inputs:
            if inp.tid not in seen:
                seen[inp.tid] = inp
                stack.append(inp)

    grads = {root.tid: np.ones((), dtype=root.dtype)}
    for t in sorted(seen.values(), key=lambda t: t.tid, reverse=True):
        g = grads.get(t.tid)
        if g is None or t.node is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None or not (inp.requires_grad or inp.node is not None):
                continue
            if inp.tid in grads:
                grads[inp.tid] = grads[inp.tid] + ig
            else:
                grads[inp.tid] = ig

    for t in seen.values():
        if not t.requires_grad:
            continue
        g = grads.get(t.tid)
        if g is None:
            continue
        if t.grad is None:
            t.grad = Tensor(np.array(g, dtype=t.dtype, copy=True))
        else:
            t.grad.data += g.astype(t.dtype, copy=False)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
