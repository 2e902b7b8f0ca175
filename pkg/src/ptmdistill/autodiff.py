"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive's backward rule is itself written with primitives, so a
gradient produced with ``create_graph=True`` can be differentiated again.
That is what gradient matching needs: the matching loss is a function of
parameter gradients and is differentiated with respect to input pixels.

Broadcasting is deliberately narrow. Binary elementwise ops accept equal
shapes or a 0-d operand; every other broadcast goes through an explicit
:func:`expand` (used by :func:`add_bias` and the reductions).
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "DisconnectedGradientWarning",
    "grad",
    "no_grad",
    "tensor",
    "constant",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DisconnectedGradientWarning(UserWarning):
    """A requested gradient target does not take part in the output graph."""


_state = threading.local()
_sequence = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    previous = _grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    """Context manager: operations inside record nothing."""
    return _grad_mode(False)


class Node:
    __slots__ = ("op", "inputs", "attrs", "seq")

    def __init__(self, op, inputs, attrs):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.seq = next(_sequence)


class Tensor:
    """Dense float64 array, optionally attached to a differentiation graph."""

    __slots__ = ("data", "node", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.node: Node | None = None
        self.requires_grad = requires_grad

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
    def attached(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", attached" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _apply(op, inputs: Sequence[Tensor], **attrs) -> Tensor:
    out = Tensor(op.forward(*(t.data for t in inputs), **attrs))
    if _grad_enabled() and any(t.attached for t in inputs):
        out.node = Node(op, tuple(inputs), attrs)
    return out


def _check_elementwise(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return tsum(g)  # only 0-d operands broadcast


# ---------------------------------------------------------------- primitives


class Op:
    name = ""

    @staticmethod
    def forward(*arrays, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(g, inputs, needs, **attrs):
        raise NotImplementedError


class Add(Op):
    name = "add"
    forward = staticmethod(lambda a, b: a + b)

    @staticmethod
    def backward(g, inputs, needs):
        a, b = inputs
        return (_reduce_to(g, a.shape) if needs[0] else None,
                _reduce_to(g, b.shape) if needs[1] else None)


class Sub(Op):
    name = "sub"
    forward = staticmethod(lambda a, b: a - b)

    @staticmethod
    def backward(g, inputs, needs):
        a, b = inputs
        return (_reduce_to(g, a.shape) if needs[0] else None,
                _reduce_to(neg(g), b.shape) if needs[1] else None)


class Mul(Op):
    name = "mul"
    forward = staticmethod(lambda a, b: a * b)

    @staticmethod
    def backward(g, inputs, needs):
        a, b = inputs
        return (_reduce_to(g * b, a.shape) if needs[0] else None,
                _reduce_to(g * a, b.shape) if needs[1] else None)


class Div(Op):
    name = "div"
    forward = staticmethod(lambda a, b: a / b)

    @staticmethod
    def backward(g, inputs, needs):
        a, b = inputs
        ga = _reduce_to(g / b, a.shape) if needs[0] else None
        gb = _reduce_to(neg(g * a) / (b * b), b.shape) if needs[1] else None
        return ga, gb


class Neg(Op):
    name = "neg"
    forward = staticmethod(lambda a: -a)

    @staticmethod
    def backward(g, inputs, needs):
        return (neg(g),)


class Pow(Op):
    name = "pow"

    @staticmethod
    def forward(a, p):
        return a**p

    @staticmethod
    def backward(g, inputs, needs, p):
        (a,) = inputs
        if p == 1.0:
            return (g,)
        return (g * (power(a, p - 1.0) * p),)


class Exp(Op):
    name = "exp"
    forward = staticmethod(np.exp)

    @staticmethod
    def backward(g, inputs, needs):
        return (g * exp(inputs[0]),)


class Log(Op):
    name = "log"
    forward = staticmethod(np.log)

    @staticmethod
    def backward(g, inputs, needs):
        return (g / inputs[0],)


class Relu(Op):
    name = "relu"
    forward = staticmethod(lambda a: np.maximum(a, 0.0))

    @staticmethod
    def backward(g, inputs, needs):
        mask = Tensor((inputs[0].data > 0.0).astype(np.float64))
        return (g * mask,)


class MatMul(Op):
    name = "matmul"
    forward = staticmethod(np.matmul)

    @staticmethod
    def backward(g, inputs, needs):
        a, b = inputs
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(a, axes):
        return np.transpose(a, axes)

    @staticmethod
    def backward(g, inputs, needs, axes):
        return (transpose(g, tuple(int(i) for i in np.argsort(axes))),)


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        return a.reshape(shape)

    @staticmethod
    def backward(g, inputs, needs, shape):
        return (reshape(g, inputs[0].shape),)


class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, inputs, needs, axis, keepdims):
        shape = inputs[0].shape
        kept = tuple(1 if i in axis else n for i, n in enumerate(shape))
        if g.shape != kept:
            g = reshape(g, kept)
        return (expand(g, shape),)


class Expand(Op):
    name = "expand"

    @staticmethod
    def forward(a, shape):
        return np.broadcast_to(a, shape)

    @staticmethod
    def backward(g, inputs, needs, shape):
        src = inputs[0].shape
        axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s != t)
        return (tsum(g, axes, keepdims=True) if axes else g,)


def _has_array(key) -> bool:
    return any(isinstance(k, np.ndarray) for k in key)


class Index(Op):
    name = "index"

    @staticmethod
    def forward(a, key):
        return a[key]

    @staticmethod
    def backward(g, inputs, needs, key):
        return (index_add(g, key, inputs[0].shape),)


class IndexAdd(Op):
    """Scatter ``g`` into zeros of ``shape`` at ``key``; adjoint of :class:`Index`."""

    name = "index_add"

    @staticmethod
    def forward(g, key, shape):
        out = np.zeros(shape)
        if _has_array(key):
            np.add.at(out, key, g)
        else:
            out[key] = g
        return out

    @staticmethod
    def backward(g, inputs, needs, key, shape):
        return (_apply(Index, (g,), key=key),)


def _window_view(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


class Unfold(Op):
    """(B, C, H, W) -> (C*k*k, B*L) patch matrix (im2col), ready for matmul."""

    name = "unfold"

    @staticmethod
    def forward(x, k, stride, pad):
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = _window_view(x, k, stride)  # B, C, Ho, Wo, k, k
        b, c, ho, wo = win.shape[:4]
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo)

    @staticmethod
    def backward(g, inputs, needs, k, stride, pad):
        return (fold(g, inputs[0].shape, k, stride, pad),)


class Fold(Op):
    """Scatter-add a (C*k*k, B*L) patch matrix back to image layout (col2im)."""

    name = "fold"

    @staticmethod
    def forward(cols, shape, k, stride, pad):
        b, c, h, w = shape
        hp, wp = h + 2 * pad, w + 2 * pad
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
        out = np.zeros((b, c, hp, wp))
        blocks = cols.reshape(c, k, k, b, ho, wo)
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    blocks[:, i, j].transpose(1, 0, 2, 3))
        if pad:
            out = out[:, :, pad:pad + h, pad:pad + w]
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(g, inputs, needs, shape, k, stride, pad):
        return (unfold(g, k, stride, pad),)


class InstanceNorm(Op):
    """Per-sample, per-channel standardisation over the spatial axes (no affine)."""

    name = "instance_norm"

    @staticmethod
    def forward(x, eps):
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
        return xc / np.sqrt(var + eps)

    @staticmethod
    def backward(g, inputs, needs, eps):
        (x,) = inputs
        if not _grad_enabled():
            xhat = InstanceNorm.forward(x.data, eps)
            var = np.var(x.data, axis=(2, 3), keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            gd = g.data
            dx = inv * (gd - gd.mean(axis=(2, 3), keepdims=True)
                        - xhat * np.mean(gd * xhat, axis=(2, 3), keepdims=True))
            return (Tensor(dx),)
        shape = x.shape
        xc = x - expand(mean(x, axis=(2, 3), keepdims=True), shape)
        inv = expand(power(mean(xc * xc, axis=(2, 3), keepdims=True) + eps, -0.5), shape)
        xhat = xc * inv
        g_mean = expand(mean(g, axis=(2, 3), keepdims=True), shape)
        gx_mean = expand(mean(g * xhat, axis=(2, 3), keepdims=True), shape)
        return (inv * (g - g_mean - xhat * gx_mean),)


class TakeLast(Op):
    name = "take_last"

    @staticmethod
    def forward(a, idx):
        return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(g, inputs, needs, idx):
        return (_apply(PutLast, (g,), idx=idx, n=inputs[0].shape[-1]),)


class PutLast(Op):
    name = "put_last"

    @staticmethod
    def forward(g, idx, n):
        out = np.zeros(g.shape + (n,))
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return out

    @staticmethod
    def backward(g, inputs, needs, idx, n):
        return (_apply(TakeLast, (g,), idx=idx),)


class Concat(Op):
    name = "concat"

    @staticmethod
    def forward(*arrays, axis):
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(g, inputs, needs, axis):
        grads = []
        start = 0
        for x, need in zip(inputs, needs):
            stop = start + x.shape[axis]
            if need:
                key = (slice(None),) * axis + (slice(start, stop),)
                grads.append(_apply(Index, (g,), key=key))
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


PRIMITIVES = {
    op.name: op
    for op in (Add, Sub, Mul, Div, Neg, Pow, Exp, Log, Relu, MatMul, Transpose,
               Reshape, Sum, Expand, Index, IndexAdd, Unfold, Fold, InstanceNorm,
               TakeLast, PutLast, Concat)
}


# ------------------------------------------------------------ public ops


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise("add", a, b)
    return _apply(Add, (a, b))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise("sub", a, b)
    return _apply(Sub, (a, b))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise("mul", a, b)
    return _apply(Mul, (a, b))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise("div", a, b)
    return _apply(Div, (a, b))


def neg(a) -> Tensor:
    return _apply(Neg, (constant(a),))


def power(a, p: float) -> Tensor:
    return _apply(Pow, (constant(a),), p=float(p))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    return _apply(Exp, (constant(a),))


def log(a) -> Tensor:
    return _apply(Log, (constant(a),))


def relu(a) -> Tensor:
    return _apply(Relu, (constant(a),))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _apply(MatMul, (a, b))


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return _apply(Transpose, (a,), axes=axes)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    try:
        target = a.data.reshape(shape).shape
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _apply(Reshape, (a,), shape=target)


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(int(i) % ndim for i in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    return _apply(Sum, (a,), axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def expand(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    if a.shape == shape:
        return a
    return _apply(Expand, (a,), shape=shape)


def _norm_key(key, shape) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    out = []
    for k in key:
        if isinstance(k, (list, np.ndarray)):
            out.append(np.asarray(k, dtype=np.intp))
        else:
            out.append(k)
    return tuple(out)


def index(a, key) -> Tensor:
    a = constant(a)
    return _apply(Index, (a,), key=_norm_key(key, a.shape))


def index_add(g, key, shape) -> Tensor:
    return _apply(IndexAdd, (constant(g),), key=_norm_key(key, shape), shape=tuple(shape))


def unfold(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Patch matrix of shape (C*k*k, B*Ho*Wo)."""
    x = constant(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold: expected (B, C, H, W), got {x.shape}")
    return _apply(Unfold, (x,), k=k, stride=stride, pad=pad)


def fold(cols, shape, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    return _apply(Fold, (constant(cols),), shape=tuple(shape), k=k, stride=stride, pad=pad)


def take_last(a, idx: np.ndarray) -> Tensor:
    a = constant(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: index shape {idx.shape} vs tensor {a.shape}")
    return _apply(TakeLast, (a,), idx=idx)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    return _apply(Concat, tensors, axis=axis)


# ------------------------------------------------------------ composites


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, C, H, W) with (O, C, k, k)."""
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    bsz, _, h, wd = x.shape
    o, c, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    cols = unfold(x, k, stride, padding)  # CKK, B*L
    out = matmul(reshape(w, (o, c * k * k)), cols)
    out = transpose(reshape(out, (o, bsz, ho, wo)), (1, 0, 2, 3))
    return add_bias(out, b) if b is not None else out


def _windows(x: Tensor, k: int) -> Tensor:
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pool: spatial size {(h, w)} not divisible by {k}")
    x = reshape(x, (bsz, c, h // k, k, w // k, k))
    x = transpose(x, (0, 1, 2, 4, 3, 5))
    return reshape(x, (bsz, c, h // k, w // k, k * k))


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = constant(x)
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pool: spatial size {(h, w)} not divisible by {k}")
    return mean(reshape(x, (bsz, c, h // k, k, w // k, k)), axis=(3, 5))


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping max pool; ties route to the first maximum in scan order."""
    win = _windows(constant(x), k)
    return take_last(win, np.argmax(win.data, axis=-1))


def global_avg_pool(x) -> Tensor:
    return mean(constant(x), axis=(2, 3))


def add_bias(x, b) -> Tensor:
    """Add a per-channel vector ``b`` along axis 1 of ``x``."""
    x, b = constant(x), constant(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    shape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    return x + expand(reshape(b, shape), x.shape)


def channel_scale(x, w) -> Tensor:
    x, w = constant(x), constant(w)
    shape = (1, w.shape[0]) + (1,) * (x.ndim - 2)
    return x * expand(reshape(w, shape), x.shape)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, transpose(w))
    return add_bias(out, b) if b is not None else out


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    x = constant(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected (B, C, H, W), got {x.shape}")
    out = _apply(InstanceNorm, (x,), eps=float(eps))
    if weight is not None:
        out = channel_scale(out, weight)
    if bias is not None:
        out = add_bias(out, bias)
    return out


def flatten(x) -> Tensor:
    x = constant(x)
    return reshape(x, (x.shape[0], -1))


def _stop_max(x: Tensor, axis: int) -> Tensor:
    return Tensor(np.max(x.data, axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    z = x - expand(_stop_max(x, axis), x.shape)
    e = exp(z)
    return e / expand(tsum(e, axis, keepdims=True), x.shape)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    z = x - expand(_stop_max(x, axis), x.shape)
    return z - expand(log(tsum(exp(z), axis, keepdims=True)), x.shape)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = constant(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    picked = tsum(log_softmax(logits) * Tensor(one_hot(labels, logits.shape[1])), axis=1)
    return neg(mean(picked))


def safe_norm(x: Tensor, axis) -> tuple[Tensor, np.ndarray]:
    """L2 norm along ``axis``; zero vectors get norm 1 and a True mask entry."""
    sq = tsum(x * x, axis)
    zero = sq.data == 0.0
    if zero.any():
        sq = sq + Tensor(zero.astype(np.float64))
    return sqrt(sq), zero


def l2_norm(x, axis=None) -> Tensor:
    return sqrt(tsum(constant(x) * constant(x), axis))


def normalize_rows(x) -> Tensor:
    """Divide each row of a 2-D tensor by its L2 norm (zero rows stay zero)."""
    x = constant(x)
    norm, _ = safe_norm(x, 1)
    return x / expand(reshape(norm, (x.shape[0], 1)), x.shape)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis; zero vectors give 0."""
    a, b = constant(a), constant(b)
    _check_elementwise("cosine_similarity", a, b)
    axis = a.ndim - 1
    na, _ = safe_norm(a, axis)
    nb, _ = safe_norm(b, axis)
    return tsum(a * b, axis) / (na * nb)


# ------------------------------------------------------------ gradients


def _key(t: Tensor):
    return t.node if t.node is not None else t


def _collect(output: Tensor) -> list[Node]:
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [output.node] if output.node is not None else []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    nodes.sort(key=lambda n: n.seq)
    return nodes


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Return d(output)/d(w) for each ``w`` in ``wrt``.

    With ``create_graph`` the returned tensors are graph-attached and can be
    differentiated again. Targets that do not feed ``output`` get zeros and a
    :class:`DisconnectedGradientWarning`.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    if not output.attached:
        raise ValueError("grad: output is not attached to a graph")
    keep = {id(_key(w)) for w in wrt}
    adjoint: dict = {_key(output): Tensor(np.ones_like(output.data))}
    with _grad_mode(create_graph):
        for node in reversed(_collect(output)):
            g = adjoint.get(node) if id(node) in keep else adjoint.pop(node, None)
            if g is None:
                continue
            needs = tuple(t.attached for t in node.inputs)
            grads = node.op.backward(g, node.inputs, needs, **node.attrs)
            for t, gt, need in zip(node.inputs, grads, needs):
                if not need or gt is None:
                    continue
                k = _key(t)
                prev = adjoint.get(k)
                adjoint[k] = gt if prev is None else prev + gt
    result = []
    for w in wrt:
        g = adjoint.get(_key(w))
        if g is None:
            warnings.warn(
                f"grad: target {w!r} is not part of the output graph; returning zeros",
                DisconnectedGradientWarning,
                stacklevel=2,
            )
            g = Tensor(np.zeros_like(w.data))
        result.append(g)
    return result


class Graph:
    """Ordered record of the operations that produced ``output``.

    ``replay`` re-executes the record from the leaf values and returns the
    recomputed output array.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _collect(output)

    def __len__(self) -> int:
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [n.op.name for n in self.nodes]

    def replay(self) -> np.ndarray:
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            arrays = [values[id(t.node)] if t.node is not None else t.data for t in node.inputs]
            values[id(node)] = node.op.forward(*arrays, **node.attrs)
        if self.output.node is None:
            return self.output.data
        return values[id(self.output.node)]


def value_and_grad(fn: Callable[..., Tensor], *args: np.ndarray):
    """Evaluate ``fn`` on fresh leaves built from ``args``; return value and grads."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in args]
    out = fn(*leaves)
    return out.data.copy(), [g.data for g in grad(out, leaves)]
