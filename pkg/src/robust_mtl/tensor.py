"""Dense numpy tensors with a recorded tape for reverse-mode differentiation.

Every operation that has at least one input with ``requires_grad`` records its
parents and a backward rule on the output tensor. :class:`Tape` linearizes the
graph below a scalar into topological order and replays the rules in reverse.

Gradients are *assigned* by a backward pass, never accumulated across passes,
so running the same tape twice yields bit-identical results.
"""

from __future__ import annotations

import io
import threading
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class TensorFormatError(ValueError):
    """A serialized tensor record could not be parsed."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that stops ops from being recorded (per thread)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # ndarray <op> Tensor must defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> "Tape":
        return backward(self)

    # -- operators --------------------------------------------------------
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

    def __abs__(self):
        return abs_(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def relu(self):
        return relu(self)

    def elu(self, alpha=1.0):
        return elu(self, alpha)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant tensor; scalars adopt the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    else:
        out.op = op
    return out


def custom_op(data, parents: Sequence[Tensor], backward_fn: BackwardFn, name: str = "custom") -> Tensor:
    """Record an op with a user-supplied backward rule.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    return _make(np.asarray(data), parents, backward_fn, name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def minimum(a, b) -> Tensor:
    """Elementwise minimum; at ties the whole gradient goes to ``a``."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    pick_a = (a.data <= b.data) | np.isnan(a.data)  # NaN on either side propagates

    def bw(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; at ties the whole gradient goes to ``a``."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "maximum")
    pick_a = (a.data >= b.data) | np.isnan(a.data)

    def bw(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- elementwise unary ----------------------------------------------------

def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(x: Tensor) -> Tensor:
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible instead of silently zeroing it
    return _make(np.maximum(x.data, 0).astype(x.dtype), (x,),
                 lambda g: (np.where(mask, g, 0.0),), "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0.0))).astype(x.dtype)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * (out + alpha)),), "elu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes where the input is inside (inclusive)."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _make(out, (x,), lambda g: (np.where(inside, g, 0.0),), "clip")


def scale_gradient(x: Tensor, factor: float) -> Tensor:
    """Identity forward (shares the data buffer); backward multiplies by ``factor``."""
    return _make(x.data, (x,), lambda g: (g * factor,), f"scale_gradient({factor})")


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axes, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        g = np.reshape(g, out.shape)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim + 1
    axis = axis % nd
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def flip(x: Tensor, axis: int = -1) -> Tensor:
    """Reverse along ``axis`` (horizontal flip of NCHW images is ``axis=-1``)."""
    return _make(np.ascontiguousarray(np.flip(x.data, axis)), (x,),
                 lambda g: (np.flip(g, axis),), "flip")


def _selection_matrix(index: np.ndarray, n: int, dtype) -> np.ndarray:
    m = np.zeros((len(index), n), dtype=dtype)
    m[np.arange(len(index)), index] = 1.0
    return m


def pad2d(x: Tensor, width: int, mode: str = "reflect") -> Tensor:
    """Pad the last two axes by ``width`` using ``reflect`` or ``edge`` indexing."""
    if width == 0:
        return x
    h, w = x.shape[-2:]
    rows = np.pad(np.arange(h), width, mode=mode)
    cols = np.pad(np.arange(w), width, mode=mode)
    sr = _selection_matrix(rows, h, x.dtype)
    sc = _selection_matrix(cols, w, x.dtype)
    out = x.data[..., rows[:, None], cols[None, :]]

    def bw(g):
        return (sr.T @ g @ sc,)

    return _make(out, (x,), bw, f"pad2d({mode})")


def avg_pool(x: Tensor, k: int = 3) -> Tensor:
    """Stride-1 ``k``x``k`` mean filter over the last two axes, no padding."""
    h, w = x.shape[-2:]
    if h < k or w < k:
        raise DimensionError(f"avg_pool: window {k} larger than input {x.shape}")
    out = sliding_window_view(x.data, (k, k), axis=(-2, -1)).mean(axis=(-2, -1))
    ho, wo = out.shape[-2:]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gs = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[..., i:i + ho, j:j + wo] += gs
        return (gx,)

    return _make(out, (x,), bw, "avg_pool")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of NCHW maps."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample2x")


def downsample2x(x: Tensor) -> Tensor:
    """2x2 mean pooling of NCHW maps (even sizes)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"downsample2x needs even spatial dims, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bw, "downsample2x")


# -- convolution, normalization, sampling ---------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OIkk kernel (no bias)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} too large for padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col: one strided copy per kernel tap, then one GEMM per sample so a
    # sample's result does not depend on its position in the batch
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

    def bw(g):
        gr = np.ascontiguousarray(g).reshape(n, o, ho * wo)
        gk = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gr).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(out, (x, kernel), bw, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of NCHW input.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like most frameworks). In eval
    mode the running buffers are used and left untouched.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        count = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                m = x.size // x.shape[1]
                gx = (inv_std.reshape(shape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def grid_sample(source: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of NCHW ``source`` at continuous pixel coordinates.

    ``grid[..., 0]`` is the column (x) and ``grid[..., 1]`` the row (y),
    with pixel centres at integer positions. Coordinates outside the image
    are clamped to the border; the gradient w.r.t. a clamped coordinate is 0.
    """
    if source.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != source.shape[0]:
        raise DimensionError(f"grid_sample: source {source.shape}, grid {grid.shape}")
    n, c, h, w = source.shape
    _, ho, wo, _ = grid.shape
    gx, gy = grid.data[..., 0], grid.data[..., 1]
    xc = np.clip(gx, 0, w - 1)
    yc = np.clip(gy, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    if w > 1:
        x0 = np.minimum(x0, w - 2)
    if h > 1:
        y0 = np.minimum(y0, h - 2)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0).astype(source.dtype)
    wy = (yc - y0).astype(source.dtype)

    flat = source.data.reshape(n, c, h * w)
    idx = [(y0 * w + x0), (y0 * w + x1), (y1 * w + x0), (y1 * w + x1)]
    idx = [i.reshape(n, 1, ho * wo) for i in idx]
    v00, v01, v10, v11 = (np.take_along_axis(flat, np.broadcast_to(i, (n, c, ho * wo)), axis=2)
                          for i in idx)
    wxf = wx.reshape(n, 1, ho * wo)
    wyf = wy.reshape(n, 1, ho * wo)
    w00 = (1 - wxf) * (1 - wyf)
    w01 = wxf * (1 - wyf)
    w10 = (1 - wxf) * wyf
    w11 = wxf * wyf
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(n, c, ho, wo)
    in_x = (gx >= 0) & (gx <= w - 1)
    in_y = (gy >= 0) & (gy <= h - 1)

    def bw(g):
        gf = g.reshape(n, c, ho * wo)
        gsrc = ggrid = None
        if source.requires_grad:
            base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            ids = np.concatenate([(base + i).ravel() for i in idx])
            wts = np.concatenate([(gf * wt).ravel() for wt in (w00, w01, w10, w11)])
            gsrc = np.bincount(ids, weights=wts, minlength=n * c * h * w)
            gsrc = gsrc.reshape(n, c, h, w).astype(g.dtype)
        if grid.requires_grad:
            dx = ((1 - wyf) * (v01 - v00) + wyf * (v11 - v10)) * gf
            dy = ((1 - wxf) * (v10 - v00) + wxf * (v11 - v01)) * gf
            dx = dx.sum(axis=1).reshape(n, ho, wo) * in_x
            dy = dy.sum(axis=1).reshape(n, ho, wo) * in_y
            ggrid = np.stack([dx, dy], axis=-1).astype(g.dtype)
        return gsrc, ggrid

    return _make(out, (source, grid), bw, "grid_sample")


# -- tape and backward ----------------------------------------------------

class Tape:
    """Topologically ordered record of the ops below one output tensor.

    ``nodes`` lists every tensor with ``requires_grad`` reachable from the
    output; each appears after all of its parents.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def output(self) -> Tensor:
        return self.nodes[-1]

    def backward(self) -> None:
        out = self.output
        if out.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones(out.shape, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros(node.shape, dtype=node.dtype)
            node.grad = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            if node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor with ``requires_grad`` below ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = Tape.record(loss)
    tape.backward()
    return tape


# -- gradient check -------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    n_checked: int

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x, tol: float = 1e-4, step: float = 1e-5,
               max_coords: int = 64, seed: int = 0, floor: float = 1e-6) -> GradCheckResult:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    All coordinates are checked when ``x`` has at most ``max_coords``
    entries, otherwise a seeded random subset of that size. The per
    coordinate error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = xt.grad.reshape(-1)

    flat = base.reshape(-1)
    if flat.size <= max_coords:
        coords = np.arange(flat.size)
    else:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    with no_grad():
        for k in coords:
            probe = flat.copy()
            probe[k] = flat[k] + step
            fp = f(Tensor(probe.reshape(base.shape))).item()
            probe[k] = flat[k] - step
            fm = f(Tensor(probe.reshape(base.shape))).item()
            numeric = (fp - fm) / (2 * step)
            a = analytic[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return GradCheckResult(bool(worst < tol), float(worst), int(len(coords)))


# -- serialization --------------------------------------------------------

def write_tensor(fh: BinaryIO, array) -> None:
    """Write one ``TNSR`` record: ASCII header line, then little-endian float32."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    header = "TNSR " + " ".join(str(d) for d in (arr.ndim, *arr.shape)) + "\n"
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO, source: str = "<stream>") -> np.ndarray:
    offset = fh.tell() if fh.seekable() else -1
    line = fh.readline()
    if not line:
        raise EOFError
    try:
        parts = line.decode("ascii").split()
        if parts[0] != "TNSR":
            raise ValueError("bad magic")
        ndim = int(parts[1])
        shape = tuple(int(p) for p in parts[2:])
        if len(shape) != ndim or any(d < 0 for d in shape):
            raise ValueError("shape does not match ndim")
    except (UnicodeDecodeError, ValueError, IndexError) as exc:
        raise TensorFormatError(f"{source}: malformed TNSR header at offset {offset}: {line[:40]!r}") from exc
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError(f"{source}: truncated TNSR payload at offset {offset}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensors(path, arrays: Iterable) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            write_tensor(fh, a)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            try:
                out.append(read_tensor(fh, str(path)))
            except EOFError:
                return out


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
