"""A small define-by-run reverse-mode autodiff engine on top of numpy arrays.

Every differentiable operation produces a new :class:`Tensor` whose node
records its parents, a backward closure and a monotonically increasing
sequence number.  :func:`backward` visits the reachable nodes in exactly the
reverse of their recording order, so the recording order is the tape.

Arrays are always materialized (no views are kept between operations).
Computations run in float32 unless :func:`precision` selects another dtype,
which the gradient checks use to run in float64.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, ParameterError

__all__ = [
    "Tensor",
    "GradientTape",
    "no_grad",
    "precision",
    "get_default_dtype",
    "elementwise",
    "conv2d",
    "upsample_nearest",
    "avg_pool",
    "channel_stats",
    "reduce",
    "concat",
    "backward",
    "STD_EPS",
]

STD_EPS = 1e-5
# stride-1 convolutions with fewer outputs than inputs, kernels at least this
# wide and batches at least this large go through the FFT route (measured faster)
FFT_MIN_KERNEL = 7
FFT_MIN_BATCH = 4

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def no_grad():
    """Disable recording; results are plain constants."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def precision(dtype):
    """Set the dtype newly created tensors are cast to."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def branch_trace():
    """Collect the branch masks chosen by piecewise ops (relu, clamp) inside the block.

    Finite-difference checks use this to recognise perturbations that cross a
    kink, where the numeric derivative is meaningless.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


def _note_branch(mask: np.ndarray) -> None:
    trace = getattr(_state, "branches", None)
    if trace is not None:
        trace.append(mask)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._seq = next(_seq)
        out.op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    # -- basic properties ------------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._seq = next(_seq)
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", _lift(other, self), self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _lift(other, self), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", _lift(other, self), self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _lift(other, self), self)

    def __neg__(self):
        return elementwise("negate", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def relu(self):
        return elementwise("relu", self)

    def tanh(self):
        return elementwise("tanh", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def softplus(self):
        return elementwise("softplus", self)

    def square(self):
        return elementwise("square", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# -- gradient tape -------------------------------------------------------------


class GradientTape:
    """Ordered view of the recorded nodes reachable from an output.

    Nodes appear in forward (recording) order; :meth:`reverse` gives the order
    the backward pass uses.
    """

    def __init__(self, output: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def reverse(self) -> list[Tensor]:
        return self.nodes[::-1]


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires grad.

    Gradients accumulate across calls until ``zero_grad`` is used.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ContractError("backward called on a tensor that is not attached to a tape")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in GradientTape(output).reverse():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy() if node._backward is None else g
            else:
                node.grad = node.grad + g
        if node._backward is None:
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


# -- elementwise ---------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible") from None


_BINARY = {"add", "sub", "mul", "div"}
_UNARY = {"relu", "tanh", "exp", "log", "softplus", "square", "sqrt", "negate", "sigmoid"}


def elementwise(op_kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Apply a unary or broadcasting binary elementwise operation."""
    if op_kind in _BINARY:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        if not isinstance(a, Tensor):
            a = _lift(a, b)
        b = _lift(b, a)
        return _binary(op_kind, a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ContractError(f"{op_kind} takes a single operand")
        return _unary(op_kind, a)
    raise ContractError(f"unknown elementwise op {op_kind!r}")


def _binary(op_kind: str, a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op_kind == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif op_kind == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif op_kind == "mul":
        out = x * y

        def bw(g):
            return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)

    else:
        out = x / y

        def bw(g):
            return _unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)

    return Tensor._result(out, (a, b), bw, op_kind)


def _unary(op_kind: str, a: Tensor) -> Tensor:
    x = a.data
    if op_kind == "relu":
        mask = x > 0
        _note_branch(mask)
        out = np.where(mask, x, 0).astype(x.dtype)

        def bw(g):
            return (g * mask,)

    elif op_kind == "tanh":
        out = np.tanh(x)

        def bw(g):
            return (g * (1 - out * out),)

    elif op_kind == "exp":
        out = np.exp(x)

        def bw(g):
            return (g * out,)

    elif op_kind == "log":
        if np.any(x < 0):
            raise DomainError("log of a negative value")
        with np.errstate(divide="ignore"):
            out = np.log(x)

        def bw(g):
            return (g / x,)

    elif op_kind == "softplus":
        out = np.logaddexp(np.zeros((), dtype=x.dtype), x)

        def bw(g):
            return (g * _sigmoid(x),)

    elif op_kind == "square":
        out = x * x

        def bw(g):
            return (g * 2 * x,)

    elif op_kind == "sqrt":
        if np.any(x < 0):
            raise DomainError("sqrt of a negative value")
        out = np.sqrt(x)

        def bw(g):
            return (g / (2 * out),)

    elif op_kind == "sigmoid":
        out = _sigmoid(x)

        def bw(g):
            return (g * out * (1 - out),)

    else:
        out = -x

        def bw(g):
            return (-g,)

    return Tensor._result(out.astype(x.dtype, copy=False), (a,), bw, op_kind)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi).astype(x.dtype, copy=False)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    _note_branch(mask)

    def bw(g):
        return (g * mask,)

    return Tensor._result(out, (a,), bw, "clamp")


# -- shape ops -----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {shape}") from None

    def bw(g):
        return (g.reshape(src),)

    return Tensor._result(out, (a,), bw, "reshape")


def _getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], copy=True)
    src_shape, dtype = a.shape, a.dtype

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects (n,k)@(k,m), got {a.shape}@{b.shape}")
    x, y = a.data, b.data
    out = x @ y

    def bw(g):
        return g @ y.T, x.T @ g

    return Tensor._result(out, (a, b), bw, "matmul")


# -- reductions ----------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    if op_kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {op_kind!r}")
    axes = _norm_axes(axes, a.ndim)
    x = a.data
    count = math.prod(x.shape[i] for i in axes)
    out = x.sum(axis=axes, keepdims=keepdims)
    if op_kind == "mean":
        out = out / x.dtype.type(count)
    out = np.asarray(out, dtype=x.dtype)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    src_shape = x.shape
    scale = 1.0 if op_kind == "sum" else 1.0 / count

    def bw(g):
        g = g.reshape(kept_shape)
        if scale != 1.0:
            g = g * x.dtype.type(scale)
        return (np.broadcast_to(g, src_shape).copy(),)

    return Tensor._result(out, (a,), bw, op_kind)


# -- image ops -----------------------------------------------------------------


def _pad_spatial(x: np.ndarray, pad: int, axes: tuple[int, int]) -> np.ndarray:
    """Zero-pad two spatial axes (a plain allocate-and-copy; np.pad is slower here)."""
    if not pad:
        return np.ascontiguousarray(x)
    shape = list(x.shape)
    index = [slice(None)] * x.ndim
    for ax in axes:
        shape[ax] += 2 * pad
        index[ax] = slice(pad, pad + x.shape[ax])
    out = np.zeros(shape, dtype=x.dtype)
    out[tuple(index)] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Columns of a padded channels-last input: rows are output positions, columns (tap, channel)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1), ho, wo


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Returns ``(out, saved, geom)``; ``saved`` is what the backward pass needs.

    Three kernels: channels-last im2col (``saved`` is the 2-D column matrix);
    for stride-1 convolutions with fewer outputs than inputs, a
    matmul-then-shift-add over a channel-major layout (``saved`` is the padded
    C x N x H x W input), which avoids materialising wide columns; and, within
    that case, an FFT route for batched large kernels (``saved`` is a tuple of
    spectra).
    """
    n = x.shape[0]
    f, _, kh, kw = w.shape
    if stride == 1 and f < x.shape[1]:
        if min(kh, kw) >= FFT_MIN_KERNEL and n >= FFT_MIN_BATCH:
            return _conv2d_forward_fft(x, w, padding)
        return _conv2d_forward_shift(x, w, padding)
    xp = _pad_spatial(x.transpose(0, 2, 3, 1), padding, (1, 2))
    hp, wp = xp.shape[1], xp.shape[2]
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(f, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return out, cols, (hp, wp, ho, wo)


def _conv2d_forward_shift(x: np.ndarray, w: np.ndarray, padding: int):
    n, c, _, _ = x.shape
    f, _, kh, kw = w.shape
    xc = _pad_spatial(x.transpose(1, 0, 2, 3), padding, (2, 3))
    hp, wp = xc.shape[2], xc.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1
    # every kernel tap applied at every padded position, then shifted into place
    y = (w.transpose(2, 3, 0, 1).reshape(-1, c) @ xc.reshape(c, -1)).reshape(kh, kw, f, n, hp, wp)
    out = y[0, 0, :, :, :ho, :wo].copy()
    for i in range(kh):
        for j in range(kw):
            if i or j:
                out += y[i, j, :, :, i:i + ho, j:j + wo]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), xc, (hp, wp, ho, wo)


def _conv2d_forward_fft(x: np.ndarray, w: np.ndarray, padding: int):
    """Large-kernel stride-1 route: per-frequency channel products of 2-D real FFTs.

    The transform size equals the padded input, which is already large enough
    that the valid part of the correlation never wraps around.  ``saved`` holds
    the input and weight spectra, frequency-major.
    """
    f, _, kh, kw = w.shape
    xp = _pad_spatial(x, padding, (2, 3))
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1
    xs = np.fft.rfft2(xp).transpose(2, 3, 0, 1)  # (H, W', N, C)
    ws = np.fft.rfft2(w, s=(hp, wp)).transpose(2, 3, 0, 1)  # (H, W', F, C)
    out = np.fft.irfft2((xs @ ws.conj().swapaxes(-1, -2)).transpose(2, 3, 0, 1), s=(hp, wp))
    return np.ascontiguousarray(out[:, :, :ho, :wo], dtype=x.dtype), (xs, ws), (hp, wp, ho, wo)


def _conv2d_backward_fft(g, saved, w, x_shape, padding, geom, need_x):
    xs, ws = saved
    _, _, h, wd = x_shape
    f, _, kh, kw = w.shape
    hp, wp, _, _ = geom
    gs = np.fft.rfft2(g, s=(hp, wp)).transpose(2, 3, 0, 1)  # (H, W', N, F)
    dw = np.fft.irfft2((gs.conj().swapaxes(-1, -2) @ xs).transpose(2, 3, 0, 1), s=(hp, wp))
    dw = np.ascontiguousarray(dw[:, :, :kh, :kw], dtype=g.dtype)
    db = g.sum(axis=(0, 2, 3))
    if not need_x:
        return None, dw, db
    dxp = np.fft.irfft2((gs @ ws).transpose(2, 3, 0, 1), s=(hp, wp))
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd], dtype=g.dtype), dw, db


def _shift_weight_grad(g: np.ndarray, xc: np.ndarray, kh: int, kw: int, geom) -> np.ndarray:
    """Weight gradient for the shift kernel without copying shifted inputs.

    The output gradient is embedded in a zero grid of the padded size, so on the
    flattened (N, H, W) axis a kernel tap (i, j) is a constant offset i*wp + j of
    the input; every tap is one GEMM against a strided view.
    """
    hp, wp, ho, wo = geom
    f, c = g.shape[1], xc.shape[0]
    grid = np.zeros((f, g.shape[0], hp, wp), dtype=g.dtype)
    grid[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
    gflat = grid.reshape(f, -1)
    span = gflat.shape[1]
    tail = (kh - 1) * wp + kw - 1
    xflat = np.zeros((c, span + tail), dtype=xc.dtype)
    xflat[:, :span] = xc.reshape(c, -1)
    dw = np.empty((f, c, kh, kw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            dw[:, :, i, j] = gflat @ xflat[:, off:off + span].T
    return dw


def _conv2d_backward(g, cols, w, x_shape, stride, padding, geom, need_x=True):
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    hp, wp, ho, wo = geom
    g2 = None
    if isinstance(cols, tuple):
        return _conv2d_backward_fft(g, cols, w, x_shape, padding, geom, need_x)
    if cols.ndim == 4:  # padded channel-major input from the shift kernel
        dw = _shift_weight_grad(g, cols, kh, kw, geom)
        db = g.sum(axis=(0, 2, 3))
    else:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = np.ascontiguousarray((cols.T @ g2).T.reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        db = g2.sum(axis=0)
    if not need_x:
        return None, dw, db
    if stride == 1 and padding <= min(kh, kw) - 1:
        # stride-1 input gradient is a full correlation with the flipped kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        if c < f and kh == kw:
            dx, _, _ = _conv2d_forward(g, wt, 1, kh - 1 - padding)
            return dx, dw, db
        if g2 is None:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gp = np.zeros((n, ho + 2 * (kh - 1 - padding), wo + 2 * (kw - 1 - padding), f), dtype=g.dtype)
        gp[:, kh - 1 - padding:kh - 1 - padding + ho, kw - 1 - padding:kw - 1 - padding + wo] = g2.reshape(n, ho, wo, f)
        gcols, _, _ = _im2col(gp, kh, kw, 1)
        dx = gcols @ wt.transpose(0, 2, 3, 1).reshape(c, -1).T
        return np.ascontiguousarray(dx.reshape(n, h, wd, c).transpose(0, 3, 1, 2)), dw, db
    if g2 is None:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, padding:padding + h, padding:padding + wd, :] if padding else dxp
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride={stride} padding={padding}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels but weight expects {cw}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    out, cols, geom = _conv2d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1)
    w = weight.data
    need_x = x.requires_grad

    def bw(g):
        return _conv2d_backward(g, cols, w, x.shape, stride, padding, geom, need_x)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bw, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"upsample expects NCHW input, got {x.shape}")
    if factor == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), bw, "upsample_nearest")


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be divisible by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"spatial size {h}x{w} not divisible by pool size {k}")
    return reshape(x, (n, c, h // k, k, w // k, k)).mean(axis=(3, 5))


def channel_stats(x: Tensor, eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel spatial mean and std (population variance + eps)."""
    if x.ndim != 4:
        raise DimensionError(f"channel_stats expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise DimensionError("channel_stats needs at least one spatial position")
    d = x.data
    count = h * w
    mu = d.mean(axis=(2, 3))
    centered = d - mu[:, :, None, None]
    var = (centered * centered).mean(axis=(2, 3))
    std = np.sqrt(var + d.dtype.type(eps)).astype(d.dtype, copy=False)
    inv = d.dtype.type(1.0 / count)

    def bw_mean(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, d.shape).copy(),)

    def bw_std(g):
        return ((g / std)[:, :, None, None] * centered * inv,)

    mean_t = Tensor._result(mu.astype(d.dtype, copy=False), (x,), bw_mean, "channel_mean")
    std_t = Tensor._result(std, (x,), bw_std, "channel_std")
    return mean_t, std_t


def cast(t: Tensor, dtype) -> Tensor:
    src = t.dtype
    return Tensor._result(t.data.astype(dtype), (t,), lambda g: (g.astype(src),), "cast")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
