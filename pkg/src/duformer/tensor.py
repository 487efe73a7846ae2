"""Dense NCHW tensors with a reverse-mode gradient tape.

Every differentiable primitive used by the model lives here.  A primitive
computes its forward value with numpy and, when any input participates in
the tape, records a ``Node`` holding a closure that maps the output
gradient to input gradients.  ``Tensor.backward`` replays those nodes in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

FLOAT32 = np.float32
FLOAT64 = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an operation."""


class TapeError(RuntimeError):
    """Raised on invalid use of the gradient tape."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Optional[Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]]
    consumed: bool = False


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array that can take part in reverse-mode differentiation.

    Precision is chosen at creation: float arrays keep their dtype, anything
    else becomes float32 unless ``dtype`` is given.  Only leaves created with
    ``requires_grad=True`` accumulate ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (FLOAT32, FLOAT64):
                arr = arr.astype(FLOAT32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- tape ---------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf; the seed gradient is 1."""
        if self.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            if not self.requires_grad:
                raise TapeError("loss is not on the tape")
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1
            return
        order = _topological(self)
        for t in order:
            if t._node is not None and t._node.consumed:
                raise TapeError("tape already consumed; run a new forward pass")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if g is not None and t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node.parents, node.backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node.consumed = True
            node.backward = None

    # -- operator sugar -----------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

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
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward)
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), "div", backward)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), "neg", lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 0.0:
        return _make(np.ones_like(x.data), (x,), "pow", lambda g: (np.zeros_like(g),))

    def backward(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return _make(np.power(x.data, p), (x,), "pow", backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), "sqrt", lambda g: (g * 0.5 / y,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def clip(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    y = np.clip(x.data, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    return _make(y, (x,), "clip", lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), "maximum", backward)


# -- reductions and shape plumbing --------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)
    return _make(y, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    basic = all(
        isinstance(i, (int, slice, type(None), type(Ellipsis)))
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(y, copy=True), (x,), "getitem", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, tensors, "concat", backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(index)))
        start += s
    return out


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), "softmax", backward)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(y, (x, gain, bias), "layer_norm", backward)


# -- spatial ops ----------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    dilation=1,
) -> Tensor:
    """Zero-padded 2-D cross-correlation over NCHW input."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {cin}")
    if min(kh, kw, sh, sw, dh, dw) < 1 or min(ph, pw) < 0:
        raise ShapeError("conv2d kernel, stride and dilation must be positive")
    ekh, ekw = dh * (kh - 1) + 1, dw * (kw - 1) + 1
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < ekh or wp < ekw:
        raise ShapeError(
            f"conv2d padded extent {(hp, wp)} smaller than effective kernel {(ekh, ekw)}"
        )
    ho, wo = (hp - ekh) // sh + 1, (wp - ekw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))[:, :, ::sh, ::sw, ::dh, ::dw]
    cols = np.ascontiguousarray(win)  # n, c, ho, wo, kh, kw
    y = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    y = np.ascontiguousarray(y)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            r0 = i * dh
            for j in range(kw):
                c0 = j * dw
                contrib = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1]))
                gxp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += (
                    contrib.transpose(1, 0, 2, 3)
                )
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(y, parents, "conv2d", backward)


def _pool_windows(x: Tensor, kernel, stride):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    if x.ndim != 4:
        raise ShapeError(f"pooling expects NCHW input, got {x.shape}")
    if min(kh, kw, sh, sw) < 1:
        raise ShapeError("pool kernel and stride must be positive")
    h, w = x.shape[2:]
    if h < kh or w < kw:
        raise ShapeError(f"pool window {(kh, kw)} larger than input {(h, w)}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return win, kh, kw, sh, sw, ho, wo


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Window maximum; the gradient goes to the first row-major maximal element."""
    win, kh, kw, sh, sw, ho, wo = _pool_windows(x, kernel, kernel if stride is None else stride)
    flat = win.reshape(*win.shape[:4], kh * kw)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for t in range(kh * kw):
            i, j = divmod(t, kw)
            gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * (idx == t)
        return (gx,)

    return _make(np.ascontiguousarray(y), (x,), "max_pool2d", backward)


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    win, kh, kw, sh, sw, ho, wo = _pool_windows(x, kernel, kernel if stride is None else stride)
    y = win.mean(axis=(-2, -1))
    share = 1.0 / (kh * kw)

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * share
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gs
        return (gx,)

    return _make(np.ascontiguousarray(y), (x,), "avg_pool2d", backward)


def adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    """Half-open source ranges ``[floor(i*size/out), ceil((i+1)*size/out))``."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def _adaptive_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=dtype)
    for i, (lo, hi) in enumerate(adaptive_bins(size, out)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out) -> Tensor:
    ht, wt = _pair(out)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if not (1 <= ht <= h and 1 <= wt <= w):
        raise ShapeError(f"adaptive pool target {(ht, wt)} outside [1, {(h, w)}]")
    ph = _adaptive_matrix(h, ht, x.dtype)
    pw = _adaptive_matrix(w, wt, x.dtype)
    y = ph @ x.data @ pw.T

    def backward(g):
        return (ph.T @ g @ pw,)

    return _make(y, (x,), "adaptive_avg_pool2d", backward)


def _bilinear_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=dtype)
    ratio = size / out
    for i in range(out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_upsample(x: Tensor, out) -> Tensor:
    """Bilinear resize, half-pixel centres (align_corners=False) with edge clamping."""
    h2, w2 = _pair(out)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if h2 < h or w2 < w:
        raise ShapeError(f"upsample target {(h2, w2)} smaller than input {(h, w)}")
    if (h2, w2) == (h, w):
        return _make(x.data.copy(), (x,), "bilinear_upsample", lambda g: (g,))
    ah = _bilinear_matrix(h, h2, x.dtype)
    aw = _bilinear_matrix(w, w2, x.dtype)
    y = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return _make(y, (x,), "bilinear_upsample", backward)


# -- verification oracle ---------------------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the inputs to a scalar tensor.  Every input with
    ``requires_grad`` is checked; ``max_coords`` limits each input to a
    random subset of coordinates.  Inputs must be float64.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    checked = [t for t in inputs if t.requires_grad]
    for t in checked:
        if t.dtype != FLOAT64:
            raise ValueError("grad_check requires float64 tensors")
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    f(*inputs).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in checked]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(checked, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = a.reshape(-1)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + eps
                fp = f(*inputs).item()
                flat[k] = orig - eps
                fm = f(*inputs).item()
                flat[k] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(num - a_flat[k]) / max(abs(num), abs(a_flat[k]), 1e-8)
                worst = max(worst, err)
    for t in checked:
        t.grad = None
    return worst
