"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on the leaves that require it.

Feature maps are laid out NCHW throughout.
"""

from __future__ import annotations

import contextlib
import functools
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_state = threading.local()
_DTYPE = np.float64


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the scalar type used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation, optimizer updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- differentiation ----------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a single-element tensor, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activation(kind: str, x) -> Tensor:
    """Elementwise sigmoid, tanh, gelu (exact erf form) or relu."""
    x = as_tensor(x)
    d = x.data
    if kind == "sigmoid":
        out = expit(d)
        return _result(out, (x,), lambda g: (g * out * (1.0 - out),))
    if kind == "tanh":
        out = np.tanh(d)
        return _result(out, (x,), lambda g: (g * (1.0 - out * out),))
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(d * _SQRT_HALF))
        out = d * cdf

        def backward(g):
            return (g * (cdf + d * _INV_SQRT_2PI * np.exp(-0.5 * d * d)),)

        return _result(out, (x,), backward)
    if kind == "relu":
        mask = d > 0
        return _result(d * mask, (x,), lambda g: (g * mask,))
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x) -> Tensor:
    return activation("sigmoid", x)


def tanh(x) -> Tensor:
    return activation("tanh", x)


def gelu(x) -> Tensor:
    return activation("gelu", x)


def relu(x) -> Tensor:
    return activation("relu", x)


# -- shape ops --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {p.shape} along axis {axis}")
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ValueError(f"split: sizes {list(sizes)} do not sum to extent {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all axes when None)."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = None
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / max(1, int(np.prod([x.shape[i] for i in axes])))
    elif kind == "max":
        out = x.data.max(axis=axes, keepdims=keepdims)
        hit = x.data == out.reshape(kept)
        share = hit / hit.sum(axis=axes, keepdims=True)
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def backward(g):
        g = np.broadcast_to(g.reshape(kept), x.shape)
        if kind == "max":
            return (g * share,)
        return (g * scale if scale is not None else np.array(g),)

    return _result(np.asarray(out, dtype=x.data.dtype), (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents disagree for {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


# -- convolution ------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over an NCHW batch with an [O, C, kh, kw] kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input shape {x.shape} incompatible with kernel shape {weight.shape}"
        )
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d: need stride >= 1, dilation >= 1, padding >= 0")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    if kh == kw == 1 and stride == 1 and padding == 0:
        flat = x.data.reshape(n, c, h * w)
        wm = weight.data.reshape(o, c)
        out = (wm @ flat).reshape(n, o, h, w)
        if bias is not None:
            out = out + parents[2].data.reshape(1, o, 1, 1)

        def backward_1x1(g):
            gf = g.reshape(n, o, h * w)
            gx = (wm.T @ gf).reshape(x.shape) if x.requires_grad else None
            gw = np.einsum("nop,ncp->oc", gf, flat).reshape(weight.shape)
            grads = [gx, gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)

        return _result(out, parents, backward_1x1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = weight.data.reshape(o, c * kh * kw)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + parents[2].data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gf.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gf @ wm).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                r0 = i * dilation
                rows = slice(r0, r0 + stride * (ho - 1) + 1, stride)
                for j in range(kw):
                    c0 = j * dilation
                    colsl = slice(c0, c0 + stride * (wo - 1) + 1, stride)
                    gxp[:, :, rows, colsl] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, backward)


# -- resampling -------------------------------------------------------------

@functools.lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, edge-clamped
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=256)
def _adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def separable(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along H and W: ``rows @ x @ cols.T``."""
    x = as_tensor(x)
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise ValueError(f"separable: maps {rows.shape}/{cols.shape} do not fit input {x.shape}")
    out = rows @ x.data @ cols.T
    return _result(out, (x,), lambda g: (rows.T @ g @ cols,))


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if x.shape[-2:] == (out_h, out_w):
        return x
    return separable(x, _bilinear_matrix(x.shape[-2], out_h), _bilinear_matrix(x.shape[-1], out_w))


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    return separable(
        x, _adaptive_pool_matrix(x.shape[-2], out_h), _adaptive_pool_matrix(x.shape[-1], out_w)
    )


def bilinear_sample(feature, points) -> Tensor:
    """Sample an [N, C, H, W] map at [N, P, 2] continuous (y, x) pixel coordinates.

    Pixel centers sit at integer coordinates.  Coordinates are clamped to
    ``[0, H-1] x [0, W-1]``; the coordinate gradient is zero where the clamp
    is active.  Returns [N, C, P].
    """
    feature, points = as_tensor(feature), as_tensor(points)
    if feature.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2:
        raise ValueError(f"bilinear_sample: bad shapes {feature.shape} and {points.shape}")
    if points.shape[0] != feature.shape[0]:
        raise ValueError(f"bilinear_sample: batch mismatch {feature.shape} vs {points.shape}")
    n, c, h, w = feature.shape
    p = points.shape[1]
    py, px = points.data[..., 0], points.data[..., 1]
    y = np.clip(py, 0.0, h - 1.0)
    x = np.clip(px, 0.0, w - 1.0)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.intp)
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = y - y0
    wx = x - x0
    flat = feature.data.reshape(n, c, h * w)
    corners = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    vals = [np.take_along_axis(flat, idx[:, None, :], axis=2) for idx in corners]
    f00, f01, f10, f11 = vals
    a, b = (1.0 - wy)[:, None, :], wy[:, None, :]
    l, r = (1.0 - wx)[:, None, :], wx[:, None, :]
    out = a * (l * f00 + r * f01) + b * (l * f10 + r * f11)

    def backward(g):
        gfeat = None
        if feature.requires_grad:
            acc = np.zeros((n, h * w, c), dtype=g.dtype)
            rows = np.broadcast_to(np.arange(n)[:, None], (n, p))
            for idx, wgt in zip(corners, (a * l, a * r, b * l, b * r)):
                np.add.at(acc, (rows, idx), (g * wgt).transpose(0, 2, 1))
            gfeat = acc.transpose(0, 2, 1).reshape(feature.shape)
        gpts = None
        if points.requires_grad:
            dy = l * (f10 - f00) + r * (f11 - f01)
            dx = a * (f01 - f00) + b * (f11 - f10)
            gy = (g * dy).sum(axis=1) * ((py >= 0) & (py <= h - 1))
            gx = (g * dx).sum(axis=1) * ((px >= 0) & (px <= w - 1))
            if h == 1:
                gy = np.zeros_like(gy)
            if w == 1:
                gx = np.zeros_like(gx)
            gpts = np.stack([gy, gx], axis=-1)
        return gfeat, gpts

    return _result(out, (feature, points), backward)
