"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays for storage, one graph node
per op, hand-written backward rules, and a finite-difference harness that
every rule is checked against. Training runs in float32; verification runs
under ``precision(np.float64)`` so gradient checks can be tight.

Tensors are value-semantic: no op mutates an input array. Every op validates
its output and raises immediately on NaN/Inf. Randomness never enters here;
callers pass seeded ``numpy.random.Generator`` objects where they need it.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

CLAMP_EPS = 1e-8        # floor for log/div arguments
LAYERNORM_EPS = 1e-5    # variance epsilon

_default_dtype = np.float32


class ShapeMismatch(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class NonFiniteResult(ArithmeticError):
    pass


class AxisOutOfRange(ValueError):
    pass


class NotScalar(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with.

    ``with precision(np.float64): ...`` is the 64-bit verification mode.
    """
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A dense array plus an optional handle into the gradient graph.

    ``_parents`` and ``_bwd`` are set only when the tensor was produced by an
    op over at least one ``requires_grad`` input; leaves created by the user
    have neither. ``grad`` accumulates additively across ``backward`` calls
    until reset with ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, shape=None):
        arr = np.asarray(data, dtype=_default_dtype)
        if shape is not None:
            n = int(np.prod(shape)) if len(shape) else 1
            if any(int(s) <= 0 for s in shape):
                raise ShapeMismatch(f"non-positive extent in shape {shape}")
            if arr.size != n:
                raise ShapeMismatch(
                    f"shape {tuple(shape)} needs {n} values, got {arr.size}")
            arr = arr.reshape(tuple(int(s) for s in shape))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("tensor created with NaN/Inf data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

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
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, shape=None) -> Tensor:
    """Create a tensor, validating shape/data agreement and finiteness."""
    return Tensor(data, requires_grad=requires_grad, shape=shape)


def _wrap(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._bwd = None
    return t


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=_default_dtype))


def _out(data, parents, bwd) -> Tensor:
    """Wire an op result into the graph, surfacing NaN/Inf immediately."""
    if not np.isfinite(data).all():
        raise NonFiniteResult("op produced NaN/Inf")
    t = _wrap(data)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._bwd = bwd
    return t


def _unbroadcast(grad, shape):
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _out(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _out(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _out(out, (a, b), bwd)


def div(a, b):
    """a / b with the denominator clamped away from 0 by CLAMP_EPS."""
    a, b = _as_tensor(a), _as_tensor(b)
    small = np.abs(b.data) < CLAMP_EPS
    safe = np.where(small, np.copysign(CLAMP_EPS, b.data), b.data)
    out = a.data / safe

    def bwd(g):
        ga = g / safe
        gb = np.where(small, 0.0, -g * a.data / (safe * safe))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb.astype(g.dtype), b.shape)

    return _out(out, (a, b), bwd)


def neg(a):
    a = _as_tensor(a)
    return _out(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _out(out, (a,), lambda g: (g * out,))


def log(a):
    """log with the argument floored at CLAMP_EPS."""
    a = _as_tensor(a)
    safe = np.maximum(a.data, CLAMP_EPS)
    out = np.log(safe)

    def bwd(g):
        return (np.where(a.data >= CLAMP_EPS, g / safe, 0.0).astype(g.dtype),)

    return _out(out, (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return _out(out, (a,), lambda g: ((g * out * (1.0 - out)).astype(g.dtype),))


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0).astype(a.data.dtype)
    return _out(out, (a,), lambda g: (np.where(a.data > 0, g, 0.0).astype(g.dtype),))


def absval(a):
    a = _as_tensor(a)
    out = np.abs(a.data)
    return _out(out, (a,), lambda g: ((g * np.sign(a.data)).astype(g.dtype),))


def softplus(a):
    """log(1 + exp(x)), computed stably."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
        return ((g * s).astype(g.dtype),)

    return _out(out, (a,), bwd)


def powf(a, p: float):
    """Elementwise a**p for a fixed float exponent."""
    a = _as_tensor(a)
    out = a.data ** p

    def bwd(g):
        return ((g * p * a.data ** (p - 1.0)).astype(g.dtype),)

    return _out(out, (a,), bwd)


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return ((g * 0.5 / np.maximum(out, CLAMP_EPS)).astype(g.dtype),)

    return _out(out, (a,), bwd)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(np.where(take_a, g, 0.0).astype(g.dtype), a.shape),
                _unbroadcast(np.where(take_a, 0.0, g).astype(g.dtype), b.shape))

    return _out(out, (a, b), bwd)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(np.where(take_a, g, 0.0).astype(g.dtype), a.shape),
                _unbroadcast(np.where(take_a, 0.0, g).astype(g.dtype), b.shape))

    return _out(out, (a, b), bwd)


# -- matmul ------------------------------------------------------------------

def matmul(a, b):
    """Matrix product of two rank-2, or batch product of two rank-3, tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def bwd(g):
            return g @ b.data.T, a.data.T @ g

        return _out(out, (a, b), bwd)
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def bwd(g):
            return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

        return _out(out, (a, b), bwd)
    raise ShapeMismatch(f"matmul needs equal-rank 2D or 3D operands, got "
                        f"{a.ndim}D @ {b.ndim}D")


# -- reductions --------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(g.dtype),)

    return _out(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(g.dtype),)

    return _out(out, (a,), bwd)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; the subgradient goes to the first arg-max on ties."""
    a = _as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    out = a.data.max(axis=axis, keepdims=keepdims)
    if axis is None:
        flat_idx = int(np.argmax(a.data))

        def bwd(g):
            ga = np.zeros(a.shape, dtype=g.dtype)
            ga.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
            return (ga,)
    else:
        idx = np.argmax(a.data, axis=axis)

        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.zeros(a.shape, dtype=g.dtype)
            sel = list(np.indices(idx.shape))
            sel.insert(axis, idx)
            ga[tuple(sel)] = np.squeeze(g, axis=axis)
            return (ga,)

    return _out(out, (a,), bwd)


# -- softmax / layer norm ----------------------------------------------------

def softmax(a, axis=-1, mask=None):
    """Max-subtracted softmax along ``axis``.

    ``mask`` is a broadcastable boolean array; False entries get exactly zero
    weight (the additive -inf convention, applied internally so no non-finite
    values ever appear in tensor data). Every slice along ``axis`` must keep
    at least one allowed entry.
    """
    a = _as_tensor(a)
    axis = _check_axis(axis if axis is not None else -1, a.ndim)
    x = a.data
    if mask is None:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeMismatch("softmax mask blocks an entire slice")
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x, m) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (e / s).astype(x.dtype)

    def bwd(g):
        dot = (out * g).sum(axis=axis, keepdims=True)
        return ((out * (g - dot)).astype(g.dtype),)

    return _out(out, (a,), bwd)


def layer_norm(a, gain, bias, eps=LAYERNORM_EPS):
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    a = _as_tensor(a)
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeMismatch(
            f"layer_norm affine {gain.shape}/{bias.shape} vs last extent "
            f"{a.shape[-1:]}")
    mu = reduce_mean(a, axis=-1, keepdims=True)
    xc = sub(a, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(_as_tensor(1.0), sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gain), bias)


# -- structural ops ----------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _out(out, (a,), bwd)


def transpose(a, axes=None):
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _out(out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _out(out, tuple(tensors), bwd)


def gather_rows(a, idx):
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise AxisOutOfRange(f"row index out of range for extent {a.shape[0]}")
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _out(out, (a,), bwd)


# -- image ops ---------------------------------------------------------------

def _lerp_indices(n_out, n_in, scale):
    """Source indices and weights for 1D bilinear resampling.

    Half-pixel centers with border clamp: src = (o + 0.5)/scale - 0.5.
    """
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def upsample2x(a):
    """Bilinear 2x upsampling of a [C, H, W] map, half-pixel convention."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeMismatch(f"upsample2x expects [C,H,W], got {a.shape}")
    c, h, w = a.shape
    y0, y1, wy = _lerp_indices(2 * h, h, 2.0)
    x0, x1, wx = _lerp_indices(2 * w, w, 2.0)
    wy = wy.astype(a.data.dtype)[None, :, None]
    wx = wx.astype(a.data.dtype)[None, None, :]

    rows = a.data[:, y0, :] * (1 - wy) + a.data[:, y1, :] * wy
    out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx

    def bwd(g):
        grows = np.zeros((c, 2 * h, w), dtype=g.dtype)
        np.add.at(grows.transpose(2, 0, 1), x0, (g * (1 - wx)).transpose(2, 0, 1))
        np.add.at(grows.transpose(2, 0, 1), x1, (g * wx).transpose(2, 0, 1))
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(ga.transpose(1, 0, 2), y0, (grows * (1 - wy)).transpose(1, 0, 2))
        np.add.at(ga.transpose(1, 0, 2), y1, (grows * wy).transpose(1, 0, 2))
        return (ga,)

    return _out(out, (a,), bwd)


def sample_bilinear(a, points):
    """Read a [C, H, W] map at P normalized (x, y) points; returns [P, C].

    Half-pixel centers, border clamp. Differentiable in both the map and the
    point coordinates (coordinate gradient is zero where the read is clamped
    to the border).
    """
    a = _as_tensor(a)
    pts = _as_tensor(points)
    if a.ndim != 3 or pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatch(
            f"sample_bilinear expects [C,H,W] and [P,2], got {a.shape}, {pts.shape}")
    c, h, w = a.shape
    px = pts.data[:, 0] * w - 0.5
    py = pts.data[:, 1] * h - 0.5
    in_x = (px > 0.0) & (px < w - 1.0)
    in_y = (py > 0.0) & (py < h - 1.0)
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(a.data.dtype)[:, None]
    fy = (py - y0).astype(a.data.dtype)[:, None]

    v00 = a.data[:, y0, x0].T
    v01 = a.data[:, y0, x1].T
    v10 = a.data[:, y1, x0].T
    v11 = a.data[:, y1, x1].T
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bot * fy

    def bwd(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        gt = (g * (1 - fy)).astype(g.dtype)
        gb = (g * fy).astype(g.dtype)
        flat = ga.reshape(c, -1)
        np.add.at(flat.T, y0 * w + x0, gt * (1 - fx))
        np.add.at(flat.T, y0 * w + x1, gt * fx)
        np.add.at(flat.T, y1 * w + x0, gb * (1 - fx))
        np.add.at(flat.T, y1 * w + x1, gb * fx)
        # d(out)/d(fx) and /d(fy), then chain through px = x*w - 0.5
        dfx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
        dfy = (bot - top)
        gx = (g * dfx).sum(axis=1) * w * in_x
        gy = (g * dfy).sum(axis=1) * h * in_y
        return ga, np.stack([gx, gy], axis=1).astype(g.dtype)

    return _out(out, (a, pts), bwd)


def conv2d(x, w, b=None, stride=1, pad=0):
    """2D convolution of [Cin, H, W] with [Cout, Cin, kh, kw] weights."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"conv2d {x.shape} with weights {w.shape}")
    cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d kernel {kh}x{kw} too large for {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # [Cin, Ho, Wo, kh, kw]
    col = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ col).reshape(cout, ho, wo)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeMismatch(f"conv2d bias {b.shape} vs Cout {cout}")
        out = out + b.data[:, None, None]
        parents.append(b)

    def bwd(g):
        gmat = g.reshape(cout, ho * wo)
        gw = (gmat @ col.T).reshape(w.shape)
        gcol = (wmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros((cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride,
                    j:j + stride * wo:stride] += gcol[:, i, j]
        gx = gxp[:, pad:hp - pad, pad:wp - pad] if pad else gxp
        grads = [gx, gw.astype(g.dtype)]
        if b is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    return _out(out, tuple(parents), bwd)


# -- backward pass -----------------------------------------------------------

def _toposort(root: Tensor):
    """Iterative post-order DFS; each node appears once, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor):
    """Accumulate d(loss)/dt into ``.grad`` of every requires_grad tensor.

    Returns the gradient table for the graph's leaves (parameters), keyed by
    tensor identity. Repeated calls without ``zero_grad`` add up.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    order = _toposort(loss)
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            # g is either owned by this pass or a fresh view; .grad is only
            # ever rebound (never mutated in place), so no copy is needed
            node.grad = g if node.grad is None else node.grad + g
        if node._bwd is None:
            leaves[node] = node.grad
            continue
        for p, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


# -- verification harness ----------------------------------------------------

class GradCheckReport:
    """Outcome of a finite-difference check.

    ``worst`` is the maximum relative error over all checked entries;
    ``per_param`` maps parameter names to their worst entry; ``excluded``
    lists entries skipped because the two one-sided slopes disagreed (the
    function has a kink there, e.g. a max tie, so central differences are
    meaningless).
    """

    def __init__(self):
        self.worst = 0.0
        self.per_param = {}
        self.excluded = []

    @property
    def passed(self):
        return self.worst < 1e-4

    def __repr__(self):
        return (f"GradCheckReport(worst={self.worst:.3e}, "
                f"excluded={len(self.excluded)})")


def finite_diff_check(f, params, eps=1e-5, max_entries=None, rng=None,
                      kink_tol=1e-2):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a deterministic closure over ``params`` (name -> Tensor)
    returning a scalar Tensor; run it under ``precision(np.float64)`` for
    tight tolerances. At most ``max_entries`` entries per parameter are
    probed (seeded subsample via ``rng``); entries where the one-sided
    slopes disagree by more than ``kink_tol`` (relative) are reported as
    excluded instead of failing the check.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named}

    report = GradCheckReport()
    for name, p in named:
        n = p.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            entries = np.arange(n)
        flat = p.data.reshape(-1)
        worst_here = 0.0
        for k in entries:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = f().item()
            flat[k] = orig - eps
            f_minus = f().item()
            flat[k] = orig
            f_zero = f().item()
            slope_plus = (f_plus - f_zero) / eps
            slope_minus = (f_zero - f_minus) / eps
            scale = max(abs(slope_plus), abs(slope_minus), 1e-8)
            if abs(slope_plus - slope_minus) / scale > kink_tol:
                report.excluded.append((name, int(k)))
                continue
            fd = (f_plus - f_minus) / (2 * eps)
            an = analytic[name].reshape(-1)[k]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst_here = max(worst_here, err)
        report.per_param[name] = worst_here
        report.worst = max(report.worst, worst_here)
    return report
