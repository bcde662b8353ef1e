"""Dense float tensors with a reverse-mode autodiff tape.

Forward ops are pure functions over numpy-backed tensors. When a ``Tape``
is active, every op touching a watched tensor records a backward rule;
``backward()`` replays the records in reverse execution order (a valid
topological order by construction) and accumulates gradients on leaves.

Storage is float32 by default; float64 storage is accepted and preserved
so verification code can run at full precision. Reductions, convolutions
and matrix products always accumulate in float64 before rounding back to
the storage dtype.

Spatial convention, used consistently by every rotation/warp in this
package: x grows rightward (last axis), y grows downward (third axis),
rotation angles are counter-clockwise, and the rotation center of an
HxW map is ((W-1)/2, (H-1)/2).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

# im2col chunks are capped at this many float64 elements (~32 MB)
_CONV_CHUNK_ELEMS = 4_000_000


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A dense n-axis float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


_TAPES: list["Tape"] = []


class Tape:
    """Records executed ops so gradients can be replayed in reverse.

    One training step owns one tape; tensors produced while the tape is
    active are immutable as far as autodiff is concerned. Replaying the
    records backwards visits every consumer before its producer because
    records are appended in execution order.
    """

    def __init__(self):
        self._records = []
        self._traced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def watches(self, t):
        return t.requires_grad or id(t) in self._traced

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, tuple(inputs), backward_fn))
        self._traced.add(id(out))


def _emit(out_data, inputs, backward_fn):
    """Wrap op output, recording the backward rule if a tape is listening."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if _TAPES:
        tape = _TAPES[-1]
        if any(isinstance(t, Tensor) and tape.watches(t) for t in inputs):
            tape._record(out, inputs, backward_fn)
    return out


def backward(tape, loss):
    """Populate .grad on every requires_grad leaf reachable from loss.

    Gradients are accumulated (never overwritten) across fan-out and
    across repeated backward calls.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward requires a scalar loss tensor, got shape {shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for out, inputs, fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        contribs = fn(g)
        for t, c in zip(inputs, contribs):
            if c is None or not isinstance(t, Tensor):
                continue
            c = np.asarray(c, dtype=t.dtype)
            if c.shape != t.data.shape:
                raise ShapeMismatchError(
                    f"backward produced gradient of shape {c.shape} for tensor of shape {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
            if t.requires_grad:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g


def _result_dtype(*xs):
    for x in xs:
        d = x.dtype if isinstance(x, Tensor) else getattr(x, "dtype", None)
        if d == np.float64:
            return np.float64
    return DEFAULT_DTYPE


def _as_array(x, dtype):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# elementwise ops (numpy broadcasting, scalar operands allowed)
# ---------------------------------------------------------------------------

def add(a, b):
    dt = _result_dtype(a, b)
    out = _as_array(a, dt) + _as_array(b, dt)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if isinstance(a, Tensor) else None
        gb = _unbroadcast(g, b.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _emit(out.astype(dt, copy=False), (a, b), bw)


def sub(a, b):
    dt = _result_dtype(a, b)
    out = _as_array(a, dt) - _as_array(b, dt)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if isinstance(a, Tensor) else None
        gb = -_unbroadcast(g, b.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _emit(out.astype(dt, copy=False), (a, b), bw)


def mul(a, b):
    dt = _result_dtype(a, b)
    da, db = _as_array(a, dt), _as_array(b, dt)
    out = da * db

    def bw(g):
        ga = _unbroadcast(g * db, a.shape) if isinstance(a, Tensor) else None
        gb = _unbroadcast(g * da, b.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _emit(out.astype(dt, copy=False), (a, b), bw)


def div(a, b):
    dt = _result_dtype(a, b)
    da, db = _as_array(a, dt), _as_array(b, dt)
    out = da / db

    def bw(g):
        ga = _unbroadcast(g / db, a.shape) if isinstance(a, Tensor) else None
        gb = _unbroadcast(-g * da / (db * db), b.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return _emit(out.astype(dt, copy=False), (a, b), bw)


def neg(a):
    return mul(a, -1.0)


def relu(a):
    out = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _emit(out, (a,), bw)


def absolute(a):
    out = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _emit(out, (a,), bw)


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / np.maximum(out, np.finfo(out.dtype).tiny)),)

    return _emit(out, (a,), bw)


def softplus(a):
    """ln(1 + exp(x)), computed stably."""
    out = np.logaddexp(0.0, a.data.astype(np.float64)).astype(a.dtype)

    def bw(g):
        sig = np.exp(a.data.astype(np.float64) - np.logaddexp(0.0, a.data.astype(np.float64)))
        return (g * sig.astype(a.dtype),)

    return _emit(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)

    return _emit(np.asarray(out), (a,), bw)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(a, axis):
    """Max over a single axis; gradient routes to the first argmax."""
    idx = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        dx = np.zeros_like(a.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis).astype(a.dtype), axis=axis)
        return (dx,)

    return _emit(np.asarray(out), (a,), bw)


def cumsum(a, axis):
    out = np.cumsum(a.data.astype(np.float64), axis=axis).astype(a.dtype)

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis).astype(np.float64), axis=axis), axis)
        return (rev.astype(a.dtype),)

    return _emit(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape and indexing ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _emit(out.copy() if not out.flags.owndata else out, (a,), bw)


def concat(tensors, axis=0):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _emit(out, tuple(tensors), bw)


def take_channels(a, start, stop):
    """Slice [start, stop) along axis 1."""
    out = a.data[:, start:stop].copy()

    def bw(g):
        dx = np.zeros_like(a.data)
        dx[:, start:stop] = g
        return (dx,)

    return _emit(out, (a,), bw)


def permute_channels(a, perm):
    """Reorder axis 1 so that output channel i = input channel perm[i]."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"permutation of length {perm.shape[0]} for {a.shape[1]} channels")
    out = a.data[:, perm].copy()
    inv = np.argsort(perm)

    def bw(g):
        return (np.ascontiguousarray(g[:, inv]),)

    return _emit(out, (a,), bw)


def repeat_interleave(a, n):
    """Repeat each entry of a 1-D tensor n times: [a,b] -> [a,a,b,b] for n=2."""
    if a.ndim != 1:
        raise ShapeMismatchError(f"repeat_interleave expects a vector, got shape {a.shape}")
    out = np.repeat(a.data, n)

    def bw(g):
        return (g.reshape(-1, n).sum(axis=1, dtype=np.float64).astype(a.dtype),)

    return _emit(out, (a,), bw)


def pad2d(a, top, bottom, left, right):
    """Zero-pad the two trailing (spatial) axes."""
    pads = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(a.data, pads)

    def bw(g):
        sl = [slice(None)] * (a.ndim - 2)
        sl += [slice(top, g.shape[-2] - bottom), slice(left, g.shape[-1] - right)]
        return (np.ascontiguousarray(g[tuple(sl)]),)

    return _emit(out, (a,), bw)


def gather_pixels(a, ys, xs):
    """Sample a [1,C,H,W] map at integer pixels, returning rows [K, C]."""
    if a.ndim != 4 or a.shape[0] != 1:
        raise ShapeMismatchError(f"gather_pixels expects [1,C,H,W], got {a.shape}")
    ys = np.asarray(ys, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    out = np.ascontiguousarray(a.data[0, :, ys, xs])  # [K, C]

    def bw(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx[0], (slice(None), ys, xs), g.T.astype(a.dtype))
        return (dx,)

    return _emit(out, (a,), bw)


def unfold_windows(a, size, stride):
    """Extract flattened square windows: [B,C,H,W] -> [B, nWin, C*size*size].

    Windows are ordered row-major over their top-left corners. Raises if
    the map is smaller than one window.
    """
    B, C, H, W = a.shape
    if H < size or W < size:
        raise ValueError(f"map {H}x{W} smaller than window size {size}")
    view = sliding_window_view(a.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    ny, nx = view.shape[2], view.shape[3]
    out = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(B, ny * nx, C * size * size)
    ys = [i * stride for i in range(ny)]
    xs = [j * stride for j in range(nx)]

    def bw(g):
        dx = np.zeros_like(a.data)
        gw = g.reshape(B, ny, nx, C, size, size)
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                dx[:, :, y:y + size, x:x + size] += gw[:, i, j].astype(a.dtype)
        return (dx,)

    return _emit(out, (a,), bw)


def group_max(a, n):
    """Per-block max over orientation channels: [B, m*n, H, W] -> [B, m, H, W].

    Channels are grouped as m contiguous blocks of n. Ties route the
    gradient to the first maximal channel.
    """
    B, C, H, W = a.shape
    if C % n != 0:
        raise ShapeMismatchError(f"channel count {C} not divisible by group order {n}")
    m = C // n
    r = a.data.reshape(B, m, n, H, W)
    idx = r.argmax(axis=2)
    out = np.take_along_axis(r, idx[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        dr = np.zeros_like(r)
        np.put_along_axis(dr, idx[:, :, None], g[:, :, None].astype(a.dtype), axis=2)
        return (dr.reshape(B, C, H, W),)

    return _emit(np.ascontiguousarray(out), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b=False):
    """2-D matrix product with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    dt = _result_dtype(a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    bm = b64.T if transpose_b else b64
    if a64.shape[1] != bm.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims: {a.shape} vs {b.shape} (transpose_b={transpose_b})")
    out = (a64 @ bm).astype(dt)

    def bw(g):
        g64 = g.astype(np.float64)
        ga = (g64 @ bm.T).astype(a.dtype)
        gb = (a64.T @ g64)
        if transpose_b:
            gb = gb.T
        return ga, gb.astype(b.dtype)

    return _emit(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D cross-correlation of [B,Ci,H,W] with [Co,Ci,k,k] filters.

    Output spatial size is (H + 2*padding - k)//stride + 1. Accumulation
    runs in float64 regardless of storage dtype.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-axis input and weight, got {x.shape} and {w.shape}")
    B, Ci, H, W = x.shape
    Co, Ciw, kh, kw = w.shape
    if Ci != Ciw:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input shape {tuple(x.shape)} carries {Ci} channels, "
            f"weight shape {tuple(w.shape)} expects {Ciw}")
    if kh != kw:
        raise ShapeMismatchError(f"conv2d expects square kernels, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeMismatchError(f"bias shape {bias.shape} does not match {Co} output channels")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeMismatchError(f"conv2d output would be empty for input {H}x{W}, k={kh}, padding={padding}")

    dt = _result_dtype(x, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w2 = w.data.astype(np.float64).reshape(Co, -1)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.empty((B, Co, Ho, Wo), dtype=np.float64)
    rows_per = max(1, _CONV_CHUNK_ELEMS // max(1, B * Ci * kh * kw * Wo))
    for y0 in range(0, Ho, rows_per):
        y1 = min(Ho, y0 + rows_per)
        blk = np.ascontiguousarray(win[:, :, y0:y1].transpose(0, 2, 3, 1, 4, 5), dtype=np.float64)
        blk = blk.reshape(B * (y1 - y0) * Wo, Ci * kh * kw)
        out[:, :, y0:y1] = (blk @ w2.T).reshape(B, y1 - y0, Wo, Co).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.astype(np.float64)[None, :, None, None]

    def bw(g):
        g64 = g.astype(np.float64)
        gw = np.zeros((Co, Ci, kh, kw), dtype=np.float64)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        xp64 = xp.astype(np.float64)
        for u in range(kh):
            for v in range(kw):
                sl = xp64[:, :, u:u + Ho * stride:stride, v:v + Wo * stride:stride]
                gw[:, :, u, v] = np.tensordot(g64, sl, axes=([0, 2, 3], [0, 2, 3]))
                t = np.tensordot(g64, w.data.astype(np.float64)[:, :, u, v], axes=([1], [0]))
                dxp[:, :, u:u + Ho * stride:stride, v:v + Wo * stride:stride] += t.transpose(0, 3, 1, 2)
        if padding:
            dx = dxp[:, :, padding:padding + H, padding:padding + W]
        else:
            dx = dxp
        gb = g64.sum(axis=(0, 2, 3)).astype(bias.dtype) if bias is not None else None
        return dx.astype(x.dtype), gw.astype(w.dtype), gb

    return _emit(out.astype(dt), (x, w, bias), bw)


# ---------------------------------------------------------------------------
# normalization and channel activations
# ---------------------------------------------------------------------------

def _channel_shape(x, vec):
    return (1, vec.shape[0]) + (1,) * (x.ndim - 2)


def batchnorm_infer(x, mean, var, gamma, beta, eps=1e-5):
    """Per-channel (x - mean)/sqrt(var + eps) * gamma + beta.

    mean/var are fixed statistics (no gradient); gamma/beta are learnable.
    """
    mean_a = mean.data if isinstance(mean, Tensor) else np.asarray(mean, dtype=np.float64)
    var_a = var.data if isinstance(var, Tensor) else np.asarray(var, dtype=np.float64)
    if np.any(var_a < 0):
        raise ValueError("batchnorm received negative variance entries")
    denom2 = var_a.astype(np.float64) + eps
    if np.any(denom2 <= 0):
        raise ValueError("batchnorm variance + eps must be positive")
    inv = (1.0 / np.sqrt(denom2))
    C = x.shape[1]
    for name, v in (("mean", mean_a), ("var", var_a), ("gamma", gamma), ("beta", beta)):
        if np.asarray(v.data if isinstance(v, Tensor) else v).shape != (C,):
            raise ShapeMismatchError(f"batchnorm {name} must have shape ({C},)")
    sh = (1, C) + (1,) * (x.ndim - 2)
    ga = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    be = beta.data if isinstance(beta, Tensor) else np.asarray(beta)
    xhat = (x.data.astype(np.float64) - mean_a.reshape(sh)) * inv.reshape(sh)
    out = (xhat * ga.reshape(sh) + be.reshape(sh)).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        red = tuple(i for i in range(x.ndim) if i != 1)
        dx = (g64 * (ga.reshape(sh) * inv.reshape(sh))).astype(x.dtype)
        dgamma = (g64 * xhat).sum(axis=red) if isinstance(gamma, Tensor) else None
        dbeta = g64.sum(axis=red) if isinstance(beta, Tensor) else None
        return dx, None, None, dgamma, dbeta

    return _emit(out, (x, mean, var, gamma, beta), bw)


def softmax_channel(x):
    """Softmax over axis 1, independently per remaining index."""
    d = x.data.astype(np.float64)
    m = d.max(axis=1, keepdims=True)
    e = np.exp(d - m)
    s = e.sum(axis=1, keepdims=True)
    out = (e / s).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        o64 = out.astype(np.float64)
        dot = (g64 * o64).sum(axis=1, keepdims=True)
        return ((o64 * (g64 - dot)).astype(x.dtype),)

    return _emit(out, (x,), bw)


def l2_normalize_channel(x):
    """Normalize each channel vector (axis 1) to unit length.

    Exactly-zero vectors are passed through as zeros (with zero gradient);
    downstream keypoint scoring excludes such pixels.
    """
    d = x.data.astype(np.float64)
    norm = np.sqrt((d * d).sum(axis=1, keepdims=True))
    safe = np.where(norm == 0, 1.0, norm)
    out = (d / safe).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        xh = out.astype(np.float64)
        proj = (g64 * xh).sum(axis=1, keepdims=True)
        dx = (g64 - xh * proj) / safe
        dx = np.where(norm == 0, 0.0, dx)
        return (dx.astype(x.dtype),)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# rotation and warping
# ---------------------------------------------------------------------------

def _bilinear_lookup(data, sx, sy):
    """Gather (B,C,H,W) data at fractional (sx, sy); out-of-support reads 0.

    Returns (out, scatter) where scatter(g) accumulates the transpose map.
    """
    B, C, H, W = data.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)
    fy = (sy - y0)
    flat = data.reshape(B, C, H * W)
    out = np.zeros((B, C) + sx.shape, dtype=np.float64)
    corners = []
    for dy, dx_, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                         (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yc = y0 + dy
        xc = x0 + dx_
        valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
        idx = np.where(valid, yc * W + xc, 0).reshape(-1)
        wv = (wgt * valid).astype(np.float64)
        out += flat[:, :, idx].reshape((B, C) + sx.shape) * wv
        corners.append((idx, wv))

    def scatter(g, out_dtype):
        g64 = g.astype(np.float64).reshape(B, C, -1)
        dflat = np.zeros((B, C, H * W), dtype=np.float64)
        for idx, wv in corners:
            np.add.at(dflat, (slice(None), slice(None), idx), g64 * wv.reshape(-1))
        return dflat.reshape(B, C, H, W).astype(out_dtype)

    return out, scatter


def rotate_bilinear(x, angle_deg):
    """Rotate spatial axes counter-clockwise about the map center.

    Multiples of 90 degrees are exact index permutations; other angles use
    bilinear interpolation with zeros outside the support.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"rotate_bilinear expects [B,C,H,W], got {x.shape}")
    a = float(angle_deg) % 360.0
    if a % 90.0 == 0.0:
        k = int(a // 90) % 4
        out = np.ascontiguousarray(np.rot90(x.data, k, axes=(2, 3)))

        def bw(g):
            return (np.ascontiguousarray(np.rot90(g, -k, axes=(2, 3))),)

        return _emit(out, (x,), bw)

    B, C, H, W = x.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    t = math.radians(a)
    ct, st = math.cos(t), math.sin(t)
    dx_, dy_ = xx - cx, yy - cy
    sx = ct * dx_ - st * dy_ + cx
    sy = st * dx_ + ct * dy_ + cy
    out, scatter = _bilinear_lookup(x.data, sx, sy)

    def bw(g):
        return (scatter(g, x.dtype),)

    return _emit(out.astype(x.dtype), (x,), bw)


def warp_bilinear(x, dest_to_src, out_hw=None):
    """Warp a [B,C,H,W] map: output(q) = x(M q) for a 3x3 matrix M.

    M maps output pixel coordinates (x, y, 1) to source sample positions
    with perspective divide; samples outside the support read 0.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"warp_bilinear expects [B,C,H,W], got {x.shape}")
    M = np.asarray(dest_to_src, dtype=np.float64)
    if M.shape != (3, 3):
        raise ShapeMismatchError(f"warp matrix must be 3x3, got {M.shape}")
    Ho, Wo = out_hw if out_hw is not None else x.shape[2:]
    yy, xx = np.mgrid[0:Ho, 0:Wo].astype(np.float64)
    den = M[2, 0] * xx + M[2, 1] * yy + M[2, 2]
    bad = np.abs(den) < 1e-12
    den = np.where(bad, 1.0, den)
    sx = (M[0, 0] * xx + M[0, 1] * yy + M[0, 2]) / den
    sy = (M[1, 0] * xx + M[1, 1] * yy + M[1, 2]) / den
    # degenerate rays sample far outside the support and read as zero
    sx = np.where(bad, -2.0, sx)
    sy = np.where(bad, -2.0, sy)
    out, scatter = _bilinear_lookup(x.data, sx, sy)

    def bw(g):
        return (scatter(g, x.dtype),)

    return _emit(out.astype(x.dtype), (x,), bw)
