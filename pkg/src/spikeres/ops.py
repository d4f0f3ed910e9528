"""Differentiable primitives.

Every function takes and returns :class:`~spikeres.autograd.Tensor` and, when
an input needs a gradient and a tape is active, records a node carrying both a
reverse rule (``vjp``) and a forward-tangent rule (``jvp``). Reductions run in
a fixed order so repeated runs are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import Tensor, active_tape, as_tensor, record

# im2col buffers are chunked over the batch to stay below this many bytes.
_COL_BYTES = 1 << 26


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def jvp(t):
        ta, tb = t
        if ta is None:
            return np.broadcast_to(tb, shape).copy()
        if tb is None:
            return np.broadcast_to(ta, shape).copy()
        return ta + tb

    record("add", (a, b), (out,), vjp, jvp)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    def jvp(t):
        ta, tb = t
        if ta is None:
            return -np.broadcast_to(tb, shape)
        if tb is None:
            return np.broadcast_to(ta, shape).copy()
        return ta - tb

    record("sub", (a, b), (out,), vjp, jvp)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def vjp(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    def jvp(t):
        ta, tb = t
        if ta is None:
            return ad * tb
        if tb is None:
            return ta * bd
        return ta * bd + ad * tb

    record("mul", (a, b), (out,), vjp, jvp)
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    out = Tensor(a.data * c)
    record("scale", (a,), (out,), lambda g: g * c, lambda t: t[0] * c)
    return out


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant.

    The mask is treated as a constant selection: no gradient flows into
    whatever produced it, and filled entries pass no gradient to ``x``.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    keep = (~mask).astype(x.dtype)
    out = Tensor(np.where(mask, x.dtype.type(value), x.data))
    record("masked_fill", (x,), (out,), lambda g: g * keep, lambda t: t[0] * keep)
    return out


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = ((x.data > lo) & (x.data < hi)).astype(x.dtype)
    out = Tensor(np.clip(x.data, lo, hi))
    record("clamp", (x,), (out,), lambda g: g * inside, lambda t: t[0] * inside)
    return out


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``p`` is the drop probability."""
    x = as_tensor(x)
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(mask))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    def jvp(t):
        ta, tb = t
        r = 0
        if ta is not None:
            r = ta @ bd
        if tb is not None:
            r = r + ad @ tb
        return r

    record("matmul", (a, b), (out,), vjp, jvp)
    return out


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` (N, F) and ``weight`` (C, F)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def vjp(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    def jvp(t):
        tx, tw, tb = t
        r = np.zeros(out.shape, out.dtype)
        if tx is not None:
            r = r + tx @ wd.T
        if tw is not None:
            r = r + xd @ tw.T
        if tb is not None:
            r = r + tb
        return r

    record("linear", (x, weight, bias), (out,), vjp, jvp)
    return out


# -- convolution ------------------------------------------------------------

def _conv_geometry(xshape, wshape, stride, padding):
    if len(xshape) != 4 or len(wshape) != 4:
        raise ShapeError(f"conv2d needs NCHW input and OIkk kernel, got {xshape} and {wshape}")
    n, c, h, w = xshape
    o, i, kh, kw = wshape
    if i != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {i}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh} does not fit input {h}x{w} with padding {padding}")
    return n, c, h, w, o, kh, ho, wo


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, k, s, ho, wo):
    # (C*k*k, N*ho*wo), rows ordered (c, i, j) to match kernel.reshape(O, -1)
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _chunks(n, per_item_bytes):
    step = max(1, _COL_BYTES // max(per_item_bytes, 1))
    return [(i, min(n, i + step)) for i in range(0, n, step)]


def _conv_forward(x, w, s, p):
    n, c, h, wd, o, k, ho, wo = _conv_geometry(x.shape, w.shape, s, p)
    w2 = w.reshape(o, -1)
    out = np.empty((n, o, ho, wo), dtype=np.result_type(x, w))
    for a, b in _chunks(n, c * k * k * ho * wo * x.itemsize):
        cols = _im2col(_pad(x[a:b], p), k, s, ho, wo)
        y = w2 @ cols
        out[a:b] = y.reshape(o, b - a, ho, wo).transpose(1, 0, 2, 3)
    return out


def _conv_backward(g, x, w, s, p, need_x, need_w):
    n, c, h, wd, o, k, ho, wo = _conv_geometry(x.shape, w.shape, s, p)
    w2 = w.reshape(o, -1)
    gx = np.zeros(x.shape, dtype=g.dtype) if need_x else None
    gw = np.zeros(w2.shape, dtype=g.dtype) if need_w else None
    for a, b in _chunks(n, c * k * k * ho * wo * x.itemsize):
        g2 = g[a:b].transpose(1, 0, 2, 3).reshape(o, -1)
        if need_w:
            cols = _im2col(_pad(x[a:b], p), k, s, ho, wo)
            gw += g2 @ cols.T
        if need_x:
            dcols = (w2.T @ g2).reshape(c, k, k, b - a, ho, wo)
            gxp = np.zeros((b - a, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx[a:b] = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    if need_w:
        gw = gw.reshape(w.shape)
    return gx, gw


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, I, k, k) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, wd = x.data, kernel.data
    out = Tensor(_conv_forward(xd, wd, stride, padding))

    def vjp(g):
        return _conv_backward(g, xd, wd, stride, padding, x.requires_grad, kernel.requires_grad)

    def jvp(t):
        tx, tw = t
        r = 0
        if tx is not None:
            r = _conv_forward(tx, wd, stride, padding)
        if tw is not None:
            r = r + _conv_forward(xd, tw, stride, padding)
        return r

    record("conv2d", (x, kernel), (out,), vjp, jvp)
    return out


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Plain nested-loop convolution, kept as the reference for :func:`conv2d`."""
    n, c, h, w, o, k, ho, wo = _conv_geometry(x.shape, kernel.shape, stride, padding)
    xp = _pad(np.asarray(x, dtype=np.float64), padding)
    kd = np.asarray(kernel, dtype=np.float64)
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, ic, y * stride + i, xx * stride + j] * kd[oc, ic, i, j]
                    out[b, oc, y, xx] = acc
    return out


# -- pooling / reductions ---------------------------------------------------

def avgpool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avgpool2x2 needs NCHW with even spatial extents, got {x.shape}")
    n, c, h, w = x.shape

    def pool(a):
        return a.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    out = Tensor(pool(x.data))

    def vjp(g):
        g4 = g * g.dtype.type(0.25)
        return np.repeat(np.repeat(g4, 2, axis=2), 2, axis=3)

    record("avgpool2x2", (x,), (out,), vjp, lambda t: pool(t[0]))
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape).copy()

    record("sum", (x,), (out,), vjp, lambda t: t[0].sum(axis=axes, keepdims=keepdims))
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = Tensor(x.data.reshape(shape))
    record("reshape", (x,), (out,), lambda g: g.reshape(src), lambda t: t[0].reshape(out.shape))
    return out


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("stack of an empty list")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"stack: mismatched shapes {shape} and {x.shape}")
    out = Tensor(np.stack([x.data for x in xs], axis=axis))

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if x.requires_grad else None for i, x in enumerate(xs))

    def jvp(ts):
        return np.stack([np.zeros(shape, out.dtype) if t is None else t for t in ts], axis=axis)

    record("stack", xs, (out,), vjp, jvp)
    return out


def unstack(x) -> list:
    """Split along axis 0 into views; one multi-output node."""
    x = as_tensor(x)
    outs = [Tensor(x.data[i]) for i in range(x.shape[0])]

    def vjp(gs):
        if not isinstance(gs, list):
            gs = [gs]
        g = np.zeros(x.shape, x.dtype)
        for i, gi in enumerate(gs):
            if gi is not None:
                g[i] = gi
        return g

    def jvp(t):
        parts = tuple(t[0][i] for i in range(x.shape[0]))
        return parts if len(parts) > 1 else parts[0]

    record("unstack", (x,), outs, vjp, jvp)
    return outs


def tile0(x, reps: int) -> Tensor:
    """Repeat along axis 0: (N, ...) -> (reps*N, ...), copies laid out block-wise."""
    x = as_tensor(x)
    n = x.shape[0]
    out = Tensor(np.concatenate([x.data] * reps, axis=0))

    def vjp(g):
        return g.reshape((reps, n) + x.shape[1:]).sum(axis=0)

    record("tile0", (x,), (out,), vjp, lambda t: np.concatenate([t[0]] * reps, axis=0))
    return out


# -- normalisation ----------------------------------------------------------

def batch_norm(x, gamma, beta, *, scale_factor: float = 1.0, eps: float = 1e-5,
               stats: Optional[tuple] = None):
    """Per-channel normalisation of an (M, C, ...) input.

    Output is ``gamma * scale_factor * (x - mu) / sqrt(var + eps) + beta``.
    With ``stats=None`` the biased batch statistics over every axis except
    the channel axis are used and returned as ``(out, mean, var)``; passing
    ``stats=(mean, var)`` uses fixed statistics instead.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    dt = x.dtype.type
    xd = x.data
    if stats is None:
        m = int(np.prod([x.shape[a] for a in axes]))
        if m < 2:
            raise ShapeError("batch_norm needs at least two values per channel in train mode")
        mu = xd.mean(axis=axes)
        var = ((xd - mu.reshape(bshape)) ** 2).mean(axis=axes)
        batch = True
    else:
        mu, var = (np.asarray(s, dtype=x.dtype) for s in stats)
        batch = False
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    k = dt(scale_factor)
    gk = (gamma.data * k).reshape(bshape)
    out = Tensor(gk * xhat + beta.data.reshape(bshape))

    def normalised_tangent(tx):
        if not batch:
            return tx * inv.reshape(bshape)
        tm = tx.mean(axis=axes, keepdims=True)
        proj = (tx * xhat).mean(axis=axes, keepdims=True)
        return (tx - tm - xhat * proj) * inv.reshape(bshape)

    def vjp(g):
        gx = normalised_tangent(g * gk) if x.requires_grad else None
        gg = (g * xhat).sum(axis=axes) * k if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    def jvp(t):
        tx, tg, tb = t
        r = np.zeros(out.shape, out.dtype)
        if tx is not None:
            r = r + gk * normalised_tangent(tx)
        if tg is not None:
            r = r + (tg * k).reshape(bshape) * xhat
        if tb is not None:
            r = r + tb.reshape(bshape)
        return r

    record("batch_norm", (x, gamma, beta), (out,), vjp, jvp)
    if batch:
        return out, mu, var
    return out


# -- losses -----------------------------------------------------------------

def softmax_cross_entropy(logits, target_dist: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum_c q_c log softmax(z)_c``."""
    logits = as_tensor(logits)
    q = np.asarray(target_dist, dtype=logits.dtype)
    if q.shape != logits.shape:
        raise ShapeError(f"target distribution {q.shape} != logits {logits.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - lse
    n = z.shape[0]
    out = Tensor(np.array(-(q * logp).sum() / n, dtype=logits.dtype))
    p = np.exp(logp)

    def vjp(g):
        return (p - q) * (g / n)

    def jvp(t):
        return np.array(((p - q) * t[0]).sum() / n, dtype=logits.dtype)

    record("softmax_cross_entropy", (logits,), (out,), vjp, jvp)
    return out


# -- custom elementwise nodes ----------------------------------------------

class CustomNode:
    """Elementwise op with a user-chosen forward map and local derivative.

    ``forward`` maps the input array to the output; ``backward`` receives the
    saved arrays and returns the local derivative, which multiplies incoming
    gradients (and tangents). The two need not be consistent: this is where
    a surrogate derivative is attached to a hard threshold.
    """

    def __init__(self, forward: Callable[[np.ndarray], np.ndarray],
                 backward: Callable[..., np.ndarray], name: str = "custom"):
        self.forward = forward
        self.backward = backward
        self.name = name
        self._local = None
        self._pending = None

    def local_grad(self) -> np.ndarray:
        if self._local is None and self._pending is not None:
            return self._derive(*self._pending)
        if self._local is None:
            raise RuntimeError(f"{self.name}: backward requested before forward")
        return self._local

    def vjp(self, g: np.ndarray) -> np.ndarray:
        local = self.local_grad()
        if g.shape != local.shape:
            raise ShapeError(f"{self.name}: gradient shape {g.shape} != {local.shape}")
        return g * local

    def __call__(self, x, saved: Sequence = ()) -> Tensor:
        x = as_tensor(x)
        y = np.asarray(self.forward(x.data), dtype=x.dtype)
        if y.shape != x.shape:
            raise ShapeError(f"{self.name}: forward changed shape {x.shape} -> {y.shape}")
        arrays = [as_tensor(s).data for s in saved] if saved else [x.data]
        out = Tensor(y)
        tape = active_tape()
        if tape is None or not x.requires_grad:
            # nothing will differentiate through this call; derive lazily
            self._local = None
            self._pending = (arrays, x.shape, x.dtype)
            return out
        local = self._derive(arrays, x.shape, x.dtype)
        record(self.name, (x,), (out,), lambda g: g * local, lambda t: t[0] * local)
        return out

    def _derive(self, arrays, shape, dtype) -> np.ndarray:
        local = np.asarray(self.backward(*arrays), dtype=dtype)
        if local.shape != shape:
            raise ShapeError(f"{self.name}: local gradient shape {local.shape} != {shape}")
        self._local = local
        self._pending = None
        return local


def custom_node(x, forward, backward, saved: Sequence = (), name: str = "custom") -> Tensor:
    return CustomNode(forward, backward, name)(x, saved)
