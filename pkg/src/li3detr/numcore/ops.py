"""Differentiable primitives.

Every op computes its forward result with numpy and, when a tape is active
and some input requires grad, records a closure mapping the output gradient
to input gradients.
"""

from __future__ import annotations

import builtins
import threading
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .tensor import DimensionError, Tensor, active_tape

_overflow_lock = threading.Lock()
_overflow = [0]


def sampling_overflow_count() -> int:
    """Number of bilinear sample locations clamped to the border so far."""
    return _overflow[0]


def reset_sampling_overflow() -> None:
    with _overflow_lock:
        _overflow[0] = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tp = active_tape()
    if tp is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tp.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _row_sum(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``idx`` (axis 0)."""
    flat = values.reshape(values.shape[0], int(np.prod(values.shape[1:])))
    m = sp.csr_matrix(
        (np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx))
    )
    return np.asarray(m @ flat).reshape((n,) + values.shape[1:])


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _emit("power", d ** exponent, (x,),
                 lambda g: (g * exponent * d ** (exponent - 1),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit("exp", e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _emit("log", np.log(d), (x,), lambda g: (g / d,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _emit("sin", np.sin(d), (x,), lambda g: (g * np.cos(d),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _emit("cos", np.cos(d), (x,), lambda g: (-g * np.sin(d),))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    d = x.data
    return _emit("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping was active."""
    x = as_tensor(x)
    d = x.data
    out = np.clip(d, lo, hi)
    mask = out == d
    return _emit("clamp", out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(int(n), 1))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma=None, beta=None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    inputs = [x]
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    gd = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        gd = gamma.data
        out = out * gd
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        inputs.append(beta)
    n = x.shape[axis]

    def bw(g):
        dxhat = g * gd if gd is not None else g
        dx = inv * (dxhat - dxhat.sum(axis=axis, keepdims=True) / n
                    - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True) / n)
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return _emit("layer_norm", out, inputs, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), bw)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution on an (H, W, Cin) map with an (kh, kw, Cin, Cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise DimensionError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    H, W, C = x.shape
    kh, kw, _, cout = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols = cols.reshape(Ho * Wo, kh * kw * C)
    wm = w.data.reshape(kh * kw * C, cout)
    out = cols @ wm
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {b.shape} does not match {cout} outputs")
        out += b.data
        inputs.append(b)
    out = out.reshape(Ho, Wo, cout)

    def bw(g):
        g2 = g.reshape(Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(Ho, Wo, kh, kw, C)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, i, j, :]
        gx = gxp[pad:pad + H, pad:pad + W, :] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("conv2d", out, inputs, bw)


# ---------------------------------------------------------------- structural


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {orig} into {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}"
        ) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                for i in range(len(xs))]

    return _emit("concat", out, xs, bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (builtins.slice, int, type(Ellipsis))) or i is None for i in items)


def slice(x, index) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data[index]
    basic = _is_basic(index)

    def bw(g):
        gx = np.zeros(shape)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("slice", np.array(out), (x,), bw)


def gather(x, idx) -> Tensor:
    """Rows of ``x`` selected by integer ``idx`` (axis 0)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather: index out of range for shape {x.shape}")
    flat = idx.reshape(-1)
    return _emit("gather", x.data[idx], (x,),
                 lambda g: (_row_sum(flat, g.reshape((flat.size,) + x.shape[1:]), n),))


def scatter_add(x, idx, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` output rows at positions ``idx``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError(f"scatter_add: index shape {idx.shape} vs input {x.shape}")
    return _emit("scatter_add", _row_sum(idx, x.data, n), (x,), lambda g: (g[idx],))


def segment_max(x, seg, n: int) -> Tensor:
    """Per-segment channel max of an (N, C) tensor; empty segments give 0.

    The gradient goes to the first row attaining each maximum.
    """
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    N, C = x.shape
    out = np.full((n, C), -np.inf)
    np.maximum.at(out, seg, x.data)
    empty = np.isneginf(out)
    out[empty] = 0.0
    r, c = np.nonzero(x.data == out[seg])
    first = np.full((n, C), N, dtype=np.int64)
    np.minimum.at(first, (seg[r], c), r)

    def bw(g):
        gx = np.zeros((N, C))
        sel = first < N
        seg_ids, chans = np.nonzero(sel)
        gx[first[sel], chans] = g[seg_ids, chans]
        return (gx,)

    return _emit("segment_max", out, (x,), bw)


def bilinear_sample(fmap, loc, batch=None) -> Tensor:
    """Bilinear interpolation of a feature map at continuous pixel locations.

    ``fmap`` is (H, W, C), or (B, H, W, C) together with an integer ``batch``
    array choosing the map for each location. ``loc`` is (N, 2) holding
    (u, v) = (column, row) coordinates. Locations are clamped to
    [0, W-1] x [0, H-1]; the gradient w.r.t. a clamped coordinate is zero.
    """
    fmap, loc = as_tensor(fmap), as_tensor(loc)
    if fmap.ndim == 3:
        B, (H, W, C) = 1, fmap.shape
        bidx = np.zeros(loc.shape[0], dtype=np.int64)
    elif fmap.ndim == 4:
        B, H, W, C = fmap.shape
        if batch is None:
            raise DimensionError("bilinear_sample: batched map needs a batch index")
        bidx = np.asarray(batch, dtype=np.int64)
    else:
        raise DimensionError(f"bilinear_sample: map must be 3D or 4D, got {fmap.shape}")
    if loc.ndim != 2 or loc.shape[1] != 2 or bidx.shape != (loc.shape[0],):
        raise DimensionError(f"bilinear_sample: bad locations {loc.shape} for map {fmap.shape}")

    u, v = loc.data[:, 0], loc.data[:, 1]
    uc = np.clip(u, 0.0, W - 1)
    vc = np.clip(v, 0.0, H - 1)
    inu, inv = uc == u, vc == v
    n_out = int(np.count_nonzero(~(inu & inv)))
    if n_out:
        with _overflow_lock:
            _overflow[0] += n_out
    x0 = np.minimum(np.floor(uc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = uc - x0
    fy = vc - y0

    base = bidx * (H * W)
    n = loc.shape[0]
    cols = np.stack([base + y0 * W + x0, base + y0 * W + x1,
                     base + y1 * W + x0, base + y1 * W + x1], axis=1).reshape(-1)
    indptr = np.arange(0, 4 * n + 1, 4)
    gx, gy = 1.0 - fx, 1.0 - fy
    vals = np.stack([gx * gy, fx * gy, gx * fy, fx * fy], axis=1).reshape(-1)
    S = sp.csr_matrix((vals, cols, indptr), shape=(n, B * H * W))
    flat = fmap.data.reshape(B * H * W, C)
    out = S @ flat

    def bw(g):
        gmap = (S.T @ g).reshape(fmap.shape)
        # d(weights)/du and d(weights)/dv share the sparsity pattern of S
        du_vals = np.stack([-gy, gy, -fy, fy], axis=1).reshape(-1)
        dv_vals = np.stack([-gx, -fx, gx, fx], axis=1).reshape(-1)
        Su = sp.csr_matrix((du_vals, cols, indptr), shape=S.shape)
        Sv = sp.csr_matrix((dv_vals, cols, indptr), shape=S.shape)
        du = np.einsum("nc,nc->n", Su @ flat, g)
        dv = np.einsum("nc,nc->n", Sv @ flat, g)
        gloc = np.stack([du * inu, dv * inv], axis=1)
        # degenerate single-cell axes carry no spatial gradient
        if W == 1:
            gloc[:, 0] = 0.0
        if H == 1:
            gloc[:, 1] = 0.0
        return gmap, gloc

    return _emit("bilinear_sample", out, (fmap, loc), bw)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


PRIMITIVES = (
    "add", "mul", "matmul", "conv2d", "relu", "sigmoid", "softmax", "layer_norm",
    "gather", "scatter_add", "reshape", "transpose", "concat", "slice", "sin", "cos",
    "log", "exp", "abs",
)


def primitive_forward(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("conv2d", [x, w], pad=1)``."""
    fn = globals().get(kind)
    if fn is None or not callable(fn) or kind.startswith("_"):
        raise ValueError(f"unknown op kind {kind!r}")
    return fn(*inputs, **attrs)
