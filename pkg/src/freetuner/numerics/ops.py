"""Differentiable ops over :class:`Tensor`.

Broadcasting follows numpy for the elementwise ops; gradients are summed back
to the operand shapes. Image-like tensors are laid out (..., C, H, W).
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .tensor import Tensor, _node, as_tensor

SIGMA_EPS = 1e-6


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _node(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sgn,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _node(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _node(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def maximum(a, floor: float) -> Tensor:
    """max(a, floor) against a constant; gradient is zero where clamped."""
    a = as_tensor(a)
    m = a.data > floor
    return _node(np.where(m, a.data, floor), (a,), lambda g: (g * m,))


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(np.array(a.data[idx], dtype=np.float64), (a,), back)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _node(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def _extreme(a, axis, pick):
    a = as_tensor(a)
    x = a.data
    if axis is None:
        flat = pick(x.reshape(-1))
        idx = np.unravel_index(flat, x.shape)

        def back(g):
            out = np.zeros(x.shape)
            out[idx] = g
            return (out,)

        return _node(np.asarray(x[idx]), (a,), back)
    arg = np.expand_dims(pick(x, axis=axis), axis)
    val = np.take_along_axis(x, arg, axis=axis)

    def back(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _node(np.squeeze(val, axis=axis), (a,), back)


def max(a, axis=None) -> Tensor:
    """Maximum; the gradient goes to the first maximal element."""
    return _extreme(a, axis, np.argmax)


def min(a, axis=None) -> Tensor:
    return _extreme(a, axis, np.argmin)


def topk_sum(a, k: int) -> Tensor:
    """Sum of the ``k`` largest entries of ``a`` (flattened); ties broken by index."""
    a = as_tensor(a)
    n = a.data.size
    if k < 1 or k > n:
        raise InvalidArgument(f"topk size {k} outside [1, {n}]")
    flat = reshape(a, (n,))
    order = np.argsort(-flat.data, kind="stable")[:k]
    return sum(index(flat, order))


def norm(a) -> Tensor:
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    a = as_tensor(a)
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(x),)
        return (g * x / n,)

    return _node(np.asarray(n), (a,), back)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise InvalidArgument("matmul needs operands of rank >= 2")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), back)


def softmax_rows(logits) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    logits = as_tensor(logits)
    x = logits.data
    if x.size == 0:
        raise InvalidArgument("empty tensor")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (logits,), back)


# -- image ops ---------------------------------------------------------------

def _shift_cols(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    # xp: padded channels-last (B, H+k-1, W+k-1, C) -> (B*H*W, k*k*C), tap-major
    cols = np.concatenate([xp[:, dy:dy + H, dx:dx + W, :] for dy in range(k) for dx in range(k)],
                          axis=-1)
    return cols.reshape(-1, cols.shape[-1])


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation), zero padded.

    x: (B, C, H, W) or (C, H, W); w: (O, C, k, k) with odd k; b: (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    O, C, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise InvalidArgument("conv2d expects odd square kernels")
    if xd.ndim != 4 or xd.shape[1] != C:
        raise InvalidArgument(f"conv2d channel mismatch: input {xd.shape}, kernel {wd.shape}")
    p = k // 2
    B, _, H, W = xd.shape
    xl = xd.transpose(0, 2, 3, 1)
    if k == 1:
        cols = xl.reshape(-1, C)
    else:
        cols = _shift_cols(np.pad(xl, ((0, 0), (p, p), (p, p), (0, 0))), k, H, W)
    wm = wd.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    out = cols @ wm
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)
    out = np.ascontiguousarray(out.reshape(B, H, W, O).transpose(0, 3, 1, 2))

    def back(g):
        g4 = g[None] if squeeze else g
        gflat = g4.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gx = gw = None
        if w.requires_grad:
            gw = (cols.T @ gflat).reshape(k, k, C, O).transpose(3, 2, 0, 1)
        if x.requires_grad:
            dcols = (gflat @ wm.T).reshape(B, H, W, k * k * C)
            if k == 1:
                gl = dcols
            else:
                gp = np.zeros((B, H + 2 * p, W + 2 * p, C))
                tap = 0
                for dy in range(k):
                    for dx in range(k):
                        gp[:, dy:dy + H, dx:dx + W, :] += dcols[..., tap * C:(tap + 1) * C]
                        tap += 1
                gl = gp[:, p:p + H, p:p + W, :]
            gx = np.ascontiguousarray(gl.transpose(0, 3, 1, 2))
            if squeeze:
                gx = gx[0]
        res = [gx, gw]
        if b is not None:
            res.append(g4.sum(axis=(0, 2, 3)))
        return tuple(res)

    return _node(out[0] if squeeze else out, parents, back)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling over the last two axes."""
    x = as_tensor(x)
    xd = x.data
    H, W = xd.shape[-2:]
    if H % 2 or W % 2:
        raise InvalidArgument("avg_pool2 needs even spatial extents")
    lead = xd.shape[:-2]
    out = xd.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def back(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * 0.25,)

    return _node(out, (x,), back)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = as_tensor(x)
    xd = x.data
    H, W = xd.shape[-2:]
    lead = xd.shape[:-2]
    out = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)

    def back(g):
        return (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),)

    return _node(out, (x,), back)


def _linear_taps(n_in: int, n_out: int):
    # align_corners=False: src = (i + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1]
    i = np.arange(n_out, dtype=np.float64)
    src = (i + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resize_axis(x, axis, n_out):
    n_in = x.shape[axis]
    i0, i1, frac = _linear_taps(n_in, n_out)
    shape = [1] * x.ndim
    shape[axis] = n_out
    f = frac.reshape(shape)
    x = as_tensor(x)
    xd = x.data
    a = np.take(xd, i0, axis=axis)
    b = np.take(xd, i1, axis=axis)
    out = a + f * (b - a)

    def back(g):
        gx = np.zeros(xd.shape)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        fm = np.moveaxis(f, axis, 0)
        np.add.at(moved, i0, gm * (1.0 - fm))
        np.add.at(moved, i1, gm * fm)
        return (gx,)

    return _node(out, (x,), back)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes, half-pixel (align_corners=False).

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * H / out_h - 0.5``
    clamped to ``[0, H - 1]`` and interpolates ``a + f * (b - a)`` between the
    two neighbouring rows (likewise for columns). Same-size resizes and constant
    inputs are reproduced exactly.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise InvalidArgument("bilinear_resize needs at least 2 axes")
    if out_h < 1 or out_w < 1:
        raise InvalidArgument("target extent must be positive")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    y = _resize_axis(x, x.ndim - 2, out_h) if H != out_h else x
    return _resize_axis(y, y.ndim - 1, out_w) if W != out_w else y


# -- statistics --------------------------------------------------------------

def channel_stats(f, weights=None, eps: float = SIGMA_EPS):
    """Per-channel mean and population std of ``f`` (C, H, W).

    With ``weights`` (H, W) the moments are weighted. Sigma is clamped below
    by ``eps``; the clamp has zero gradient.
    """
    f = as_tensor(f)
    if f.ndim != 3:
        raise InvalidArgument(f"channel_stats expects (C, H, W), got {f.shape}")
    C, H, W = f.shape
    flat = reshape(f, (C, H * W))
    if weights is None:
        mu = mean(flat, axis=1)
        centred = sub(flat, reshape(mu, (C, 1)))
        var = mean(square(centred), axis=1)
    else:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
        if w.shape != (H, W):
            raise InvalidArgument(f"weights shape {w.shape} != {(H, W)}")
        if np.any(w < 0) or not w.sum() > 0:
            raise InvalidArgument("weights must be non-negative with positive sum")
        wn = (w / w.sum()).reshape(1, H * W)
        mu = sum(mul(flat, wn), axis=1)
        centred = sub(flat, reshape(mu, (C, 1)))
        var = sum(mul(square(centred), wn), axis=1)
    sigma = sqrt(maximum(var, eps * eps))
    return mu, sigma


def adain(content_f, style_f, eps: float = SIGMA_EPS) -> Tensor:
    """Re-normalise ``content_f`` to the per-channel mean/std of ``style_f``."""
    content_f, style_f = as_tensor(content_f), as_tensor(style_f)
    if content_f.ndim != 3 or style_f.ndim != 3:
        raise InvalidArgument("adain expects (C, H, W) features")
    if content_f.shape[0] != style_f.shape[0]:
        raise InvalidArgument(
            f"channel mismatch: content {content_f.shape[0]}, style {style_f.shape[0]}")
    C = content_f.shape[0]
    mu_c, sd_c = channel_stats(content_f, eps=eps)
    mu_s, sd_s = channel_stats(style_f, eps=eps)
    col = (C, 1, 1)
    normed = div(sub(content_f, reshape(mu_c, col)), reshape(sd_c, col))
    return add(mul(normed, reshape(sd_s, col)), reshape(mu_s, col))

