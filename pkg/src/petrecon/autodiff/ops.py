"""Differentiable primitives.

Only what the generator, the denoiser and the reconstruction objective need:
no broadcasting beyond per-channel bias/affine terms, float64 throughout.
Image tensors are ``[B, C, H, W]``.
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from petrecon.autodiff.tensor import Tensor, record
from petrecon.errors import InputError


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise InputError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise and reductions ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    shape = a.shape
    return record("sum", np.array(a.data.sum()), (a,),
                  lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record("mean", np.array(a.data.mean()), (a,),
                  lambda g: (np.full(shape, float(g) / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "dot")
    ad, bd = a.data, b.data
    val = np.array(np.dot(ad.ravel(), bd.ravel()))
    return record("dot", val, (a, b), lambda g: (float(g) * bd, float(g) * ad))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise InputError("concat_channels expects [B, C, H, W] tensors")
    (ba, ca, ha, wa), (bb, _, hb, wb) = a.shape, b.shape
    if (ba, ha, wa) != (bb, hb, wb):
        raise InputError(f"concat_channels: B/H/W mismatch {a.shape} vs {b.shape}")
    return record("concat_channels", np.concatenate([a.data, b.data], axis=1), (a, b),
                  lambda g: (g[:, :ca], g[:, ca:]))


# -- convolution ------------------------------------------------------------

_KEEP_COLS = 8_000_000


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    if k == 1:
        return xp.reshape(b, c, ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B, C, ho, wo, k, k]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding, via im2col and one matmul."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise InputError("conv2d expects [B, C, H, W] input and [Cout, Cin, k, k] weight")
    cout, cin, k, k2 = weight.shape
    b, c, h, w = x.shape
    if k != k2 or k not in (1, 3):
        raise InputError(f"conv2d supports 1x1 and 3x3 kernels, got {k}x{k2}")
    if c != cin:
        raise InputError(f"conv2d: input has {c} channels, weight expects {cin}")
    if padding not in (0, (k - 1) // 2):
        raise InputError(f"conv2d: padding must be 0 or {(k - 1) // 2}")
    if bias is not None and bias.shape != (cout,):
        raise InputError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise InputError("conv2d: kernel larger than padded input")
    wmat = weight.data.reshape(cout, cin * k * k)
    cols = _im2col(xp, k, ho, wo)
    out = np.matmul(wmat, cols)
    # large column buffers are rebuilt in backward instead of kept alive
    kept = cols if cols.size <= _KEEP_COLS else None
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, cout, ho, wo)

    def back(g):
        g2 = g.reshape(b, cout, ho * wo)
        cols = kept if kept is not None else _im2col(xp, k, ho, wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g2)
        if k == 1:
            gxp = gcols.reshape(b, c, ho, wo)
        else:
            gcols = gcols.reshape(b, c, k, k, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, parents, back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Training-mode batch normalization with statistics over (B, H, W)."""
    if x.data.ndim != 4:
        raise InputError("batch_norm expects a [B, C, H, W] tensor")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InputError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    m = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data[None, :, None, None]
    out = xhat * gm + beta.data[None, :, None, None]

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = (gm * inv / m) * (m * g - gbeta[None, :, None, None]
                               - xhat * gg[None, :, None, None])
        return (gx, gg, gbeta)

    return record("batch_norm", out, (x, gamma, beta), back)


# -- resampling -------------------------------------------------------------

def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    if x.data.ndim != 4:
        raise InputError("max_pool2 expects a [B, C, H, W] tensor")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InputError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(b, c, h, w),)

    return record("max_pool2", out, (x,), back)


@functools.lru_cache(maxsize=32)
def bilinear_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` 1-D linear interpolation matrix, align_corners=False."""
    u = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        u[i, i0] += 1.0 - w1
        u[i, i1] += w1
    u.setflags(write=False)
    return u


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Separable 2x bilinear upsampling: ``U_h @ x @ U_w^T`` per channel."""
    if x.data.ndim != 4:
        raise InputError("upsample_bilinear2 expects a [B, C, H, W] tensor")
    h, w = x.shape[2:]
    uh, uw = bilinear_matrix(h), bilinear_matrix(w)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return record("upsample_bilinear2", out, (x,),
                  lambda g: (np.matmul(np.matmul(uh.T, g), uw),))
