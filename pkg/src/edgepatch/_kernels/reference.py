"""Numpy reference implementations of the hot array kernels.

These are the fallback used when the compiled extension is unavailable
(or when EDGEPATCH_PURE_PYTHON is set). Layout is NCHW, dtype float64,
and every function returns a freshly allocated C-contiguous array so the
two backends are interchangeable.
"""

import numpy as np

BACKEND = "numpy"


def _as_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> column matrix (N*OH*OW, C*KH*KW)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # (N,C,OH,OW,KH,KW)
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(x, w, stride=1, pad=0, return_ctx=False):
    """Cross-correlate x (N,C,H,W) with filters w (O,C,KH,KW)."""
    x = _as_f64(x)
    w = _as_f64(w)
    n, c, h, ww = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input {c}, filters {c2}")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(o, -1).T                  # (N*OH*OW, O)
    y = np.ascontiguousarray(y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    if return_ctx:
        return y, cols
    return y


def conv2d_backward(x, w, gy, stride=1, pad=0, ctx=None):
    """Gradients of conv2d_forward w.r.t. input and filters."""
    x = _as_f64(x)
    w = _as_f64(w)
    gy = _as_f64(gy)
    n, c, h, ww = x.shape
    o, _, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)

    cols = ctx if ctx is not None else _im2col(x, kh, kw, stride, pad)[0]
    gw = (gy_mat.T @ cols).reshape(o, c, kh, kw)

    gcols = gy_mat @ w.reshape(o, -1)              # (N*OH*OW, C*KH*KW)
    gcols = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    hp, wp = h + 2 * pad, ww + 2 * pad
    gxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + oh * stride:stride, v:v + ow * stride:stride] += gcols[:, :, :, :, u, v]
    gx = gxp[:, :, pad:pad + h, pad:pad + ww] if pad else gxp
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def _bilinear_grid(in_size, out_size):
    """Half-pixel-center sample positions: indices and lerp weights."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    t = src - i0
    return i0, i1, t


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of x (N,C,H,W) to (N,C,out_h,out_w)."""
    x = _as_f64(x)
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    y0, y1, ty = _bilinear_grid(h, out_h)
    x0, x1, tx = _bilinear_grid(w, out_w)
    ty = ty[:, None]
    tx = tx[None, :]
    a = x[:, :, y0][:, :, :, x0]
    b = x[:, :, y0][:, :, :, x1]
    cc = x[:, :, y1][:, :, :, x0]
    d = x[:, :, y1][:, :, :, x1]
    top = a * (1 - tx) + b * tx
    bot = cc * (1 - tx) + d * tx
    return np.ascontiguousarray(top * (1 - ty) + bot * ty)


def resize_bilinear_grad(gy, in_h, in_w):
    """Adjoint of resize_bilinear: scatter gy (N,C,oh,ow) back to (N,C,in_h,in_w)."""
    gy = _as_f64(gy)
    n, c, oh, ow = gy.shape
    if (oh, ow) == (in_h, in_w):
        return gy.copy()
    y0, y1, ty = _bilinear_grid(in_h, oh)
    x0, x1, tx = _bilinear_grid(in_w, ow)
    gx = np.zeros((n, c, in_h, in_w), dtype=np.float64)
    ty = ty[:, None]
    tx = tx[None, :]
    yy0 = np.broadcast_to(y0[:, None], (oh, ow)).ravel()
    yy1 = np.broadcast_to(y1[:, None], (oh, ow)).ravel()
    xx0 = np.broadcast_to(x0[None, :], (oh, ow)).ravel()
    xx1 = np.broadcast_to(x1[None, :], (oh, ow)).ravel()
    for wgt, iy, ix in (
        ((1 - ty) * (1 - tx), yy0, xx0),
        ((1 - ty) * tx, yy0, xx1),
        (ty * (1 - tx), yy1, xx0),
        (ty * tx, yy1, xx1),
    ):
        contrib = (gy * wgt).reshape(n, c, -1)
        np.add.at(gx.reshape(n, c, -1), (slice(None), slice(None), iy * in_w + ix), contrib)
    return gx
