# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: conv2d via C-level im2col + BLAS dgemm, and bilinear
resize (forward + adjoint) as tight loops. Same contracts as the numpy
reference module; the win over numpy is doing the patch gather/scatter at
memcpy speed instead of through 6-D strided transposes and np.add.at."""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


def _as_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


cdef void _im2colT(double[:, :, :, ::1] x, double[:, ::1] colsT,
                   Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t s, Py_ssize_t p,
                   Py_ssize_t oh, Py_ssize_t ow) nogil:
    """colsT (C*KH*KW, N*OH*OW) read straight from the unpadded input:
    destination rows are contiguous runs, padding becomes zero fill."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ni, ci, i, j, u, v, krow, mbase, iy, jlo, jhi, num
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                krow = (ci * kh + u) * kw + v
                num = p - v
                jlo = 0 if num <= 0 else (num + s - 1) // s
                num = w - 1 - v + p
                jhi = 0 if num < 0 else num // s + 1
                if jhi > ow:
                    jhi = ow
                for ni in range(n):
                    for i in range(oh):
                        mbase = (ni * oh + i) * ow
                        iy = i * s + u - p
                        if iy < 0 or iy >= h:
                            for j in range(ow):
                                colsT[krow, mbase + j] = 0.0
                            continue
                        for j in range(jlo):
                            colsT[krow, mbase + j] = 0.0
                        for j in range(jlo, jhi):
                            colsT[krow, mbase + j] = x[ni, ci, iy, j * s + v - p]
                        for j in range(jhi, ow):
                            colsT[krow, mbase + j] = 0.0


cdef void _col2imT_add(double[:, ::1] gcolsT, double[:, :, :, ::1] gx,
                       Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t s, Py_ssize_t p,
                       Py_ssize_t oh, Py_ssize_t ow) nogil:
    """Adjoint of _im2colT; contributions that fell in padding are dropped."""
    cdef Py_ssize_t n = gx.shape[0], c = gx.shape[1], h = gx.shape[2], w = gx.shape[3]
    cdef Py_ssize_t ni, ci, i, j, u, v, krow, mbase, iy, jlo, jhi, num
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                krow = (ci * kh + u) * kw + v
                num = p - v
                jlo = 0 if num <= 0 else (num + s - 1) // s
                num = w - 1 - v + p
                jhi = 0 if num < 0 else num // s + 1
                if jhi > ow:
                    jhi = ow
                for ni in range(n):
                    for i in range(oh):
                        iy = i * s + u - p
                        if iy < 0 or iy >= h:
                            continue
                        mbase = (ni * oh + i) * ow
                        for j in range(jlo, jhi):
                            gx[ni, ci, iy, j * s + v - p] += gcolsT[krow, mbase + j]


cdef void _rm_gemm(bint trans_a, bint trans_b, double[:, ::1] a, double[:, ::1] b,
                   double[:, ::1] c) nogil:
    """Row-major C = op(A) @ op(B) through column-major BLAS dgemm."""
    cdef int m = <int>c.shape[0], n = <int>c.shape[1]
    cdef int k = <int>(a.shape[0] if trans_a else a.shape[1])
    cdef int lda = <int>a.shape[1], ldb = <int>b.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char ta = b'T' if trans_a else b'N'
    cdef char tb = b'T' if trans_b else b'N'
    # row-major C(M,N) viewed column-major is C^T: C^T = op(B)^T op(A)^T
    dgemm(&tb, &ta, &n, &m, &k, &one,
          &b[0, 0], &ldb,
          &a[0, 0], &lda,
          &zero, &c[0, 0], &n)


def conv2d_forward(x, w, stride=1, pad=0, return_ctx=False):
    x = _as_f64(x)
    w = _as_f64(w)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != c:
        raise ValueError(f"channel mismatch: input {c}, filters {w.shape[1]}")
    cdef Py_ssize_t s = stride, p = pad
    cdef Py_ssize_t oh = (h + 2 * p - kh) // s + 1
    cdef Py_ssize_t ow = (ww + 2 * p - kw) // s + 1
    cdef Py_ssize_t m = n * oh * ow, kdim = c * kh * kw
    colsT = np.empty((kdim, m), dtype=np.float64)
    wmat = w.reshape(o, kdim)
    yt = np.empty((o, m), dtype=np.float64)          # (O, M)

    cdef double[:, :, :, ::1] xv = x
    cdef double[:, ::1] colsv = colsT, wv = wmat, yv = yt
    with nogil:
        _im2colT(xv, colsv, kh, kw, s, p, oh, ow)
        _rm_gemm(False, False, wv, colsv, yv)        # (O,K)@(K,M)
    y = np.ascontiguousarray(yt.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))
    if return_ctx:
        return y, colsT
    return y


def conv2d_backward(x, w, gy, stride=1, pad=0, ctx=None):
    x = _as_f64(x)
    w = _as_f64(w)
    gy = _as_f64(gy)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t s = stride, p = pad
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t m = n * oh * ow, kdim = c * kh * kw
    gyT = np.ascontiguousarray(gy.transpose(1, 0, 2, 3).reshape(o, m))
    colsT = np.empty((kdim, m), dtype=np.float64) if ctx is None else ctx
    gw = np.empty((o, kdim), dtype=np.float64)
    wmat = w.reshape(o, kdim)
    gcolsT = np.empty((kdim, m), dtype=np.float64)
    gx = np.zeros_like(x)

    cdef double[:, :, :, ::1] xv = x, gxv = gx
    cdef double[:, ::1] colsv = colsT, gyv = gyT, gwv = gw
    cdef double[:, ::1] wv = wmat, gcolsv = gcolsT
    cdef bint fill = ctx is None
    with nogil:
        if fill:
            _im2colT(xv, colsv, kh, kw, s, p, oh, ow)
        _rm_gemm(False, True, gyv, colsv, gwv)       # gw (O,K) = gyT @ colsT^T
        _rm_gemm(True, False, wv, gyv, gcolsv)       # gcolsT (K,M) = W^T @ gyT
        _col2imT_add(gcolsv, gxv, kh, kw, s, p, oh, ow)
    return gx, gw.reshape(o, c, kh, kw)


def _grid(Py_ssize_t in_size, Py_ssize_t out_size):
    scale = in_size / float(out_size)
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, src - i0


def resize_bilinear(x, out_h, out_w):
    x = _as_f64(x)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = out_h, ow = out_w
    if oh == h and ow == w:
        return x.copy()
    y0a, y1a, tya = _grid(h, oh)
    x0a, x1a, txa = _grid(w, ow)
    y = np.empty((n, c, oh, ow), dtype=np.float64)

    cdef double[:, :, :, ::1] xv = x, yv = y
    cdef Py_ssize_t[::1] y0 = y0a, y1 = y1a, x0 = x0a, x1 = x1a
    cdef double[::1] ty = tya, tx = txa
    cdef Py_ssize_t ni, ci, i, j
    cdef double top, bot, t
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        t = tx[j]
                        top = xv[ni, ci, y0[i], x0[j]] * (1.0 - t) + xv[ni, ci, y0[i], x1[j]] * t
                        bot = xv[ni, ci, y1[i], x0[j]] * (1.0 - t) + xv[ni, ci, y1[i], x1[j]] * t
                        yv[ni, ci, i, j] = top * (1.0 - ty[i]) + bot * ty[i]
    return y


def resize_bilinear_grad(gy, in_h, in_w):
    gy = _as_f64(gy)
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t h = in_h, w = in_w
    if oh == h and ow == w:
        return gy.copy()
    y0a, y1a, tya = _grid(h, oh)
    x0a, x1a, txa = _grid(w, ow)
    gx = np.zeros((n, c, h, w), dtype=np.float64)

    cdef double[:, :, :, ::1] gyv = gy, gxv = gx
    cdef Py_ssize_t[::1] y0 = y0a, y1 = y1a, x0 = x0a, x1 = x1a
    cdef double[::1] ty = tya, tx = txa
    cdef Py_ssize_t ni, ci, i, j
    cdef double g, wy, wx
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(oh):
                    wy = ty[i]
                    for j in range(ow):
                        wx = tx[j]
                        g = gyv[ni, ci, i, j]
                        gxv[ni, ci, y0[i], x0[j]] += g * (1.0 - wy) * (1.0 - wx)
                        gxv[ni, ci, y0[i], x1[j]] += g * (1.0 - wy) * wx
                        gxv[ni, ci, y1[i], x0[j]] += g * wy * (1.0 - wx)
                        gxv[ni, ci, y1[i], x1[j]] += g * wy * wx
    return gx
