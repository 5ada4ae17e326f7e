# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor kernels.

Every function here has a numpy twin in :mod:`rrcnn._npkernels` with the
same signature. im2col, col2im and the pooling pair agree bit for bit;
the bilinear pair agrees up to rounding. :mod:`rrcnn.kernels` picks one
backend at import time.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, ::1] x, int kh, int kw, int stride, int pad_t, int pad_l,
           int out_h, int out_w):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((c * kh * kw, out_h * out_w), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t ci, di, dj, oi, oj, row, si, sj
    with nogil:
        for ci in range(c):
            for di in range(kh):
                for dj in range(kw):
                    row = (ci * kh + di) * kw + dj
                    for oi in range(out_h):
                        si = oi * stride + di - pad_t
                        if si < 0 or si >= h:
                            continue
                        for oj in range(out_w):
                            sj = oj * stride + dj - pad_l
                            if sj >= 0 and sj < w:
                                cols[row, oi * out_w + oj] = x[ci, si, sj]
    return cols_arr


def col2im(real[:, ::1] cols, int c, int h, int w, int kh, int kw, int stride,
           int pad_t, int pad_l, int out_h, int out_w):
    dtype = np.float32 if real is float else np.float64
    x_arr = np.zeros((c, h, w), dtype=dtype)
    cdef real[:, :, ::1] x = x_arr
    cdef Py_ssize_t ci, di, dj, oi, oj, row, si, sj
    with nogil:
        for ci in range(c):
            for di in range(kh):
                for dj in range(kw):
                    row = (ci * kh + di) * kw + dj
                    for oi in range(out_h):
                        si = oi * stride + di - pad_t
                        if si < 0 or si >= h:
                            continue
                        for oj in range(out_w):
                            sj = oj * stride + dj - pad_l
                            if sj >= 0 and sj < w:
                                x[ci, si, sj] += cols[row, oi * out_w + oj]
    return x_arr


def im2col_batch(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad_t, int pad_l,
                 int out_h, int out_w):
    """Batched im2col -> (c*kh*kw, n*out_h*out_w), samples side by side."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t per = out_h * out_w
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((c * kh * kw, n * per), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, ci, di, dj, oi, oj, row, si, sj, base
    with nogil:
        for ci in range(c):
            for di in range(kh):
                for dj in range(kw):
                    row = (ci * kh + di) * kw + dj
                    for b in range(n):
                        base = b * per
                        for oi in range(out_h):
                            si = oi * stride + di - pad_t
                            if si < 0 or si >= h:
                                continue
                            for oj in range(out_w):
                                sj = oj * stride + dj - pad_l
                                if sj >= 0 and sj < w:
                                    cols[row, base + oi * out_w + oj] = x[b, ci, si, sj]
    return cols_arr


def col2im_batch(real[:, ::1] cols, int n, int c, int h, int w, int kh, int kw, int stride,
                 int pad_t, int pad_l, int out_h, int out_w):
    """Adjoint of :func:`im2col_batch` -> (n, c, h, w)."""
    cdef Py_ssize_t per = out_h * out_w
    dtype = np.float32 if real is float else np.float64
    x_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t b, ci, di, dj, oi, oj, row, si, sj, base
    with nogil:
        for b in range(n):
            base = b * per
            for ci in range(c):
                for di in range(kh):
                    for dj in range(kw):
                        row = (ci * kh + di) * kw + dj
                        for oi in range(out_h):
                            si = oi * stride + di - pad_t
                            if si < 0 or si >= h:
                                continue
                            for oj in range(out_w):
                                sj = oj * stride + dj - pad_l
                                if sj >= 0 and sj < w:
                                    x[b, ci, si, sj] += cols[row, base + oi * out_w + oj]
    return x_arr


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] // 2, ow = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef real best, v
    cdef cnp.uint8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        # strict '>' keeps the first maximum in row-major order
                        best = x[b, ch, 2 * i, 2 * j]
                        k = 0
                        v = x[b, ch, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = k
    return out_arr, idx_arr


def maxpool2_backward(real[:, :, :, ::1] g, cnp.uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, c, 2 * oh, 2 * ow), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef int k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        k = idx[b, ch, i, j]
                        gx[b, ch, 2 * i + k // 2, 2 * j + k % 2] = g[b, ch, i, j]
    return gx_arr


cdef inline void _taps(Py_ssize_t o, Py_ssize_t size, Py_ssize_t *i0,
                       Py_ssize_t *i1, double *w1) noexcept nogil:
    # half-pixel centres, scale 2: src = (o + 0.5) / 2 - 0.5, clamped at 0
    cdef double src = (o + 0.5) * 0.5 - 0.5
    if src < 0:
        src = 0
    i0[0] = <Py_ssize_t>src
    if i0[0] > size - 1:
        i0[0] = size - 1
    i1[0] = i0[0] + 1 if i0[0] < size - 1 else i0[0]
    w1[0] = src - i0[0]


cdef object _tap_table(Py_ssize_t size):
    """Lower/upper source index and upper weight for each of the 2*size outputs."""
    lo = np.empty(2 * size, dtype=np.intp)
    hi = np.empty(2 * size, dtype=np.intp)
    wt = np.empty(2 * size, dtype=np.float64)
    cdef Py_ssize_t[::1] lo_v = lo, hi_v = hi
    cdef double[::1] wt_v = wt
    cdef Py_ssize_t o
    for o in range(2 * size):
        _taps(o, size, &lo_v[o], &hi_v[o], &wt_v[o])
    return lo, hi, wt


def upsample2_forward(real[:, :, :, ::1] x):
    # separable: interpolate along columns into ``tmp``, then along rows
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    rlo, rhi, rwt = _tap_table(h)
    clo, chi, cwt = _tap_table(w)
    cdef Py_ssize_t[::1] r0 = rlo, r1 = rhi, c0 = clo, c1 = chi
    cdef double[::1] wr = rwt, wc = cwt
    cdef double[:, ::1] tmp = np.empty((h, 2 * w), dtype=np.float64)
    cdef Py_ssize_t b, ch, i, oi, oj
    cdef double a
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(h):
                    for oj in range(2 * w):
                        a = wc[oj]
                        tmp[i, oj] = (1 - a) * x[b, ch, i, c0[oj]] + a * x[b, ch, i, c1[oj]]
                for oi in range(2 * h):
                    a = wr[oi]
                    for oj in range(2 * w):
                        out[b, ch, oi, oj] = <real>((1 - a) * tmp[r0[oi], oj] + a * tmp[r1[oi], oj])
    return out_arr


def upsample2_backward(real[:, :, :, ::1] g):
    # adjoint of the forward pass: scatter along rows into ``tmp``, then along columns
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1]
    cdef Py_ssize_t h = g.shape[2] // 2, w = g.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    rlo, rhi, rwt = _tap_table(h)
    clo, chi, cwt = _tap_table(w)
    cdef Py_ssize_t[::1] r0 = rlo, r1 = rhi, c0 = clo, c1 = chi
    cdef double[::1] wr = rwt, wc = cwt
    cdef double[:, ::1] tmp = np.empty((h, 2 * w), dtype=np.float64)
    cdef double[::1] row = np.empty(w, dtype=np.float64)
    cdef Py_ssize_t b, ch, i, j, oi, oj
    cdef double a, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                tmp[:, :] = 0
                for oi in range(2 * h):
                    a = wr[oi]
                    for oj in range(2 * w):
                        v = g[b, ch, oi, oj]
                        tmp[r0[oi], oj] += (1 - a) * v
                        tmp[r1[oi], oj] += a * v
                for i in range(h):
                    row[:] = 0
                    for oj in range(2 * w):
                        a = wc[oj]
                        row[c0[oj]] += (1 - a) * tmp[i, oj]
                        row[c1[oj]] += a * tmp[i, oj]
                    for j in range(w):
                        gx[b, ch, i, j] = <real>row[j]
    return gx_arr
