"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def im2col(x, kh, kw, stride, pad_t, pad_l, out_h, out_w):
    c, h, w = x.shape
    cols = np.zeros((c, kh, kw, out_h, out_w), dtype=x.dtype)
    for di in range(kh):
        oi0 = _first_valid(di - pad_t, stride)
        oi1 = _last_valid(di - pad_t, stride, h, out_h)
        if oi1 <= oi0:
            continue
        for dj in range(kw):
            oj0 = _first_valid(dj - pad_l, stride)
            oj1 = _last_valid(dj - pad_l, stride, w, out_w)
            if oj1 <= oj0:
                continue
            si0 = oi0 * stride + di - pad_t
            sj0 = oj0 * stride + dj - pad_l
            cols[:, di, dj, oi0:oi1, oj0:oj1] = x[
                :,
                si0:si0 + (oi1 - oi0 - 1) * stride + 1:stride,
                sj0:sj0 + (oj1 - oj0 - 1) * stride + 1:stride,
            ]
    return cols.reshape(c * kh * kw, out_h * out_w)


def col2im(cols, c, h, w, kh, kw, stride, pad_t, pad_l, out_h, out_w):
    x = np.zeros((c, h, w), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, out_h, out_w)
    for di in range(kh):
        oi0 = _first_valid(di - pad_t, stride)
        oi1 = _last_valid(di - pad_t, stride, h, out_h)
        if oi1 <= oi0:
            continue
        for dj in range(kw):
            oj0 = _first_valid(dj - pad_l, stride)
            oj1 = _last_valid(dj - pad_l, stride, w, out_w)
            if oj1 <= oj0:
                continue
            si0 = oi0 * stride + di - pad_t
            sj0 = oj0 * stride + dj - pad_l
            x[
                :,
                si0:si0 + (oi1 - oi0 - 1) * stride + 1:stride,
                sj0:sj0 + (oj1 - oj0 - 1) * stride + 1:stride,
            ] += cols[:, di, dj, oi0:oi1, oj0:oj1]
    return x


def im2col_batch(x, kh, kw, stride, pad_t, pad_l, out_h, out_w):
    """Batched im2col -> (c*kh*kw, n*out_h*out_w), samples side by side."""
    return np.concatenate([im2col(xi, kh, kw, stride, pad_t, pad_l, out_h, out_w) for xi in x], axis=1)


def col2im_batch(cols, n, c, h, w, kh, kw, stride, pad_t, pad_l, out_h, out_w):
    """Adjoint of :func:`im2col_batch` -> (n, c, h, w)."""
    per = out_h * out_w
    return np.stack([col2im(np.ascontiguousarray(cols[:, i * per:(i + 1) * per]), c, h, w, kh, kw, stride,
                            pad_t, pad_l, out_h, out_w) for i in range(n)])


def _first_valid(offset, stride):
    # smallest o >= 0 with o*stride + offset >= 0
    return 0 if offset >= 0 else (-offset + stride - 1) // stride


def _last_valid(offset, stride, size, out):
    # one past the largest o < out with o*stride + offset < size
    if size - 1 - offset < 0:
        return 0
    return min(out, (size - 1 - offset) // stride + 1)


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(win, axis=-1).astype(np.uint8)  # argmax keeps the first max
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(g, idx):
    n, c, oh, ow = g.shape
    win = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * oh, 2 * ow)
    )


def interp_matrix(size, dtype=np.float64):
    """(2*size, size) matrix of the half-pixel bilinear x2 interpolation."""
    m = np.zeros((2 * size, size), dtype=np.float64)
    for o in range(2 * size):
        src = max((o + 0.5) * 0.5 - 0.5, 0.0)
        i0 = min(int(src), size - 1)
        i1 = i0 + 1 if i0 < size - 1 else i0
        w1 = src - i0
        m[o, i0] += 1.0 - w1
        m[o, i1] += w1
    return m.astype(dtype)


def upsample2_forward(x):
    n, c, h, w = x.shape
    mh = interp_matrix(h, x.dtype)
    mw = interp_matrix(w, x.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(mh, x), mw.T))


def upsample2_backward(g):
    n, c, h2, w2 = g.shape
    mh = interp_matrix(h2 // 2, g.dtype)
    mw = interp_matrix(w2 // 2, g.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(mh.T, g), mw))
