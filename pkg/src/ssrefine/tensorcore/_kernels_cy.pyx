# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col / col2im.

col2im accumulates in ascending (ki, kj) order per output element, matching
the numpy fallback bit for bit.
"""

cimport cython

ctypedef fused floating:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
           floating[:, ::1] out):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t bi, oi, oj, ci, ki, kj, ih, iw, row, col
    with nogil:
        for bi in range(b):
            for oi in range(oh):
                for oj in range(ow):
                    row = (bi * oh + oi) * ow + oj
                    col = 0
                    for ci in range(c):
                        for ki in range(kh):
                            ih = oi * stride - pad + ki
                            if 0 <= ih < h:
                                for kj in range(kw):
                                    iw = oj * stride - pad + kj
                                    if 0 <= iw < w:
                                        out[row, col] = x[bi, ci, ih, iw]
                                    else:
                                        out[row, col] = 0
                                    col += 1
                            else:
                                for kj in range(kw):
                                    out[row, col] = 0
                                    col += 1


@cython.boundscheck(False)
@cython.wraparound(False)
def col2im(floating[:, ::1] cols, int kh, int kw, int stride, int pad,
           floating[:, :, :, ::1] out):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t bi, oi, oj, ci, ki, kj, ih, iw, row, col
    with nogil:
        # (ki, kj) outermost per (bi, ci): each output element receives its
        # contributions in ascending kernel-offset order.
        for bi in range(b):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        col = (ci * kh + ki) * kw + kj
                        for oi in range(oh):
                            ih = oi * stride - pad + ki
                            if 0 <= ih < h:
                                for oj in range(ow):
                                    iw = oj * stride - pad + kj
                                    if 0 <= iw < w:
                                        row = (bi * oh + oi) * ow + oj
                                        out[bi, ci, ih, iw] += cols[row, col]
