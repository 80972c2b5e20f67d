# Compiled convolution kernels: direct loops, float32 data with float64
# accumulators, parallelized over independent output elements only so
# results are bit-identical for any thread count.

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

ctypedef cnp.float32_t f32


def conv2d_forward(cnp.ndarray[f32, ndim=4] x, cnp.ndarray[f32, ndim=4] w,
                   stride, padding, int groups, int num_threads):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (wd + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t cpg = cout // groups
    out_arr = np.empty((n, cout, ho, wo), dtype=np.float32)
    cdef f32[:, :, :, ::1] y = out_arr
    cdef f32[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef f32[:, :, :, ::1] wv = np.ascontiguousarray(w)

    cdef Py_ssize_t idx, ni, co, g0, oh, ow, ci0, ic, i, j, hi, wj
    cdef double acc
    cdef Py_ssize_t total = n * cout
    for idx in prange(total, nogil=True, schedule="static", num_threads=num_threads):
        ni = idx // cout
        co = idx % cout
        g0 = co // cpg
        ci0 = g0 * cg
        for oh in range(ho):
            for ow in range(wo):
                acc = 0.0
                for ic in range(cg):
                    for i in range(kh):
                        hi = oh * sh - ph + i
                        if hi < 0 or hi >= h:
                            continue
                        for j in range(kw):
                            wj = ow * sw - pw + j
                            if wj < 0 or wj >= wd:
                                continue
                            acc = acc + xv[ni, ci0 + ic, hi, wj] * wv[co, ic, i, j]
                y[ni, co, oh, ow] = <f32> acc
    return out_arr


def conv2d_backward_input(cnp.ndarray[f32, ndim=4] dy, cnp.ndarray[f32, ndim=4] w,
                          x_shape, stride, padding, int groups, int num_threads):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t cout = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t cpg = cout // groups
    out_arr = np.empty((n, c, h, wd), dtype=np.float32)
    cdef f32[:, :, :, ::1] dx = out_arr
    cdef f32[:, :, :, ::1] dyv = np.ascontiguousarray(dy)
    cdef f32[:, :, :, ::1] wv = np.ascontiguousarray(w)

    cdef Py_ssize_t idx, ni, ci, g0, ic, co0, hh, ww, i, j, t, oh, ow, co
    cdef double acc
    cdef Py_ssize_t total = n * c
    for idx in prange(total, nogil=True, schedule="static", num_threads=num_threads):
        ni = idx // c
        ci = idx % c
        g0 = ci // cg
        ic = ci % cg
        co0 = g0 * cpg
        for hh in range(h):
            for ww in range(wd):
                acc = 0.0
                for i in range(kh):
                    t = hh + ph - i
                    if t < 0 or t % sh != 0:
                        continue
                    oh = t // sh
                    if oh >= ho:
                        continue
                    for j in range(kw):
                        t = ww + pw - j
                        if t < 0 or t % sw != 0:
                            continue
                        ow = t // sw
                        if ow >= wo:
                            continue
                        for co in range(cpg):
                            acc = acc + dyv[ni, co0 + co, oh, ow] * wv[co0 + co, ic, i, j]
                dx[ni, ci, hh, ww] = <f32> acc
    return out_arr


def conv2d_backward_weight(cnp.ndarray[f32, ndim=4] x, cnp.ndarray[f32, ndim=4] dy,
                           w_shape, stride, padding, int groups, int num_threads):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w_shape[0], cg = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t cpg = cout // groups
    out_arr = np.empty((cout, cg, kh, kw), dtype=np.float32)
    cdef f32[:, :, :, ::1] dw = out_arr
    cdef f32[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef f32[:, :, :, ::1] dyv = np.ascontiguousarray(dy)

    cdef Py_ssize_t idx, co, ic, g0, ci, i, j, ni, oh, ow, hi, wj
    cdef double acc
    cdef Py_ssize_t total = cout * cg
    for idx in prange(total, nogil=True, schedule="static", num_threads=num_threads):
        co = idx // cg
        ic = idx % cg
        g0 = co // cpg
        ci = g0 * cg + ic
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for ni in range(n):
                    for oh in range(ho):
                        hi = oh * sh - ph + i
                        if hi < 0 or hi >= h:
                            continue
                        for ow in range(wo):
                            wj = ow * sw - pw + j
                            if wj < 0 or wj >= wd:
                                continue
                            acc = acc + dyv[ni, co, oh, ow] * xv[ni, ci, hi, wj]
                dw[co, ic, i, j] = <f32> acc
    return out_arr
