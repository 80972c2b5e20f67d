"""Pure-numpy convolution kernels (im2col + einsum).

Fallback backend, and the only backend used for float64 inputs (the
gradient checker's shadow evaluation). Shapes follow the conv contract:
x (N,C,H,W), w (Cout, C/groups, kh, kw), dy (N,Cout,Ho,Wo).
"""

import numpy as np


def _out_extent(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def _im2col(x, kh, kw, sh, sw, ph, pw, ho, wo):
    n, c = x.shape[:2]
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols


def conv2d_forward(x, w, stride, padding, groups):
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = _out_extent(h, kh, sh, ph), _out_extent(wd, kw, sw, pw)
    cols = _im2col(x, kh, kw, sh, sw, ph, pw, ho, wo)
    cols_g = cols.reshape(n, groups, cg, kh, kw, ho, wo)
    w_g = w.reshape(groups, cout // groups, cg, kh, kw)
    y = np.einsum("ngcijhw,gocij->ngohw", cols_g, w_g, optimize=True)
    return np.ascontiguousarray(y.reshape(n, cout, ho, wo))


def conv2d_backward_input(dy, w, x_shape, stride, padding, groups):
    n, c, h, wd = x_shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = dy.shape[2], dy.shape[3]
    dy_g = dy.reshape(n, groups, cout // groups, ho, wo)
    w_g = w.reshape(groups, cout // groups, cg, kh, kw)
    dcols = np.einsum("ngohw,gocij->ngcijhw", dy_g, w_g, optimize=True)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, i, j]
    if ph or pw:
        dxp = dxp[:, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(dxp)


def conv2d_backward_weight(x, dy, w_shape, stride, padding, groups):
    cout, cg, kh, kw = w_shape
    sh, sw = stride
    ph, pw = padding
    n = x.shape[0]
    ho, wo = dy.shape[2], dy.shape[3]
    cols = _im2col(x, kh, kw, sh, sw, ph, pw, ho, wo)
    cols_g = cols.reshape(n, groups, cg, kh, kw, ho, wo)
    dy_g = dy.reshape(n, groups, cout // groups, ho, wo)
    dw = np.einsum("ngohw,ngcijhw->gocij", dy_g, cols_g, optimize=True)
    return np.ascontiguousarray(dw.reshape(cout, cg, kh, kw))
