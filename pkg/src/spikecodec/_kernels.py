"""Loop kernels that numpy cannot express without large temporaries.

Dense products accumulate each output from 0.0 in input-index order.  The
im2col/col2im pair feeds convolutions to BLAS; col2im adds patch gradients in
a fixed (row, column) order.  No fastmath anywhere, so results are stable
across runs.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def dense_fwd(x, w):
    nb, ni = x.shape
    no = w.shape[0]
    out = np.zeros((nb, no))
    for b in range(nb):
        for o in range(no):
            acc = 0.0
            for i in range(ni):
                acc += x[b, i] * w[o, i]
            out[b, o] = acc
    return out


@numba.njit(cache=True)
def dense_bwd(g, x, w):
    nb, no = g.shape
    ni = x.shape[1]
    dx = np.zeros((nb, ni))
    dw = np.zeros((no, ni))
    for b in range(nb):
        for o in range(no):
            gv = g[b, o]
            for i in range(ni):
                dx[b, i] += gv * w[o, i]
                dw[o, i] += gv * x[b, i]
    return dx, dw



@numba.njit(cache=True)
def im2col(xp, kh, kw, sh, sw, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n * ho * wo, c * kh * kw))
    r = 0
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                k = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[r, k] = xp[b, ch, y * sh + i, x * sw + j]
                            k += 1
                r += 1
    return cols


@numba.njit(cache=True)
def col2im_add(dxp, dcols, kh, kw, sh, sw, ho, wo):
    # scatter-add patch gradients back; each element sums in (y, x, i, j) order
    n, c = dxp.shape[0], dxp.shape[1]
    r = 0
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                k = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            dxp[b, ch, y * sh + i, x * sw + j] += dcols[r, k]
                            k += 1
                r += 1
