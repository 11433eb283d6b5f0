# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: 3x3 convolution, 2x2 max-pooling, bilinear warp, heatmap.

Every routine mirrors a function in ``_kernels_py`` with the same signature and
the same float64 contract. Inputs must be C-contiguous.
"""
import numpy as np

from libc.math cimport exp, floor


def conv3x3_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k,
                    const double[::1] bias):
    # Planes are padded to (H+2, W+2) and walked as flat vectors, so the inner
    # loop runs over H*(W+2)-2 contiguous elements; the two extra columns per
    # row are junk and dropped at the end.
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = k.shape[0], Wp = W + 2, L = H * (W + 2) - 2
    xp_arr = np.zeros((B, C, H + 2, Wp), dtype=np.float64)
    xp_arr[:, :, 1:H + 1, 1:W + 1] = x
    buf_arr = np.empty((B, F, H, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] buf = buf_arr
    cdef Py_ssize_t n, f, c, ky, kx, p, off
    cdef double w, bf
    cdef double* ob
    cdef const double* xb
    for n in range(B):
        for f in range(F):
            ob = &buf[n, f, 0, 0]
            bf = bias[f]
            for p in range(H * Wp):
                ob[p] = bf
            for c in range(C):
                xb = &xp[n, c, 0, 0]
                for ky in range(3):
                    for kx in range(3):
                        w = k[f, c, ky, kx]
                        off = ky * Wp + kx
                        for p in range(L):
                            ob[p] += w * xb[p + off]
    return np.ascontiguousarray(buf_arr[:, :, :, :W])


def conv3x3_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k,
                     const double[:, :, :, ::1] gout, bint need_gx=True):
    """Gradients (gx, gk, gb); gx is None when ``need_gx`` is false."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = k.shape[0], Wp = W + 2, L = H * (W + 2) - 2
    xp_arr = np.zeros((B, C, H + 2, Wp), dtype=np.float64)
    xp_arr[:, :, 1:H + 1, 1:W + 1] = x
    # zero junk columns so they contribute nothing to the kernel gradient
    gp_arr = np.zeros((B, F, H, Wp), dtype=np.float64)
    gp_arr[:, :, :, :W] = gout
    gk_arr = np.zeros((F, C, 3, 3), dtype=np.float64)
    gb_arr = np.zeros(F, dtype=np.float64)
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] gp = gp_arr
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t n, f, c, ky, kx, p, off
    cdef double a0, a1, a2, a3
    cdef const double* grow
    cdef const double* xb
    for n in range(B):
        for f in range(F):
            grow = &gp[n, f, 0, 0]
            a0 = 0.0
            for p in range(H * Wp):
                a0 += grow[p]
            gb[f] += a0
            for c in range(C):
                xb = &xp[n, c, 0, 0]
                for ky in range(3):
                    for kx in range(3):
                        off = ky * Wp + kx
                        a0 = a1 = a2 = a3 = 0.0
                        p = 0
                        while p + 4 <= L:
                            a0 += grow[p] * xb[p + off]
                            a1 += grow[p + 1] * xb[p + 1 + off]
                            a2 += grow[p + 2] * xb[p + 2 + off]
                            a3 += grow[p + 3] * xb[p + 3 + off]
                            p += 4
                        while p < L:
                            a0 += grow[p] * xb[p + off]
                            p += 1
                        gk[f, c, ky, kx] += (a0 + a1) + (a2 + a3)
    gx_arr = None
    if need_gx:
        # input gradient is a convolution of gout with the flipped, transposed kernel
        flipped = np.ascontiguousarray(np.asarray(k)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx_arr = conv3x3_forward(gout, flipped, np.zeros(C))
    return gx_arr, gk_arr, gb_arr


def maxpool2_forward(const double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // 2, Wo = W // 2
    out = np.empty((B, C, Ho, Wo), dtype=np.float64)
    arg = np.empty((B, C, Ho, Wo), dtype=np.int8)
    cdef double[:, :, :, ::1] o = out
    cdef signed char[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, c, y, i
    cdef double best, v
    cdef signed char pos
    for n in range(B):
        for c in range(C):
            for y in range(Ho):
                for i in range(Wo):
                    # row-major scan; strict > keeps the first maximum
                    best = x[n, c, 2 * y, 2 * i]
                    pos = 0
                    v = x[n, c, 2 * y, 2 * i + 1]
                    if v > best:
                        best = v
                        pos = 1
                    v = x[n, c, 2 * y + 1, 2 * i]
                    if v > best:
                        best = v
                        pos = 2
                    v = x[n, c, 2 * y + 1, 2 * i + 1]
                    if v > best:
                        best = v
                        pos = 3
                    o[n, c, y, i] = best
                    a[n, c, y, i] = pos
    return out, arg


def maxpool2_backward(const double[:, :, :, ::1] gout, const signed char[:, :, :, ::1] arg):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    gx_arr = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, c, y, i
    cdef signed char pos
    for n in range(B):
        for c in range(C):
            for y in range(Ho):
                for i in range(Wo):
                    pos = arg[n, c, y, i]
                    gx[n, c, 2 * y + (pos >> 1), 2 * i + (pos & 1)] = gout[n, c, y, i]
    return gx_arr


def warp_bilinear(const double[:, :, ::1] img, const double[:, ::1] inv, Py_ssize_t out_h,
                  Py_ssize_t out_w):
    """Sample ``img[n]`` at ``inv[n](p)`` for every output pixel ``p``."""
    cdef Py_ssize_t B = img.shape[0], H = img.shape[1], W = img.shape[2]
    out = np.empty((B, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t n, y, i, x0, y0
    cdef double a, b, tx, ty, sx, sy, fx, fy, v00, v01, v10, v11
    for n in range(B):
        a = inv[n, 0]
        b = inv[n, 1]
        tx = inv[n, 2]
        ty = inv[n, 3]
        for y in range(out_h):
            for i in range(out_w):
                sx = a * i - b * y + tx
                sy = b * i + a * y + ty
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                fx = sx - x0
                fy = sy - y0
                v00 = v01 = v10 = v11 = 0.0
                if 0 <= y0 < H:
                    if 0 <= x0 < W:
                        v00 = img[n, y0, x0]
                    if 0 <= x0 + 1 < W:
                        v01 = img[n, y0, x0 + 1]
                if 0 <= y0 + 1 < H:
                    if 0 <= x0 < W:
                        v10 = img[n, y0 + 1, x0]
                    if 0 <= x0 + 1 < W:
                        v11 = img[n, y0 + 1, x0 + 1]
                o[n, y, i] = ((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                              + fy * ((1.0 - fx) * v10 + fx * v11))
    return out


def heatmap(const double[:, :, ::1] pts, Py_ssize_t h, Py_ssize_t w, double sigma):
    cdef Py_ssize_t B = pts.shape[0], N = pts.shape[1]
    out = np.empty((B, h, w), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t n, y, i, j
    cdef double best, dx, dy, d2, inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for n in range(B):
        for y in range(h):
            for i in range(w):
                best = 1e300
                for j in range(N):
                    dx = i - pts[n, j, 0]
                    dy = y - pts[n, j, 1]
                    d2 = dx * dx + dy * dy
                    if d2 < best:
                        best = d2
                o[n, y, i] = exp(-best * inv2s2)
    return out
