"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built. Results agree with the compiled path to
rounding (summation order differs in the convolutions).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (B, C, H, W, 3, 3)
    return sliding_window_view(xp, (3, 3), axis=(2, 3))


def conv3x3_forward(x, k, bias):
    cols = _windows(x)
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, F)
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv3x3_backward(x, k, gout, need_gx=True):
    cols = _windows(x)
    gk = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, 3, 3)
    gb = gout.sum(axis=(0, 2, 3))
    gx = None
    if need_gx:
        flipped = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = conv3x3_forward(gout, flipped, np.zeros(k.shape[1]))
    return gx, np.ascontiguousarray(gk), gb


def maxpool2_forward(x):
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie-break
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(gout, arg):
    B, C, Ho, Wo = gout.shape
    win = np.zeros((B, C, Ho, Wo, 4))
    np.put_along_axis(win, arg[..., None].astype(np.intp), gout[..., None], axis=-1)
    gx = win.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(B, C, 2 * Ho, 2 * Wo))


def warp_bilinear(img, inv, out_h, out_w):
    B, H, W = img.shape
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    a, b, tx, ty = (inv[:, i, None, None] for i in range(4))
    sx = a * xs - b * ys + tx
    sy = b * xs + a * ys + ty
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = sx - x0f
    fy = sy - y0f
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    n = np.arange(B)[:, None, None]

    def tap(yy, xx):
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        v = img[n, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        return np.where(ok, v, 0.0)

    v00 = tap(y0, x0)
    v01 = tap(y0, x0 + 1)
    v10 = tap(y0 + 1, x0)
    v11 = tap(y0 + 1, x0 + 1)
    return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)


def heatmap(pts, h, w, sigma):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((pts.shape[0], h, w))
    for n, p in enumerate(pts):
        dx = xs[:, :, None] - p[:, 0]
        dy = ys[:, :, None] - p[:, 1]
        out[n] = (dx * dx + dy * dy).min(axis=-1)
    return np.exp(-out * (1.0 / (2.0 * sigma * sigma)))
