"""Pure-numpy kernels.

Forward kernels accumulate in the same order as the numba kernels
(input channel, then kernel row, then kernel column, bias last), so both
backends produce bitwise-identical forward activations.
"""

import numpy as np


def conv2d_forward(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ci in range(cin):
        for kh in range(k):
            rows = slice(kh, kh + stride * (oh - 1) + 1, stride)
            for kw in range(k):
                cols = slice(kw, kw + stride * (ow - 1) + 1, stride)
                patch = xp[:, ci, rows, cols]
                out += w[:, ci, kh, kw][None, :, None, None] * patch[:, None]
    out += b[None, :, None, None]
    return out


def conv2d_backward(x, w, up, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    _, _, oh, ow = up.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    gw = np.zeros(w.shape, dtype=x.dtype)
    for kh in range(k):
        rows = slice(kh, kh + stride * (oh - 1) + 1, stride)
        for kw in range(k):
            cols = slice(kw, kw + stride * (ow - 1) + 1, stride)
            gw[:, :, kh, kw] = np.einsum("nohw,nchw->oc", up, xp[:, :, rows, cols])
            gxp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", up, w[:, :, kh, kw])
    gb = up.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gxp), gw, gb


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, i.e. the lowest row-major index
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool2_backward(up, idx, h, w):
    n, c, oh, ow = up.shape
    onehot = (idx[..., None] == np.arange(4)).astype(up.dtype)
    g = onehot * up[..., None]
    g = g.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, h, w))
