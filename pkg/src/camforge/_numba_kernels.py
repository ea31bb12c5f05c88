"""numba kernels mirroring ``_numpy_kernels``.

No ``fastmath``: accumulation order must stay exactly as written.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _conv_fwd(xp, w, b, out, stride):
    # output column innermost so the loop vectorizes; each element still sums (ci, kh, kw) in order
    n, cout, oh, ow = out.shape
    cin = w.shape[1]
    k = w.shape[2]
    for job in prange(n * cout):
        ni = job // cout
        co = job % cout
        for oy in range(oh):
            row = out[ni, co, oy]
            for ci in range(cin):
                for kh in range(k):
                    src = xp[ni, ci, oy * stride + kh]
                    for kw in range(k):
                        wv = w[co, ci, kh, kw]
                        for ox in range(ow):
                            row[ox] += wv * src[ox * stride + kw]
            bv = b[co]
            for ox in range(ow):
                row[ox] += bv


@njit(parallel=True, cache=True)
def _conv_bwd_input(up, w, gxp, stride):
    n, cout, oh, ow = up.shape
    cin = w.shape[1]
    k = w.shape[2]
    for job in prange(n * cin):
        ni = job // cin
        ci = job % cin
        for co in range(cout):
            for kh in range(k):
                for kw in range(k):
                    wv = w[co, ci, kh, kw]
                    for oy in range(oh):
                        g = up[ni, co, oy]
                        dst = gxp[ni, ci, oy * stride + kh]
                        for ox in range(ow):
                            dst[ox * stride + kw] += g[ox] * wv


@njit(parallel=True, cache=True)
def _conv_bwd_weight(up, xp, gw, stride):
    # per-column partial sums (fixed order, so still deterministic) let the inner loop vectorize
    n, cout, oh, ow = up.shape
    cin = gw.shape[1]
    k = gw.shape[2]
    for job in prange(cout * cin):
        co = job // cin
        ci = job % cin
        part = np.zeros(ow, dtype=gw.dtype)
        for kh in range(k):
            for kw in range(k):
                part[:] = 0
                for ni in range(n):
                    for oy in range(oh):
                        g = up[ni, co, oy]
                        src = xp[ni, ci, oy * stride + kh]
                        for ox in range(ow):
                            part[ox] += g[ox] * src[ox * stride + kw]
                acc = part[0]
                for ox in range(1, ow):
                    acc += part[ox]
                gw[co, ci, kh, kw] = acc


@njit(cache=True)
def _pool_fwd(x, out, idx):
    n, c, oh, ow = out.shape
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = x[ni, ci, 2 * oy, 2 * ox]
                    arg = 0
                    for j in range(1, 4):
                        v = x[ni, ci, 2 * oy + j // 2, 2 * ox + j % 2]
                        if v > best:
                            best = v
                            arg = j
                    out[ni, ci, oy, ox] = best
                    idx[ni, ci, oy, ox] = arg


@njit(cache=True)
def _pool_bwd(up, idx, g):
    n, c, oh, ow = up.shape
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    j = idx[ni, ci, oy, ox]
                    g[ni, ci, 2 * oy + j // 2, 2 * ox + j % 2] = up[ni, ci, oy, ox]


def _pad(x, padding):
    if not padding:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, b, stride, padding):
    n, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    _conv_fwd(_pad(x, padding), np.ascontiguousarray(w), np.ascontiguousarray(b), out, stride)
    return out


def conv2d_backward(x, w, up, stride, padding):
    n, cin, h, wd = x.shape
    xp = _pad(x, padding)
    up = np.ascontiguousarray(up)
    w = np.ascontiguousarray(w)
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    gw = np.zeros(w.shape, dtype=x.dtype)
    _conv_bwd_input(up, w, gxp, stride)
    _conv_bwd_weight(up, xp, gw, stride)
    gb = up.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    if padding:
        gxp = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + wd])
    return gxp, gw, gb


def maxpool2_forward(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _pool_fwd(np.ascontiguousarray(x), out, idx)
    return out, idx


def maxpool2_backward(up, idx, h, w):
    n, c, _, _ = up.shape
    g = np.zeros((n, c, h, w), dtype=up.dtype)
    _pool_bwd(np.ascontiguousarray(up), idx, g)
    return g
