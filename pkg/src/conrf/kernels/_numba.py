"""Numba @njit twins of the hot kernels.

fastmath stays off so results track the numpy fallback closely; loops
accumulate in the same order as the reference implementations.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def composite_scan(a):
    b, n = a.shape
    w = np.empty((b, n), dtype=a.dtype)
    t_res = np.empty(b, dtype=a.dtype)
    for r in range(b):
        t = 1.0
        for i in range(n):
            alpha = 1.0 - np.exp(-a[r, i])
            w[r, i] = t * alpha
            t *= np.exp(-a[r, i])
        t_res[r] = t
    return w, t_res


@njit(cache=True)
def composite_scan_backward(a, grad_w, grad_t):
    b, n = a.shape
    grad_a = np.empty((b, n), dtype=a.dtype)
    w = np.empty(n, dtype=a.dtype)
    t_after = np.empty(n, dtype=a.dtype)
    for r in range(b):
        t = 1.0
        for i in range(n):
            w[i] = t * (1.0 - np.exp(-a[r, i]))
            t *= np.exp(-a[r, i])
            t_after[i] = t
        t_res = t
        # walk samples back to front keeping the suffix sum of grad_w * w
        suffix = 0.0
        for i in range(n - 1, -1, -1):
            grad_a[r, i] = grad_w[r, i] * t_after[i] - suffix - grad_t[r] * t_res
            suffix += grad_w[r, i] * w[i]
    return grad_a


@njit(cache=True)
def trilinear_gather(grid, ix, iy, iz, fx, fy, fz):
    m = ix.shape[0]
    c = grid.shape[3]
    out = np.zeros((m, c), dtype=grid.dtype)
    for p in range(m):
        x0, y0, z0 = ix[p], iy[p], iz[p]
        tx, ty, tz = fx[p], fy[p], fz[p]
        for dx in range(2):
            wx = tx if dx else 1.0 - tx
            for dy in range(2):
                wy = ty if dy else 1.0 - ty
                for dz in range(2):
                    wz = tz if dz else 1.0 - tz
                    w = wx * wy * wz
                    node = grid[x0 + dx, y0 + dy, z0 + dz]
                    for k in range(c):
                        out[p, k] += w * node[k]
    return out


@njit(cache=True)
def trilinear_scatter_add(grid_out, ix, iy, iz, fx, fy, fz, upstream):
    m = ix.shape[0]
    c = grid_out.shape[3]
    for p in range(m):
        x0, y0, z0 = ix[p], iy[p], iz[p]
        tx, ty, tz = fx[p], fy[p], fz[p]
        for dx in range(2):
            wx = tx if dx else 1.0 - tx
            for dy in range(2):
                wy = ty if dy else 1.0 - ty
                for dz in range(2):
                    wz = tz if dz else 1.0 - tz
                    w = wx * wy * wz
                    for k in range(c):
                        grid_out[x0 + dx, y0 + dy, z0 + dz, k] += w * upstream[p, k]


@njit(cache=True, inline="always")
def _tap_range(h, ho, stride, pad, u):
    """Output rows i for which i*stride - pad + u lands inside [0, h)."""
    i0 = 0
    if pad - u > 0:
        i0 = (pad - u + stride - 1) // stride
    i1 = (h + pad - u - 1) // stride + 1
    if i1 > ho:
        i1 = ho
    return i0, i1


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((b, co, ho, wo), dtype=x.dtype)
    buf = np.empty(wo, dtype=x.dtype)
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                buf[:] = 0.0
                for c in range(ci):
                    for u in range(kh):
                        hi = i * stride - pad + u
                        if hi < 0 or hi >= h:
                            continue
                        xrow = x[n, c, hi]
                        for v in range(kw):
                            j0, j1 = _tap_range(wd, wo, stride, pad, v)
                            wv = w[o, c, u, v]
                            off = v - pad
                            if stride == 1:
                                for j in range(j0, j1):
                                    buf[j] += xrow[j + off] * wv
                            else:
                                for j in range(j0, j1):
                                    buf[j] += xrow[j * stride + off] * wv
                y[n, o, i] = buf
    return y


@njit(cache=True)
def conv2d_backward_weight(x, gy, stride, pad, kh, kw):
    b, ci, h, wd = x.shape
    _, co, ho, wo = gy.shape
    gw = np.zeros((co, ci, kh, kw), dtype=x.dtype)
    for n in range(b):
        for o in range(co):
            for c in range(ci):
                for u in range(kh):
                    i0, i1 = _tap_range(h, ho, stride, pad, u)
                    for v in range(kw):
                        j0, j1 = _tap_range(wd, wo, stride, pad, v)
                        acc = 0.0
                        for i in range(i0, i1):
                            xrow = x[n, c, i * stride - pad + u]
                            grow = gy[n, o, i]
                            for j in range(j0, j1):
                                acc += xrow[j * stride - pad + v] * grow[j]
                        gw[o, c, u, v] += acc
    return gw


@njit(cache=True)
def conv2d_backward_data(gy, w, stride, pad, h, wd):
    b, co, ho, wo = gy.shape
    _, ci, kh, kw = w.shape
    gx = np.zeros((b, ci, h, wd), dtype=gy.dtype)
    for n in range(b):
        for o in range(co):
            for c in range(ci):
                for u in range(kh):
                    i0, i1 = _tap_range(h, ho, stride, pad, u)
                    for v in range(kw):
                        j0, j1 = _tap_range(wd, wo, stride, pad, v)
                        wv = w[o, c, u, v]
                        for i in range(i0, i1):
                            grow = gy[n, o, i]
                            xrow = gx[n, c, i * stride - pad + u]
                            for j in range(j0, j1):
                                xrow[j * stride - pad + v] += grow[j] * wv
    return gx
