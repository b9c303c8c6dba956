"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path (``CONRF_KERNELS=numpy``) and the ground truth
the numba twins are tested against.  Accumulation order matches the numba
loops where it matters for bit-level reproducibility.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def composite_scan(a):
    """Alpha-composite opacities along rays.

    a: (B, N) nonnegative sigma*delta products per sample.
    Returns (weights (B, N), residual transmittance (B,)) with
    weights[i] = exp(-sum_{j<i} a_j) * (1 - exp(-a_i)).
    """
    cum = np.cumsum(a, axis=1)
    t_excl = np.exp(-(cum - a))          # transmittance before sample i
    w = t_excl * (1.0 - np.exp(-a))
    t_res = np.exp(-cum[:, -1])
    return w, t_res


def composite_scan_backward(a, grad_w, grad_t):
    """Gradient of composite_scan w.r.t. the sigma*delta products."""
    cum = np.cumsum(a, axis=1)
    t_excl = np.exp(-(cum - a))
    w = t_excl * (1.0 - np.exp(-a))
    t_incl = t_excl * np.exp(-a)         # transmittance after sample i
    t_res = t_incl[:, -1]

    gw_w = grad_w * w
    # suffix[i] = sum_{j > i} grad_w[j] * w[j]
    suffix = np.flip(np.cumsum(np.flip(gw_w, axis=1), axis=1), axis=1) - gw_w
    grad_a = grad_w * t_incl - suffix - grad_t[:, None] * t_res[:, None]
    return grad_a


def trilinear_gather(grid, ix, iy, iz, fx, fy, fz):
    """Trilinearly interpolate grid (Gx, Gy, Gz, C) at M points.

    ix/iy/iz are lower-corner indices (int64, already clamped to G-2),
    fx/fy/fz the fractional offsets in [0, 1].
    """
    out = np.zeros((ix.shape[0], grid.shape[3]), dtype=grid.dtype)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                w = (wx * wy * wz)[:, None]
                out += w * grid[ix + dx, iy + dy, iz + dz]
    return out


def trilinear_scatter_add(grid_out, ix, iy, iz, fx, fy, fz, upstream):
    """Transpose of trilinear_gather: scatter-add upstream (M, C) into grid_out."""
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                w = (wx * wy * wz)[:, None]
                np.add.at(grid_out, (ix + dx, iy + dy, iz + dz), w * upstream)


def _im2col(x, kh, kw, stride, pad):
    b, ci, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (B, Ci, Ho, Wo, kh, kw)
    return windows


def conv2d_forward(x, w, stride, pad):
    """2D cross-correlation. x (B,Ci,H,W), w (Co,Ci,kh,kw) -> (B,Co,Ho,Wo)."""
    cols = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    return np.einsum("bihwkl,oikl->bohw", cols, w, optimize=True)


def conv2d_backward_weight(x, gy, stride, pad, kh, kw):
    cols = _im2col(x, kh, kw, stride, pad)
    return np.einsum("bihwkl,bohw->oikl", cols, gy, optimize=True)


def conv2d_backward_data(gy, w, stride, pad, h, wd):
    """Gradient w.r.t. the conv input, shape (B, Ci, h, wd)."""
    b, co, ho, wo = gy.shape
    _, ci, kh, kw = w.shape
    if stride > 1:
        gyd = np.zeros((b, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=gy.dtype)
        gyd[:, :, ::stride, ::stride] = gy
    else:
        gyd = gy
    # pad so a valid correlation with the flipped kernel covers every input cell
    top, left = kh - 1 - pad, kw - 1 - pad
    bottom = h + pad - kh - (ho - 1) * stride + (kh - 1)
    right = wd + pad - kw - (wo - 1) * stride + (kw - 1)
    gyd = np.pad(gyd, ((0, 0), (0, 0), (max(top, 0), max(bottom, 0)), (max(left, 0), max(right, 0))))
    if top < 0:
        gyd = gyd[:, :, -top:, :]
    if left < 0:
        gyd = gyd[:, :, :, -left:]
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)    # (Ci, Co, kh, kw)
    return conv2d_forward(gyd, wflip, 1, 0)
