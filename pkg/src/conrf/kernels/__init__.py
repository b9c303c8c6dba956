"""Hot numeric kernels with two interchangeable backends.

The numba backend (default) JIT-compiles the inner loops; the numpy
backend is a pure-vectorized fallback.  Select with the environment
variable ``CONRF_KERNELS=numba|numpy`` or programmatically via
:func:`set_backend`.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _numpy

_BACKENDS = {"numpy": _numpy}
_active_name = None
_active = None

KERNEL_NAMES = [
    "composite_scan",
    "composite_scan_backward",
    "trilinear_gather",
    "trilinear_scatter_add",
    "conv2d_forward",
    "conv2d_backward_weight",
    "conv2d_backward_data",
]


def _load_numba():
    if "numba" not in _BACKENDS:
        from . import _numba
        _BACKENDS["numba"] = _numba
    return _BACKENDS["numba"]


def set_backend(name):
    """Switch kernel backend at runtime ('numba' or 'numpy')."""
    global _active_name, _active
    if name == "numba":
        _active = _load_numba()
    elif name == "numpy":
        _active = _numpy
    else:
        raise ValueError(f"unknown kernel backend {name!r}, expected 'numba' or 'numpy'")
    _active_name = name
    return _active


def get_backend():
    return _active_name


def _initial_backend():
    want = os.environ.get("CONRF_KERNELS", "numba").lower()
    if want == "numba":
        try:
            return set_backend("numba")
        except ImportError:
            return set_backend("numpy")
    return set_backend(want)


_initial_backend()


def composite_scan(a):
    return _active.composite_scan(a)


def composite_scan_backward(a, grad_w, grad_t):
    return _active.composite_scan_backward(a, grad_w, grad_t)


def trilinear_gather(grid, ix, iy, iz, fx, fy, fz):
    return _active.trilinear_gather(grid, ix, iy, iz, fx, fy, fz)


def trilinear_scatter_add(grid_out, ix, iy, iz, fx, fy, fz, upstream):
    return _active.trilinear_scatter_add(grid_out, ix, iy, iz, fx, fy, fz, upstream)


def conv2d_forward(x, w, stride, pad):
    return _active.conv2d_forward(x, w, stride, pad)


def conv2d_backward_weight(x, gy, stride, pad, kh, kw):
    return _active.conv2d_backward_weight(x, gy, stride, pad, kh, kw)


def conv2d_backward_data(gy, w, stride, pad, h, wd):
    return _active.conv2d_backward_data(gy, w, stride, pad, h, wd)
