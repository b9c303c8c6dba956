"""Minimal reverse-mode autodiff over numpy arrays.

Everything trainable in this package (grids, mapping network, decoder,
toy encoders) runs on this engine so the whole pipeline stays numpy-native
and deterministic.  Ops create backward closures only when some input
requires grad and grad mode is enabled, so inference pays no graph cost.
"""

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    topo.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def op(data, parents, backward):
    """Build a graph node; `backward(g)` returns grads aligned with parents."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data + b.data, (a, b),
              lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data * b.data, (a, b),
              lambda g: (_unbroadcast(g * b.data, a.data.shape),
                         _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data / b.data, (a, b),
              lambda g: (_unbroadcast(g / b.data, a.data.shape),
                         _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def powc(a, p):
    a = as_tensor(a)
    out = a.data ** p
    return op(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return op(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = as_tensor(a)
    return op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return op(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return op(a.data * scale, (a,), lambda g: (g * scale,))


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = _stable_sigmoid(a.data)
    return op(out, (a,), lambda g: (g * sig,))


# -- shape / reduction ---------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return op(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def reshape(a, shape):
    a = as_tensor(a)
    return op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, idx):
    a = as_tensor(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return op(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
              lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data @ b.data, (a, b),
              lambda g: (g @ b.data.T, a.data.T @ g))


# -- spatial ops ---------------------------------------------------------

def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation: x (B,Ci,H,W) with w (Co,Ci,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    _, _, h, wd = x.data.shape
    _, _, kh, kw = w.data.shape
    y = kernels.conv2d_forward(x.data, w.data, stride, pad)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_data(g, w.data, stride, pad, h, wd) if x.requires_grad else None
        gw = kernels.conv2d_backward_weight(x.data, g, stride, pad, kh, kw) if w.requires_grad else None
        return (gx, gw)

    return op(y, (x, w), backward)


def upsample2d(x, factor):
    """Nearest-neighbour upsampling of (B,C,H,W) by an integer factor."""
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return op(y, (x,), backward)


# -- volume-rendering ops -------------------------------------------------

def trilinear_sample(grid, ix, iy, iz, fx, fy, fz):
    """Interpolate a (Gx,Gy,Gz,C) grid tensor at prepared sample coords.

    Index/fraction arrays are constants (no gradient w.r.t. positions);
    the gradient w.r.t. the grid is a trilinear scatter-add.
    """
    grid = as_tensor(grid)
    out = kernels.trilinear_gather(grid.data, ix, iy, iz, fx, fy, fz)

    def backward(g):
        gg = np.zeros_like(grid.data)
        kernels.trilinear_scatter_add(gg, ix, iy, iz, fx, fy, fz, np.ascontiguousarray(g))
        return (gg,)

    return op(out, (grid,), backward)


def composite(sigma_delta):
    """Volume-rendering weights from (B,N) sigma*delta products.

    Returns (weights (B,N), residual transmittance (B,));
    weights_i + residual sum to 1 per ray.
    """
    sd = as_tensor(sigma_delta)
    w, t = kernels.composite_scan(sd.data)

    def backward_w(g):
        zero_t = np.zeros_like(t)
        return (kernels.composite_scan_backward(sd.data, np.ascontiguousarray(g), zero_t),)

    def backward_t(g):
        # residual transmittance is exp(-sum_i a_i): d/da_i = -t
        return (np.broadcast_to((-g * t)[:, None], sd.data.shape).copy(),)

    return op(w, (sd,), backward_w), op(t, (sd,), backward_t)
