import numpy as np
import pytest

from conrf import autodiff as ad
from conrf.nn import Adam, Conv2d, Linear

from util_grad import fd_grad, rel_err

RNG = np.random.default_rng(7)


def check_op(build, *shapes, tol=1e-6, positive=False):
    """FD-check d(sum of op output)/d(each input)."""
    arrays = [RNG.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    for i in range(len(arrays)):
        def scalar(x, i=i):
            args = [a.copy() for a in arrays]
            args[i] = x
            ts = [ad.Tensor(a) for a in args]
            return float(build(*ts).data.sum())

        ts = [ad.Tensor(a, requires_grad=(j == i)) for j, a in enumerate(arrays)]
        out = build(*ts)
        out.sum().backward()
        assert rel_err(ts[i].grad, fd_grad(scalar, arrays[i].copy())) < tol, f"input {i}"


def test_elementwise_grads():
    check_op(lambda a, b: a * b + a - b / (b * b + 2.0), (3, 4), (3, 4))
    check_op(lambda a: ad.exp(a) + ad.sigmoid(a) * ad.softplus(a), (5,))
    check_op(lambda a: ad.sqrt(a) + ad.log(a), (6,), positive=True)
    check_op(lambda a: ad.relu(a) + ad.leaky_relu(a, 0.1), (4, 3))
    check_op(lambda a: ad.absolute(a) ** 3, (7,))


def test_broadcast_grads():
    check_op(lambda a, b: a * b, (3, 4), (4,))
    check_op(lambda a, b: a + b, (2, 3, 4), (3, 1))


def test_matmul_reduction_grads():
    check_op(lambda a, b: ad.matmul(a, b), (3, 4), (4, 2))
    check_op(lambda a: a.mean(axis=1), (3, 5))
    check_op(lambda a: a.sum(axis=(0, 2), keepdims=True), (2, 3, 4))
    check_op(lambda a: ad.concat([a, a * 2.0], axis=1), (2, 3))
    check_op(lambda a: a.reshape(6, 2).transpose((1, 0)), (3, 4))
    check_op(lambda a: a[1:, ::2], (3, 4))


def test_conv_upsample_grads():
    check_op(lambda x, w: ad.conv2d(x, w, stride=1, pad=1), (2, 3, 5, 5), (4, 3, 3, 3))
    check_op(lambda x, w: ad.conv2d(x, w, stride=2, pad=1), (1, 2, 6, 6), (3, 2, 3, 3))
    check_op(lambda x, w: ad.conv2d(x, w, stride=2, pad=0), (1, 2, 7, 7), (3, 2, 3, 3))
    check_op(lambda x, w: ad.conv2d(x, w, stride=1, pad=0), (2, 3, 4, 4), (2, 3, 1, 1))
    check_op(lambda x: ad.upsample2d(x, 2), (2, 3, 3, 3))


def test_composite_grads():
    a = np.abs(RNG.normal(size=(4, 6))) * 0.8

    def scalar_w(x):
        w, _ = ad.composite(ad.Tensor(x))
        return float((w.data * coeff).sum())

    def scalar_t(x):
        _, t = ad.composite(ad.Tensor(x))
        return float((t.data * tcoeff).sum())

    coeff = RNG.normal(size=(4, 6))
    tcoeff = RNG.normal(size=4)

    sd = ad.Tensor(a, requires_grad=True)
    w, t = ad.composite(sd)
    (w * coeff).sum().backward()
    assert rel_err(sd.grad, fd_grad(scalar_w, a.copy())) < 1e-6

    sd = ad.Tensor(a, requires_grad=True)
    w, t = ad.composite(sd)
    (t * tcoeff).sum().backward()
    assert rel_err(sd.grad, fd_grad(scalar_t, a.copy())) < 1e-6

    # both outputs in one objective
    sd = ad.Tensor(a, requires_grad=True)
    w, t = ad.composite(sd)
    ((w * coeff).sum() + (t * tcoeff).sum()).backward()

    def scalar_both(x):
        w, t = ad.composite(ad.Tensor(x))
        return float((w.data * coeff).sum() + (t.data * tcoeff).sum())

    assert rel_err(sd.grad, fd_grad(scalar_both, a.copy())) < 1e-6


def test_trilinear_sample_grad():
    grid = RNG.normal(size=(4, 4, 4, 2))
    m = 10
    ix = RNG.integers(0, 3, size=m)
    iy = RNG.integers(0, 3, size=m)
    iz = RNG.integers(0, 3, size=m)
    fx, fy, fz = RNG.random(m), RNG.random(m), RNG.random(m)
    coeff = RNG.normal(size=(m, 2))

    def scalar(g):
        out = ad.trilinear_sample(ad.Tensor(g), ix, iy, iz, fx, fy, fz)
        return float((out.data * coeff).sum())

    gt = ad.Tensor(grid, requires_grad=True)
    out = ad.trilinear_sample(gt, ix, iy, iz, fx, fy, fz)
    (out * coeff).sum().backward()
    assert rel_err(gt.grad, fd_grad(scalar, grid.copy())) < 1e-6


def test_no_grad_blocks_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


def test_grad_accumulates_over_reuse():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert np.allclose(x.grad, [5.0])


def test_adam_descends_quadratic():
    p = ad.Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_linear_conv_modules_train():
    rng = np.random.default_rng(0)
    lin = Linear(3, 2, rng)
    conv = Conv2d(2, 4, 3, rng, stride=1)
    x = ad.Tensor(rng.normal(size=(5, 3)))
    y = lin(x)
    assert y.shape == (5, 2)
    xi = ad.Tensor(rng.normal(size=(1, 2, 6, 6)))
    yi = conv(xi)
    assert yi.shape == (1, 4, 6, 6)
    names = [n for n, _ in conv.named_parameters()]
    assert names == ["weight", "bias"]
    sd = conv.state_dict()
    conv2 = Conv2d(2, 4, 3, np.random.default_rng(99), stride=1)
    conv2.load_state_dict(sd)
    assert np.array_equal(conv2.weight.data, conv.weight.data)
    with pytest.raises(ValueError):
        conv2.load_state_dict({"weight": sd["weight"]})
