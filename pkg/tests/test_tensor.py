"""Autodiff engine: forward values vs NumPy, gradients vs central
finite differences, shape/error contracts."""

import numpy as np
import pytest

from flowsynth import tensor as T
from flowsynth.errors import NumericError, ShapeError
from flowsynth.tensor import Tensor, grad_check


def _rand(seed, shape, scale=1.0):
    return (scale * np.random.default_rng(seed).standard_normal(shape)) \
        .astype(np.float32)


def test_add_mul_forward_and_broadcast():
    a = Tensor(_rand(0, (2, 3)))
    b = Tensor(_rand(1, (3,)))
    assert np.allclose((a + b).data, a.data + b.data)
    assert np.allclose((a * b).data, a.data * b.data)
    assert np.allclose((a - 2.0).data, a.data - 2.0)
    assert np.allclose((1.0 / Tensor(np.float32(4.0))).data, 0.25)


def test_broadcast_gradient_unreduction():
    a = Tensor(_rand(2, (2, 3)), requires_grad=True)
    b = Tensor(_rand(3, (3,)), requires_grad=True)
    loss = T.tsum(a * b)
    loss.backward()
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, a.data.sum(axis=0), atol=1e-6)


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_strict_division_by_zero():
    a = Tensor(np.ones(3, np.float32))
    z = Tensor(np.zeros(3, np.float32))
    out = a / z  # IEEE mode: inf
    assert np.all(np.isinf(out.data))
    T.set_strict_div(True)
    try:
        with pytest.raises(NumericError):
            a / z
    finally:
        T.set_strict_div(False)


def test_reductions_match_float64_numpy():
    a = Tensor(_rand(4, (3, 4, 5)))
    assert np.allclose(T.tsum(a).data, a.data.sum(dtype=np.float64),
                       rtol=1e-6)
    assert np.allclose(T.tmean(a, axes=(1,)).data,
                       a.data.mean(axis=1, dtype=np.float64), rtol=1e-6)
    with pytest.raises(ShapeError):
        T.tsum(a, axes=5)


def test_backward_requires_scalar():
    a = Tensor(_rand(5, (2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (a * a).backward()


def test_shared_subexpression_gradient():
    # loss = sum(x*x + x*x) => d/dx = 4x
    x = Tensor(_rand(6, (4,)), requires_grad=True)
    y = x * x
    loss = T.tsum(y + y)
    loss.backward()
    assert np.allclose(x.grad, 4 * x.data, atol=1e-5)


def test_gradients_accumulate_until_zeroed():
    x = Tensor(_rand(7, (3,)), requires_grad=True)
    for _ in range(2):
        T.tsum(x * x).backward()
    assert np.allclose(x.grad, 4 * x.data, atol=1e-5)
    x.zero_grad()
    assert x.grad is None


UNARY = [
    ("exp", lambda x: T.tmean(T.exp(x)), 0.5),
    ("log", lambda x: T.tmean(T.log(x * x + Tensor(1.0))), 1.0),
    ("sigmoid", lambda x: T.tmean(T.sigmoid(x)), 1.0),
    ("silu", lambda x: T.tmean(T.silu(x)), 1.0),
    ("square", lambda x: T.tmean(T.square(x)), 1.0),
]


@pytest.mark.parametrize("name,fn,scale", UNARY)
def test_grad_check_unary(name, fn, scale):
    for seed in range(3):
        x = Tensor(_rand(10 + seed, (2, 3), scale), requires_grad=True)
        assert grad_check(fn, x) < 1e-3, name


def test_grad_check_binary_ops():
    c = Tensor(_rand(20, (2, 3)) + 2.0)
    cases = {
        "add": lambda x: T.tmean(x + c),
        "sub": lambda x: T.tmean(c - x),
        "mul": lambda x: T.tmean(x * c),
        "div": lambda x: T.tmean(x / c),
    }
    for name, fn in cases.items():
        x = Tensor(_rand(21, (2, 3)), requires_grad=True)
        assert grad_check(fn, x) < 1e-3, name
    assert T.ew_binary("mul", Tensor(2.0), Tensor(3.0)).item() == 6.0


def test_grad_check_matmul_and_reshape():
    b = Tensor(_rand(22, (3, 2)))
    x = Tensor(_rand(23, (2, 3)), requires_grad=True)
    assert grad_check(lambda t: T.tmean(T.matmul(t, b)), x) < 1e-3
    assert grad_check(
        lambda t: T.tmean(T.square(T.reshape(t, (6,)))), x) < 1e-3
    with pytest.raises(ShapeError):
        T.matmul(x, Tensor(np.zeros((5, 2), np.float32)))


def test_grad_check_concat_narrow():
    c = Tensor(_rand(24, (2, 2)))
    x = Tensor(_rand(25, (2, 2)), requires_grad=True)
    assert grad_check(
        lambda t: T.tmean(T.square(T.concat([t, c], axis=1))), x) < 1e-3
    assert grad_check(
        lambda t: T.tmean(T.square(T.narrow(t, 1, 0, 1))), x) < 1e-3


def test_grad_check_conv3d():
    w = Tensor(_rand(26, (2, 3, 3, 3, 3), 0.3))
    x = Tensor(_rand(27, (1, 3, 4, 4, 4)), requires_grad=True)
    assert grad_check(
        lambda t: T.tmean(T.square(T.conv3d(t, w, None, 1, 1))), x) < 1e-3
    wp = Tensor(_rand(28, (2, 3, 3, 3, 3), 0.3), requires_grad=True)
    xc = Tensor(_rand(29, (1, 3, 4, 4, 4)))
    assert grad_check(
        lambda t: T.tmean(T.square(T.conv3d(xc, t, None, 2, 1))), wp) < 1e-3


def test_conv3d_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4, 4), np.float32))
    with pytest.raises(ShapeError):
        T.conv3d(x, Tensor(np.zeros((2, 5, 3, 3, 3), np.float32)))
    with pytest.raises(ShapeError):
        T.conv3d(x, Tensor(np.zeros((2, 3, 3, 3), np.float32)))
    with pytest.raises(ShapeError):  # kernel larger than padded input
        T.conv3d(x, Tensor(np.zeros((2, 3, 7, 7, 7), np.float32)), None,
                 1, 0)


def test_resampling_forward_and_grads():
    x = Tensor(_rand(30, (1, 2, 2, 2, 2)), requires_grad=True)
    up = T.nearest_up2(x)
    assert up.shape == (1, 2, 4, 4, 4)
    assert np.allclose(up.data[0, 0, 0, 0, 0], x.data[0, 0, 0, 0, 0])
    assert grad_check(
        lambda t: T.tmean(T.square(T.nearest_up2(t))), x) < 1e-3
    y = Tensor(_rand(31, (1, 1, 4, 4, 4)), requires_grad=True)
    down = T.mean_down(y, 2)
    assert down.shape == (1, 1, 2, 2, 2)
    assert np.allclose(down.data[0, 0, 0, 0, 0],
                       y.data[0, 0, :2, :2, :2].mean(), atol=1e-6)
    assert grad_check(
        lambda t: T.tmean(T.square(T.mean_down(t, 2))), y) < 1e-3
    assert T.resample(y, "mean_down2").shape == (1, 1, 2, 2, 2)
    with pytest.raises(ShapeError):
        T.mean_down(Tensor(np.zeros((1, 1, 3, 3, 3), np.float32)), 2)


def test_mean_down_then_up_identity_on_constant():
    x = Tensor(np.full((1, 1, 4, 4, 4), 0.7, np.float32))
    assert np.allclose(T.nearest_up2(T.mean_down(x, 2)).data, 0.7,
                       atol=1e-6)
