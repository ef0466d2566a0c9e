"""Adam optimizer and shared network blocks."""

import numpy as np

from flowsynth import tensor as T
from flowsynth.nn import ParamSet, conv_init, dense_init, time_embedding
from flowsynth.optim import AdamState, adam_step, zero_grads
from flowsynth.rng import Rng
from flowsynth.tensor import Tensor


def test_adam_first_step_magnitude():
    """After one step from zero state, the update is ~lr * sign(grad)."""
    p = Tensor(np.zeros(4, np.float32), requires_grad=True)
    p.grad = np.array([1.0, -2.0, 0.5, -0.1], np.float32)
    st = AdamState([p], lr=0.01)
    adam_step([p], st)
    assert np.allclose(p.data, -0.01 * np.sign(p.grad), atol=1e-4)


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -3.0, 2.0], np.float32)
    p = Tensor(np.zeros(3, np.float32), requires_grad=True)
    st = AdamState([p], lr=0.1)
    for _ in range(300):
        zero_grads([p])
        loss = T.tmean(T.square(p - Tensor(target)))
        loss.backward()
        adam_step([p], st)
    assert np.max(np.abs(p.data - target)) < 0.05


def test_zero_grads():
    p = Tensor(np.ones(3, np.float32), requires_grad=True)
    p.grad = np.ones(3, np.float32)
    zero_grads([p])
    assert p.grad is None


def test_paramset_registry_and_freeze():
    ps = ParamSet()
    rng = Rng(0)
    conv_init(ps, rng.split(0), "c", 2, 1, 3)
    dense_init(ps, rng.split(1), "d", 4, 2)
    assert ps.names() == ["c.w", "c.b", "d.w", "d.b"]
    assert all(t.requires_grad for t in ps.tensors())
    state = ps.state_dict()
    ps2 = ParamSet()
    conv_init(ps2, rng.split(2), "c", 2, 1, 3)
    dense_init(ps2, rng.split(3), "d", 4, 2)
    ps2.load_state_dict(state)
    for k in ps.names():
        assert np.array_equal(ps[k].data, ps2[k].data)
    ps.freeze()
    assert not any(t.requires_grad for t in ps.tensors())


def test_conv_init_statistics():
    ps = ParamSet()
    w, b = conv_init(ps, Rng(1).split(0), "c", 32, 16, 3)
    fan_in = 16 * 27
    assert abs(w.data.std() - np.sqrt(2.0 / fan_in)) < 0.01
    assert np.all(b.data == 0.0)


def test_time_embedding_shape_and_distinctness():
    e = time_embedding(np.array([0.1, 0.9]))
    assert e.shape == (2, 32)
    assert np.abs(e.data[0] - e.data[1]).max() > 0.1
    assert np.all(np.abs(e.data) <= 1.0 + 1e-6)
    e2 = time_embedding(0.1)
    assert e2.shape == (1, 32)
    assert np.allclose(e2.data[0], e.data[0])
