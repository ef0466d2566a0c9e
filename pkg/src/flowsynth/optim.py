"""Adam optimizer with bias correction."""

import numpy as np

from .errors import ShapeError


class AdamState:
    """First/second-moment buffers mirroring the parameter shapes."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float32) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float32) for p in params]


def adam_step(params, state):
    """One in-place update from each parameter's ``grad`` buffer.

    Parameters with a missing grad are treated as zero-gradient.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros(p.shape, dtype=np.float32)
        if g.shape != p.data.shape:
            raise ShapeError("grad shape %s != param shape %s"
                             % (g.shape, p.data.shape))
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(
            np.float32)


def zero_grads(params):
    for p in params:
        p.zero_grad()
