"""Shared network building blocks: parameter registry, initializers,
and the sinusoidal time embedding."""

import numpy as np

from .rng import Rng
from .tensor import Tensor

TIME_EMBED_DIM = 32


class ParamSet:
    """Ordered name -> Tensor registry; the order fixes checkpoint layout
    and optimizer state indexing."""

    def __init__(self):
        self._params = {}

    def add(self, name, data):
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def freeze(self):
        """Stop gradient computation into these parameters."""
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None

    def tensors(self):
        return list(self._params.values())

    def state_dict(self):
        return {k: v.data for k, v in self._params.items()}

    def load_state_dict(self, state):
        for k, t in self._params.items():
            if k not in state:
                raise KeyError("missing parameter %r" % k)
            if tuple(state[k].shape) != t.shape:
                raise ValueError("shape mismatch for %r: %s vs %s"
                                 % (k, state[k].shape, t.shape))
            t.data = np.asarray(state[k], dtype=np.float32).copy()


def conv_init(ps, rng, name, c_out, c_in, k, scale=None):
    """He-normal kernel + zero bias; returns (w, b)."""
    fan_in = c_in * k ** 3
    s = np.sqrt(2.0 / fan_in) if scale is None else scale
    w = ps.add(name + ".w", s * rng.normal((c_out, c_in, k, k, k)))
    b = ps.add(name + ".b", np.zeros(c_out, dtype=np.float32))
    return w, b


def dense_init(ps, rng, name, n_in, n_out, scale=None):
    s = np.sqrt(2.0 / n_in) if scale is None else scale
    w = ps.add(name + ".w", s * rng.normal((n_in, n_out)))
    b = ps.add(name + ".b", np.zeros(n_out, dtype=np.float32))
    return w, b


def time_embedding(t, dim=TIME_EMBED_DIM):
    """Sinusoidal embedding of t (scalar or (N,) array) -> (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :] * 1000.0
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return Tensor(emb.astype(np.float32))


def new_rng_for(seed, stream):
    return Rng(seed).split(stream)
