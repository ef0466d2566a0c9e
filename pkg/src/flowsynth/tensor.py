"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float32 NumPy arrays and record a backward closure per
producing op. Reductions and convolution inner products accumulate in
float64 (see :mod:`flowsynth.kernels`). Gradients accumulate across
repeated ``backward`` calls unless buffers are reset with
``zero_grad``.
"""

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

# When True, elementwise division by an exact zero raises instead of
# propagating IEEE inf/nan.
STRICT_DIV = False


def set_strict_div(flag):
    global STRICT_DIV
    STRICT_DIV = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (
            self.shape, self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.astype(np.float32).copy()
        else:
            self.grad = self.grad + g.astype(np.float32)

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from
        this scalar. Visits each graph node exactly once."""
        if self.data.shape != ():
            raise ShapeError("backward requires a scalar loss, got shape %s"
                             % (self.data.shape,))
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones((), dtype=np.float32)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accum(g)  # leaf
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not _needs_grad(parent):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _make(data, parents, backward):
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum-reduce gradient ``g`` back to ``shape`` after broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(np.float32)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("incompatible operand shapes %s and %s"
                         % (a.shape, b.shape))


# -- elementwise binary ops ---------------------------------------------

def add(a, b):
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)),
                            (b, _unbroadcast(g, b.shape))))


def sub(a, b):
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)),
                            (b, _unbroadcast(-g, b.shape))))


def mul(a, b):
    _check_broadcast(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                            (b, _unbroadcast(g * a.data, b.shape))))


def div(a, b):
    _check_broadcast(a, b)
    if STRICT_DIV and np.any(b.data == 0):
        raise NumericError("division by exact zero in strict mode")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return ((a, _unbroadcast(ga, a.shape)),
                (b, _unbroadcast(gb, b.shape)))

    return _make(out, (a, b), backward)


def ew_binary(op, a, b):
    """Dispatch table for {add, sub, mul, div} by name."""
    return {"add": add, "sub": sub, "mul": mul, "div": div}[op](a, b)


# -- elementwise unary ops ------------------------------------------------

def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return _make(out, (a,),
                 lambda g: ((a, g * (s + a.data * s * (1.0 - s))),))


def square(a):
    return mul(a, a)


# -- reductions -----------------------------------------------------------

def _reduce(op, a, axes=None):
    nd = a.data.ndim
    if axes is None:
        ax = tuple(range(nd))
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        for x in ax:
            if not -nd <= x < nd:
                raise ShapeError("invalid reduction axis %d for shape %s"
                                 % (x, a.shape))
        ax = tuple(x % nd for x in ax)
    if op == "sum":
        out = a.data.sum(axis=ax, dtype=np.float64)
        scale = 1.0
    elif op == "mean":
        out = a.data.mean(axis=ax, dtype=np.float64)
        scale = 1.0 / np.prod([a.shape[x] for x in ax]) if ax else 1.0
    else:
        raise ValueError("unknown reduction %r" % op)

    kshape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))

    def backward(g):
        gb = np.broadcast_to(np.reshape(g, kshape), a.shape) * scale
        return ((a, gb.astype(np.float32)),)

    return _make(out.astype(np.float32), (a,), backward)


def tsum(a, axes=None):
    return _reduce("sum", a, axes)


def tmean(a, axes=None):
    return _reduce("mean", a, axes)


def reduce(op, a, axes=None):
    return _reduce(op, a, axes)


# -- shape ops --------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,),
                 lambda g: ((a, g.reshape(old)),))


def concat(tensors, axis=1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple((t, p) for t, p in zip(tensors, parts))

    return _make(out, tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=np.float32)
        full[idx] = g
        return ((a, full),)

    return _make(a.data[idx], (a,), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul expects (n,k) @ (k,m), got %s and %s"
                         % (a.shape, b.shape))
    out = (a.data.astype(np.float64) @ b.data.astype(np.float64))

    def backward(g):
        return ((a, (g @ b.data.T).astype(np.float32)),
                (b, (a.data.T @ g).astype(np.float32)))

    return _make(out.astype(np.float32), (a, b), backward)


# -- convolution and resampling ---------------------------------------------

def conv3d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of x (N,C,D,H,W) with w (O,C,k,k,k) + bias (O,)."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d expects 5-d input/weight, got %s and %s"
                         % (x.shape, w.shape))
    if x.shape[1] != w.shape[1]:
        raise ShapeError("channel mismatch: input %s vs weight %s"
                         % (x.shape, w.shape))
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    k = w.shape[2]
    in_spatial = x.shape[2:]
    for n in in_spatial:
        if (n + 2 * pad - k) // stride + 1 < 1:
            raise ShapeError(
                "kernel %d does not fit input %s with pad %d"
                % (k, x.shape, pad))
    out = kernels.conv3d_forward(x.data, w.data,
                                 None if b is None else b.data, stride, pad)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=np.float32)
        grads = []
        if _needs_grad(x):
            grads.append((x, kernels.conv3d_grad_input(
                g, w.data, stride, pad, in_spatial)))
        if _needs_grad(w):
            grads.append((w, kernels.conv3d_grad_weight(
                x.data, g, stride, pad, k)))
        if b is not None and _needs_grad(b):
            grads.append((b, g.sum(axis=(0, 2, 3, 4), dtype=np.float64)
                          .astype(np.float32)))
        return tuple(grads)

    return _make(out, parents, backward)


def nearest_up2(a):
    """Double each spatial axis of (N,C,D,H,W) by nearest-neighbor."""
    d = a.data
    out = d.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def backward(g):
        n, c, dd, hh, ww = a.shape
        gr = g.reshape(n, c, dd, 2, hh, 2, ww, 2).sum(axis=(3, 5, 7))
        return ((a, gr.astype(np.float32)),)

    return _make(out, (a,), backward)


def mean_down(a, factor):
    """Average each factor^3 spatial block of (N,C,D,H,W)."""
    n, c, d, h, w = a.shape
    f = int(factor)
    if d % f or h % f or w % f:
        raise ShapeError("spatial extents %s not divisible by %d"
                         % ((d, h, w), f))
    blocks = a.data.reshape(n, c, d // f, f, h // f, f, w // f, f)
    out = blocks.mean(axis=(3, 5, 7), dtype=np.float64).astype(np.float32)

    def backward(g):
        gb = g[:, :, :, None, :, None, :, None] / float(f ** 3)
        gb = np.broadcast_to(gb, (n, c, d // f, f, h // f, f, w // f, f))
        return ((a, gb.reshape(n, c, d, h, w).astype(np.float32)),)

    return _make(out, (a,), backward)


def resample(a, mode):
    """Named resampling: nearest_up2, mean_down2, or mean_down<N>."""
    if mode == "nearest_up2":
        return nearest_up2(a)
    if mode.startswith("mean_down"):
        return mean_down(a, int(mode[len("mean_down"):]))
    raise ValueError("unknown resample mode %r" % mode)


# -- gradient checking --------------------------------------------------------

def grad_check(f, x, h=1e-3):
    """Max over coordinates of |analytic - central difference| /
    max(1, |analytic|) for scalar-valued f."""
    x.data = np.ascontiguousarray(x.data)  # so reshape(-1) below is a view
    x.zero_grad()
    loss = f(x)
    loss.backward()
    analytic = x.grad.astype(np.float64).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        ana = analytic.reshape(-1)[i]
        err = abs(ana - num) / max(1.0, abs(ana))
        worst = max(worst, err)
    return worst
