"""Minimal reverse-mode autodiff on numpy arrays.

Every primitive appends one node to a global tape while recording is on.
``backward`` replays the tape in exact reverse order, accumulating adjoints
into ``Tensor.grad`` of leaves, and then clears the tape.

Only the primitives the transformer needs are provided.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_state = {"dtype": np.float32, "record": True, "check_finite": True}
_tape = []


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float64 for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


def get_default_dtype():
    return _state["dtype"]


@contextmanager
def no_grad():
    old = _state["record"]
    _state["record"] = False
    try:
        yield
    finally:
        _state["record"] = old


def set_check_finite(flag):
    """Toggle the per-op finiteness check; returns the previous setting."""
    old = _state["check_finite"]
    _state["check_finite"] = bool(flag)
    return old


def tape_length():
    return len(_tape)


def clear_tape():
    _tape.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_on_tape", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        dt = dtype if dtype is not None else _state["dtype"]
        self.data = np.asarray(data, dtype=dt)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._on_tape = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only division by a Python scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    if _state["check_finite"] and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value in forward output")
    out = Tensor(data, dtype=data.dtype)
    if _state["record"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._on_tape = True
        _tape.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss):
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError("backward needs a scalar loss")
    if not loss._on_tape:
        raise GraphError("loss is not on the active graph")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, parents, fn in reversed(_tape):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._on_tape:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            else:
                leaves[id(p)] = p
                pg = np.asarray(pg, dtype=p.data.dtype)
                if p.grad is None:
                    p.grad = pg.copy() if pg.shape == p.shape else np.broadcast_to(pg, p.shape).copy()
                else:
                    p.grad += pg
    # consume the graph: intermediate nodes drop off the tape
    for out, _, _ in _tape:
        out._on_tape = False
    _tape.clear()
    return list(leaves.values())


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)

        def bw_s(g):
            return (g * s,)

        return _result(a.data * a.data.dtype.type(s), (a,), bw_s)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _result(ad * bd, (a, b), bw)


def relu(x):
    y = np.maximum(x.data, 0)

    def bw(g):
        return (g * (y > 0),)

    return _result(y, (x,), bw)


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return _result(y, (x,), bw)


def log(x):
    xd = x.data

    def bw(g):
        return (g / xd,)

    return _result(np.log(xd), (x,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), bw)


def transpose(x, axes=None):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _result(x.data.transpose(axes), (x,), bw)


def getitem(x, idx):
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx]), (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product; leading dimensions broadcast as in ``np.matmul``.

    Backward: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast dims).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _result(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` as one node; ``weight`` is [in, out]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear shape mismatch: {xd.shape} x {wd.shape}")
    x2 = xd.reshape(-1, wd.shape[0])
    y = x2 @ wd
    if bias is not None:
        y += bias.data
    out_shape = xd.shape[:-1] + (wd.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y.reshape(out_shape), parents, bw)


# ---------------------------------------------------------------- normalisation

def softmax(x, axis=-1, mask=None):
    """Softmax with max subtraction. ``mask`` (bool, broadcastable) keeps True entries.

    Masked entries act as -inf logits and come out as exactly 0.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y.astype(x.dtype, copy=False), (x,), bw)


def log_softmax(x, axis=-1):
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    def bw(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(y.astype(x.dtype, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------- convolution

def conv2d_nhwc(x, kernel, bias=None, stride=1):
    """3x3 convolution, padding 1, channels-last: x [B, T, F, C], kernel [C', C, 3, 3].

    Output [B, ceil(T/stride), ceil(F/stride), C'].
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise DimensionError("conv2d expects a 4-d input and a [C',C,3,3] kernel")
    if kd.shape[1] != xd.shape[3]:
        raise DimensionError(f"conv2d channel mismatch: {xd.shape[3]} vs {kd.shape[1]}")
    if xd.shape[1] == 0 or xd.shape[2] == 0:
        raise DimensionError("conv2d on empty spatial dims")
    if stride not in (1, 2):
        raise DimensionError("stride must be 1 or 2")
    B, Tn, F, C = xd.shape
    co = kd.shape[0]
    cols = kernels.im2col3x3(xd, stride)  # [B, To, Fo, 9*C], order (ki, kj, c)
    To, Fo = cols.shape[1], cols.shape[2]
    w2 = np.ascontiguousarray(kd.transpose(0, 2, 3, 1)).reshape(co, 9 * C)
    cols2 = cols.reshape(-1, 9 * C)
    y = cols2 @ w2.T
    if bias is not None:
        y += bias.data

    def bw(g):
        g2 = g.reshape(-1, co)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im3x3((g2 @ w2).reshape(B, To, Fo, 9 * C), xd.shape, stride)
        gk = (g2.T @ cols2).reshape(co, 3, 3, C).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(y.reshape(B, To, Fo, co), parents, bw)


def conv2d(x, kernel, bias=None, stride=1):
    """3x3 convolution, padding 1, over [B, C, T, F] with kernel [C', C, 3, 3].

    Output spatial size is ceil(n / stride) on both axes.
    """
    if x.ndim != 4:
        raise DimensionError("conv2d expects x [B,C,T,F]")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), kernel, bias, stride)
    return transpose(y, (0, 3, 1, 2))


# ---------------------------------------------------------------- misc

def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), bw)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    wshape = weight.shape

    def bw(g):
        full = np.zeros(wshape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (full,)

    return _result(weight.data[ids], (weight,), bw)
