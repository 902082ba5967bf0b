"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors default to float32 storage; float64 tensors are supported so that
gradients can be checked against finite differences in double precision.
Reductions accumulate in float64 and cast back to the storage dtype.

Every op records its parents and a backward closure on the output tensor.
Node ids come from a global counter, so sorting reachable nodes by id gives
recording order; ``backward`` walks that order in reverse, visiting each
node once.
"""
import itertools
from contextlib import contextmanager

import numpy as np

from cocktail import kernels
from cocktail.errors import ContractError, NumericError, ShapeError

EPS_STD = 1e-5

_ids = itertools.count()
_state = {"grad": True, "graph": None}
CHECK_FINITE = True


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "id", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


class Graph:
    """Records every node created inside the ``with`` block, in order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._prev = _state["graph"]
        _state["graph"] = self
        return self

    def __exit__(self, *exc):
        _state["graph"] = self._prev
        return False

    def backward(self, loss):
        return backward(loss, graph=self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _finite(arr, op):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError(f"non-finite output from {op}")


def _node(data, parents, backward_fn, op):
    _finite(data, op)
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        graph = _state["graph"]
        if graph is not None:
            graph.nodes.append(out)
    return out


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is not None:
        order = [n for n in graph.nodes if n.requires_grad]
        if loss not in order:
            order.append(loss)
        seen = {n.id for n in order}
        for n in list(order):
            for p in n._parents:
                if p.requires_grad and p.id not in seen:
                    seen.add(p.id)
                    order.append(p)
    else:
        seen = {loss.id: loss}
        stack = [loss]
        while stack:
            n = stack.pop()
            for p in n._parents:
                if p.requires_grad and p.id not in seen:
                    seen[p.id] = p
                    stack.append(p)
        order = list(seen.values())
    order.sort(key=lambda n: n.id, reverse=True)
    grads = {loss.id: np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    axes = tuple(range(nd)) + tuple(i + nd for i, s in enumerate(shape) if s == 1 and g.shape[i + nd] != 1)
    return np.sum(g, axis=axes, dtype=np.float64).reshape(shape).astype(g.dtype)


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs, axis):
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def silu(x):
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out = kernels.silu_forward(flat).reshape(x.shape)
    return _node(out, (x,), lambda g: (kernels.silu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),),
                 "silu")


def softmax(x):
    """Softmax over the last axis (rows of the trailing matrix)."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains NaN or Inf")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


softmax_rows = softmax


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of (B, C, H, W) with (O, C, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x of rank 4 and w of rank 4")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else np.ascontiguousarray(x.data)
    cols = kernels.im2col(xpad, kh, kw, stride)
    Ho, Wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols2 @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = kernels.col2im(dcols, Hp, Wp, stride)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if b is None:
            return gx, gw
        gb = np.sum(g2, axis=0, dtype=np.float64).astype(g.dtype) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, parents, bw, "conv2d")


def avg_pool2(x):
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype),)

    return _node(out, (x,), bw, "avg_pool2")


def upsample2(x):
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5), dtype=np.float64).astype(g.dtype),)

    return _node(out, (x,), bw, "upsample2")


def _stats(x, eps):
    B, C = x.shape[:2]
    flat = np.ascontiguousarray(x.data).reshape(B * C, -1)
    mu, sd = kernels.channel_stats(flat, eps)
    return mu.reshape(B, C, 1, 1), sd.reshape(B, C, 1, 1), flat.shape[1]


def channel_stats(x, eps=EPS_STD):
    """Per-channel spatial mean and population std, stabilized: sqrt(var + eps).

    Accepts (C, H, W) or (B, C, H, W); returns tensors of shape (C,) or (B, C).
    """
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    mu64, sd64, n = _stats(x, eps)
    dt = x.dtype
    xc = x.data.astype(np.float64) - mu64
    mu_t = _node(mu64.astype(dt), (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(dt),), "channel_mean")
    sd_t = _node(sd64.astype(dt), (x,), lambda g: ((g * xc / (n * sd64)).astype(dt),), "channel_std")
    shape = (x.shape[1],) if single else x.shape[:2]
    return reshape(mu_t, shape), reshape(sd_t, shape)


def channel_normalize(x, eps=EPS_STD):
    """(x - mu_c) / sigma_c per sample and channel, fused forward and backward."""
    mu64, sd64, n = _stats(x, eps)
    dt = x.dtype
    y64 = (x.data.astype(np.float64) - mu64) / sd64
    y = y64.astype(dt)

    def bw(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=(2, 3), keepdims=True)
        gy = (g64 * y64).mean(axis=(2, 3), keepdims=True)
        return (((g64 - gm - y64 * gy) / sd64).astype(dt),)

    return _node(y, (x,), bw, "channel_normalize")


def layer_normalize(x, eps=EPS_STD):
    """Normalize each sample over all of its non-batch entries."""
    B = x.shape[0]
    flat = reshape(x, (B, 1, -1, 1))
    return reshape(channel_normalize(flat, eps), x.shape)


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt.astype(table.dtype),)

    return _node(table.data[ids], (table,), bw, "embedding")


def mse(a, b):
    """Mean squared error over all elements, accumulated in float64."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {a.shape} vs {b.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = d.size
    out = np.asarray(np.mean(d * d), dtype=a.dtype)

    def bw(g):
        gd = (2.0 * float(g) / n) * d
        return gd.astype(a.dtype), (-gd).astype(b.dtype)

    return _node(out, (a, b), bw, "mse")


def resize_nearest(x, size):
    """Nearest-neighbour resample of (B, C, H, W) to ``size`` = (H', W')."""
    B, C, H, W = x.shape
    Ho, Wo = size
    if (H, W) == (Ho, Wo):
        return x
    iy = ((np.arange(Ho) + 0.5) * H / Ho).astype(np.int64)
    ix = ((np.arange(Wo) + 0.5) * W / Wo).astype(np.int64)
    out = x.data[:, :, iy][:, :, :, ix]

    def bw(g):
        gx = np.zeros((B, C, H, W), dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]), g)
        return (gx.astype(g.dtype),)

    return _node(np.ascontiguousarray(out), (x,), bw, "resize_nearest")
