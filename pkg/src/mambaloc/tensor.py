"""Float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output through ``Tensor._make``, which
records the parent tensors and a closure mapping the upstream gradient to one
gradient per parent. ``backward`` orders the recorded graph topologically and
runs those closures in reverse.

Elementwise ops follow numpy broadcasting; gradients of broadcast operands are
summed back to the operand's shape.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import (
    NondeterministicFunction,
    NonFiniteGradient,
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
)

_node_ids = itertools.count()
_state = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"non-finite value in leaf tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = None
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._make(self.data, (), None, "detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, grad=None, leaves=None):
        backward(self, grad=grad, leaves=leaves)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._make(out, (a, b), bw, "div")


def scale(x, c):
    c = float(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b):
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, p = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, p)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


# -- elementwise unary -------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def exp(x):
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x):
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(x):
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(x):
    xd = x.data
    s = _sigmoid(xd)
    return Tensor._make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def softplus(x):
    xd = x.data
    return Tensor._make(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def gelu(x):
    """GELU, tanh approximation, with the exact derivative of that approximation."""
    xd = x.data
    inner = GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), bw, "gelu")


_ACTIVATIONS = {"gelu": gelu, "silu": silu, "softplus": softplus, "exp": exp, "tanh": tanh}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


SERIES_CUTOFF = 1e-8


def expm1_ratio(z):
    """phi(z) = (exp(z) - 1) / z, the ZOH input-gain factor; phi(0) = 1.

    Below |z| < 1e-8 the two-term series 1 + z/2 is used, with derivative 1/2.
    """
    zd = z.data
    small = np.abs(zd) < SERIES_CUTOFF
    safe = np.where(small, 1.0, zd)
    em1 = np.expm1(safe)
    out = np.where(small, 1.0 + 0.5 * zd, em1 / safe)

    def bw(g):
        d = (safe * (em1 + 1.0) - em1) / (safe * safe)
        return (g * np.where(small, 0.5, d),)

    return Tensor._make(out, (z,), bw, "expm1_ratio")


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def index(x, idx):
    shape = x.shape
    advanced = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx))

    def bw(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._make(np.array(x.data[idx]), (x,), bw, "index")


def take(x, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = x.shape
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._make(np.take(x.data, indices, axis=axis), (x,), bw, "take")


def flip_last_dim(x):
    return Tensor._make(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),), "flip")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeMismatch(f"concat along axis {axis}: shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def concat_dim1(a, b):
    return concat([a, b], axis=1)


def slice_dim1(x, start, stop=None):
    stop = start + 1 if stop is None else stop
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for dim 1 of {x.shape}")
    return index(x, (slice(None), slice(start, stop)))


def l2norm(x, axis=-1, keepdims=False):
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    xd = x.data

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        unit = np.divide(xd, n, out=np.zeros_like(xd), where=n > 0)
        return (g * unit,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._make(out, (x,), bw, "l2norm")


def dropout(x, p, seed=None, training=True):
    """Inverted dropout with a Philox (counter-based) mask keyed by ``seed``.

    ``seed=None`` draws fresh OS entropy and is therefore not replayable.
    """
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if seed is None:
        gen = np.random.default_rng()
    else:
        key = np.array(seed if isinstance(seed, (tuple, list)) else (seed, 0), dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
    keep = (gen.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- normalisation -----------------------------------------------------------

def layernorm(x, gain, bias, eps=1e-5):
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layernorm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    red = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(xhat * gd + bias.data, (x, gain, bias), bw, "layernorm")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), bw, "softmax")


def logsoftmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw, "logsoftmax")


def softmax_family(x, kind):
    if kind == "softmax":
        return softmax(x)
    if kind == "logsoftmax":
        return logsoftmax(x)
    raise ValueError(f"unknown softmax kind {kind!r}")


_STRUCTURAL = {
    "flip_last_dim": flip_last_dim,
    "concat_dim1": concat_dim1,
    "slice_dim1": slice_dim1,
    "mean": mean,
    "l2norm": l2norm,
    "add": add,
    "mul": mul,
    "scale": scale,
    "dropout": dropout,
}


def structural(kind, *args, **kwargs):
    try:
        fn = _STRUCTURAL[kind]
    except KeyError:
        raise ValueError(f"unknown structural op {kind!r}") from None
    return fn(*args, **kwargs)


# -- backward ----------------------------------------------------------------

def topo_order(root):
    """Recorded ops reachable from ``root``, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None, leaves=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    ``grad`` seeds the upstream gradient (default 1). Leaves passed in
    ``leaves`` that the loss does not depend on get an explicit zero gradient.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteValue(f"loss is not finite: {loss.data!r}")
    seed = np.full(loss.shape, 1.0 if grad is None else float(grad))
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    grads = {loss.node_id: seed}
    for node in reversed(topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteGradient(f"non-finite gradient produced by op '{node.op}' (node {node.node_id})")
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def grad_check(f, leaves, h=1e-5, max_coords=None, seed=0):
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is a zero-argument callable that rebuilds the scalar loss from
    ``leaves``. The error per coordinate is |g_ad - g_fd| / max(1, |g_fd|).
    With ``max_coords`` only that many randomly chosen coordinates per leaf
    are probed.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    backward(loss, leaves=leaves)
    base = loss.item()
    with no_grad():
        again = f().item()
    if again != base:
        raise NondeterministicFunction(f"f returned {base!r} then {again!r} for identical inputs")
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for leaf in leaves:
            flat = leaf.data.reshape(-1)
            ad = leaf.grad.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                hi, lo = orig + h, orig - h
                flat[i] = hi
                fp = f().item()
                flat[i] = lo
                fm = f().item()
                flat[i] = orig
                # divide by the step actually taken, not the nominal 2h
                fd = (fp - fm) / (hi - lo)
                worst = max(worst, abs(ad[i] - fd) / max(1.0, abs(fd)))
    return worst
