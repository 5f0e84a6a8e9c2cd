"""Dense tensors with tape-based reverse-mode autodiff.

Every operation works on whole numpy arrays. Each result records its parents and
a closure that maps the upstream gradient to parent gradients. Nodes carry a
monotonically increasing tape index, so replaying reachable nodes in descending
index order is a valid reverse topological order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DimensionError

_tape_index = itertools.count()

PRECISIONS = {"single": np.float32, "double": np.float64}


def resolve_dtype(precision):
    if precision in PRECISIONS:
        return np.dtype(PRECISIONS[precision])
    return np.dtype(precision)


class Tensor:
    """An n-dimensional array node in the autodiff graph.

    Leaf tensors created with ``requires_grad=True`` are trainable parameters;
    ``name`` is the handle under which :func:`backward` reports their gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_index")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise ContractError(f"unsupported dtype {arr.dtype}")
        if arr.dtype.kind != "f" and requires_grad:
            raise ContractError("only floating tensors can require gradients")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._index = next(_tape_index)

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
        return self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * positive,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner),)

    return _result(out.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisations

def _softmax_array(v, axis, mask=None):
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1, mask=None):
    """Max-shifted softmax along ``axis``.

    ``mask`` (broadcastable boolean) excludes entries; they get exactly zero
    probability. Every slice must keep at least one unmasked entry.
    """
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim) if x.ndim else (None,)
    if ax is None:
        raise DimensionError("softmax needs at least 1-D input")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=ax).all():
            raise ContractError("softmax slice is fully masked")
    out = _softmax_array(x.data, ax, mask)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (x,), backward)


LAYERNORM_EPS = 1e-5


def layernorm(x, gain, bias, eps=LAYERNORM_EPS):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layernorm gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out.astype(x.dtype), (x, gain, bias), backward)


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is [N, C]. Optional ``weights`` [N] selects which rows count
    (e.g. non-padded positions); the mean is taken over their total weight.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy expects [N, C] logits and [N] targets, "
                             f"got {logits.shape} and {targets.shape}")
    n, c = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target label out of range [0, {c})")
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy needs at least one weighted row")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -(w * logp[rows, targets]).sum() / total

    def backward(g):
        probs = np.exp(logp)
        probs[rows, targets] -= 1.0
        return (g * probs * (w / total)[:, None],)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# gather / scatter over the leading axis

def take(x, index):
    """Rows ``x[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("take index out of range")

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(x.data[index], (x,), backward)


def index_add(index, values, size):
    """Scatter-add ``values`` rows into a zero tensor with ``size`` rows.

    Accumulation follows the order of ``index``, so duplicate targets are
    summed deterministically.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.shape != values.shape[:1]:
        raise DimensionError("index_add index must match leading axis of values")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError("index_add target out of range")
    out = np.zeros((size,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values.data)
    return _result(out, (values,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# autodiff driver

def backward(loss, params=None):
    """Reverse sweep from a scalar ``loss``.

    Returns ``{name: gradient}`` for ``params`` (an iterable of named leaf
    tensors, or a mapping name -> tensor). Parameters not reachable from the
    loss get zero gradients. With ``params=None`` every named leaf reached
    during the sweep is reported. Leaf ``.grad`` attributes are set as well.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() needs a scalar Tensor loss")
    if isinstance(params, dict):
        params = list(params.values())

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._index in nodes or not node.requires_grad:
            continue
        nodes[node._index] = node
        stack.extend(node._parents)

    grads = {loss._index: np.ones_like(loss.data)}
    for idx in sorted(nodes, reverse=True):
        node = nodes[idx]
        g = grads.get(idx)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            if parent._index in grads:
                grads[parent._index] = grads[parent._index] + pg
            else:
                grads[parent._index] = pg

    if params is None:
        params = [n for n in nodes.values() if n._backward is None and n.name is not None]
    out = {}
    for p in params:
        g = grads.get(p._index)
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        out[p.name] = g
    return out


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params[name].data``.

    ``params`` maps names to tensors; ``grads`` maps the same names to arrays.
    Returns ``state`` (mutated) for chaining.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# gradient checking

def numerical_gradient(f, array, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
