"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs and a backward closure on the output
node.  backward() walks the recorded graph once in reverse topological
order and accumulates gradients into the participating leaves.  Leaves
that belong to a Param keep their gradient buffer across calls, so
gradients add up until explicitly zeroed.

All values are numpy float64.  Any operation that produces a NaN or Inf
raises NonFiniteError immediately rather than letting it propagate.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

LOG_FLOOR = math.log(1e-12)

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """A computation produced a NaN or Inf value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (values only, no backward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(a):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite value produced")
    return a


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _check_finite(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(_lift(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def sum(self):
        return sum_all(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def constant(x) -> Tensor:
    """Wrap an array as a non-differentiable node."""
    return Tensor(x, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # allocated lazily during backward
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _acc(t, g):
    """Accumulate an upstream gradient into a node's buffer."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every participating leaf's grad.

    The loss must be a scalar.  Interior-node gradients are reset at the
    start of each call; leaf gradients persist and add up across calls.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    for node in topo:
        if node._parents:
            node.grad = None
    _acc(loss, np.array(1.0))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise and arithmetic ---------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw)


def div(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bw)


def relu(t):
    t = _lift(t)
    mask = t.data > 0.0

    def bw(g):
        _acc(t, g * mask)

    return _node(np.maximum(t.data, 0.0), (t,), bw)


def sigmoid(t):
    t = _lift(t)
    x = t.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _acc(t, g * s * (1.0 - s))

    return _node(s, (t,), bw)


def exp(t):
    t = _lift(t)
    e = np.exp(t.data)

    def bw(g):
        _acc(t, g * e)

    return _node(e, (t,), bw)


def sqrt(t):
    t = _lift(t)
    r = np.sqrt(t.data)

    def bw(g):
        _acc(t, g * 0.5 / r)

    return _node(r, (t,), bw)


def reciprocal(t):
    """1/x elementwise; the caller guarantees x != 0."""
    t = _lift(t)
    r = 1.0 / t.data

    def bw(g):
        _acc(t, -g * r * r)

    return _node(r, (t,), bw)


def reciprocal_clamped(t, floor):
    """1/max(x, floor) for a scalar x; zero gradient in the clamped region."""
    t = _lift(t)
    x = float(t.data)
    r = 1.0 / max(x, floor)

    def bw(g):
        if x > floor:
            _acc(t, np.asarray(-g / (x * x)))

    return _node(np.array(r), (t,), bw)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data @ b.data

    def bw(g):
        if a.data.ndim == 1 and b.data.ndim == 1:
            _acc(a, g * b.data)
            _acc(b, g * a.data)
            return
        _acc(a, np.outer(g, b.data) if a.data.ndim == 2 and b.data.ndim == 1 else g @ b.data.T)
        _acc(b, np.outer(a.data, g) if a.data.ndim == 1 else a.data.T @ g)

    return _node(out_data, (a, b), bw)


def transpose(t):
    t = _lift(t)

    def bw(g):
        _acc(t, g.T)

    return _node(t.data.T, (t,), bw)


def reshape(t, shape):
    t = _lift(t)

    def bw(g):
        _acc(t, g.reshape(t.data.shape))

    return _node(t.data.reshape(shape), (t,), bw)


# -- reductions and shaping -------------------------------------------------


def sum_all(t):
    t = _lift(t)

    def bw(g):
        _acc(t, np.broadcast_to(g, t.data.shape))

    return _node(np.asarray(t.data.sum()), (t,), bw)


def sum_rows(t):
    """Column sums of a matrix: (n, d) -> (d,)."""
    t = _lift(t)

    def bw(g):
        _acc(t, np.broadcast_to(g, t.data.shape))

    return _node(t.data.sum(axis=0), (t,), bw)


def mean_rows(t):
    t = _lift(t)
    n = t.data.shape[0]

    def bw(g):
        _acc(t, np.broadcast_to(g / n, t.data.shape))

    return _node(t.data.mean(axis=0), (t,), bw)


def concat_rows(ts):
    """Concatenate matrices along columns: row i of the result is the
    concatenation of row i of each input."""
    ts = [_lift(t) for t in ts]
    widths = [t.data.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            _acc(t, g[:, lo:hi])

    return _node(np.concatenate([t.data for t in ts], axis=1), ts, bw)


def stack_rows(ts):
    """Stack 1-D vectors into a matrix, one per row."""
    ts = [_lift(t) for t in ts]

    def bw(g):
        for i, t in enumerate(ts):
            _acc(t, g[i])

    return _node(np.stack([t.data for t in ts]), ts, bw)


def gather_rows(t, idx):
    """Select rows by index; repeated indices scatter-add in backward."""
    t = _lift(t)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        _acc(t, full)

    return _node(t.data[idx], (t,), bw)


def take_pairs(t, rows, cols):
    """Entries t[rows[i], cols[i]] as a vector."""
    t = _lift(t)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(t.data)
        np.add.at(full, (rows, cols), g)
        _acc(t, full)

    return _node(t.data[rows, cols], (t,), bw)


def weighted_neighbor_sum(h, src, dst, w, n_nodes):
    """Per-node sums of weighted incoming messages.

    out[i] = sum over edges e=(src_e, dst_e) with dst_e == i of w_e * h[src_e].
    """
    h, w = _lift(h), _lift(w)
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    out_data = np.zeros((n_nodes, h.data.shape[1]))
    np.add.at(out_data, dst, w.data[:, None] * h.data[src])

    def bw(g):
        gh = np.zeros_like(h.data)
        np.add.at(gh, src, w.data[:, None] * g[dst])
        _acc(h, gh)
        _acc(w, (h.data[src] * g[dst]).sum(axis=1))

    return _node(out_data, (h, w), bw)


# -- probability ------------------------------------------------------------


def log_softmax_rows(t):
    """Row-wise log-softmax; a 1-D input is treated as a single row."""
    t = _lift(t)
    x = t.data
    axis = x.ndim - 1
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bw(g):
        _acc(t, g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (t,), bw)


def softmax_rows(t):
    return exp(log_softmax_rows(t))


def cross_entropy(log_probs, target):
    """-sum(target * log_probs) over one distribution.

    Log-probabilities are clamped from below at log(1e-12) so a fully
    confident wrong prediction yields a large but finite loss; clamped
    entries receive zero gradient.
    """
    log_probs = _lift(log_probs)
    tgt = np.asarray(target, dtype=np.float64)
    if log_probs.data.shape != tgt.shape:
        raise ValueError("log_probs and target shapes differ")
    mask = log_probs.data > LOG_FLOOR
    clamped = np.maximum(log_probs.data, LOG_FLOOR)
    out_data = np.asarray(-(tgt * clamped).sum())

    def bw(g):
        _acc(log_probs, -g * tgt * mask)

    return _node(out_data, (log_probs,), bw)


# -- parameters and optimization --------------------------------------------


class Param:
    """A named trainable leaf.  Frozen params take part in forward passes
    but are skipped by both backward and the optimizer."""

    __slots__ = ("name", "tensor", "frozen")

    def __init__(self, name, data, frozen=False):
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=not frozen)
        self.frozen = frozen

    @property
    def value(self):
        return self.tensor.data

    @property
    def grad(self):
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad = False
        self.tensor.grad = None


class ParamSet:
    """An ordered collection of named Params."""

    def __init__(self):
        self._params = {}

    def add(self, name, data, frozen=False) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate param name {name!r}")
        p = Param(name, data, frozen=frozen)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensor(self, name) -> Tensor:
        return self._params[name].tensor

    def zero_grads(self):
        for p in self:
            if not p.frozen:
                p.grad[...] = 0.0

    def freeze_all(self):
        for p in self:
            p.freeze()

    @property
    def all_frozen(self) -> bool:
        return all(p.frozen for p in self)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params: ParamSet, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over every non-frozen param; grads are zeroed after."""
    state.t += 1
    t = state.t
    for p in params:
        if p.frozen:
            continue
        g = p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value[...] = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite(p.value)
    params.zero_grads()


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    """Xavier/Glorot uniform init: +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
