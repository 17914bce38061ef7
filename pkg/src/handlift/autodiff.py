"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive computes its value eagerly with numpy.  When a :class:`Tape`
is active and at least one input requires a gradient, the primitive appends
a node (output, inputs, vector-Jacobian closure) to the tape.  ``backward``
walks those nodes in exact reverse order and accumulates gradients
additively, so a tensor used twice receives the sum of both contributions.

Parameters live in a :class:`ParamStore`, which owns gradient buffers and
Adam moments.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .errors import NondeterministicLossError, NonFiniteError, ShapeError, TapeError

_state = threading.local()


def _active_tape():
    if getattr(_state, "no_grad", 0):
        return None
    return getattr(_state, "tape", None)


@contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    _state.no_grad = getattr(_state, "no_grad", 0) + 1
    try:
        yield
    finally:
        _state.no_grad -= 1


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    # numpy defers binary operators to us when we are the right operand
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take_index(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    __slots__ = ("grad",)

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ``backward`` may be called once per recording.
    """

    def __init__(self):
        self.nodes = []
        self._done = False
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, vjp):
        self.nodes.append((out, inputs, vjp))

    def reset(self):
        self.nodes = []
        self._done = False

    def backward(self, loss, store=None, seed=1.0):
        """Accumulate d(loss)/d(param) into every Parameter reached.

        Gradients are added to ``Parameter.grad``; parameters of ``store`` that
        the forward pass never touched keep their (zeroed) buffers.
        """
        if self._done:
            raise TapeError("backward already ran on this tape; call reset() first")
        loss = as_tensor(loss)
        if loss.size != 1:
            raise TapeError(f"backward seed must be a scalar, got shape {loss.shape}")
        if loss.requires_grad and not any(n[0] is loss for n in reversed(self.nodes)):
            raise TapeError("seed output was not produced through this tape")
        self._done = True
        grads = {id(loss): np.full(loss.shape, seed, dtype=np.float64)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # leaves: parameters
        seen = set()
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if isinstance(t, Parameter) and id(t) not in seen:
                    seen.add(id(t))
                    g = grads.get(id(t))
                    if g is not None:
                        t.grad += g
        if isinstance(loss, Parameter) and id(loss) not in seen:
            loss.grad += grads.get(id(loss), 0.0)
        return store


def _make(value, inputs, vjp):
    tape = _active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=req)
    if req:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"contract violation in {op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), vjp)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x):
    return mul(x, x)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Batched matrix product with numpy ``matmul`` semantics (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"contract violation in matmul: shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"contract violation in matmul: batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def vjp(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), vjp)
    if n != out.shape[-1]:  # pragma: no cover
        raise ShapeError("layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- structural

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"contract violation in concat: shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def gather(x, index, axis=0):
    """Index-select along ``axis``; ``index`` may be any integer array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim
    if index.size and (index.min() < -x.shape[ax] or index.max() >= x.shape[ax]):
        raise ShapeError(f"contract violation in gather: index out of range for axis of size {x.shape[ax]}")
    out = np.take(x.data, index, axis=ax)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gm = np.moveaxis(gx, ax, 0)
        gg = np.moveaxis(g, list(range(ax, ax + index.ndim)), list(range(index.ndim)))
        np.add.at(gm, index, gg)
        return (gx,)

    return _make(out, (x,), vjp)


def take_index(x, index):
    """Basic/advanced numpy indexing (``x[index]``) as a gather."""
    x = as_tensor(x)
    out = x.data[index]
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, dtype=np.float64), (x,), vjp)


def stop_gradient(x):
    return Tensor(as_tensor(x).data)


class _Replay:
    def __init__(self):
        self.values = []
        self.recording = True
        self.pos = 0


def detach(x):
    """Plain-array value of ``x``, cut from the graph.

    Inside :func:`replay_detached` the values produced by the first evaluation
    are handed back on later ones (in call order), so a finite-difference
    probe sees the function the tape actually differentiates: one in which
    detached quantities are constants.
    """
    value = x.data if isinstance(x, Tensor) else np.asarray(x)
    rec = getattr(_state, "replay", None)
    if rec is None:
        return value
    if rec.recording:
        rec.values.append(np.array(value, copy=True))
        return value
    if rec.pos >= len(rec.values) or rec.values[rec.pos].shape != value.shape:
        raise NondeterministicLossError("detached values differ in number or shape between evaluations")
    out = rec.values[rec.pos].copy()
    rec.pos += 1
    return out


@contextmanager
def replay_detached():
    """Record detached values on the first pass of ``run``, replay them afterwards.

    Yields a callable ``run(fn, *args)``.
    """
    prev = getattr(_state, "replay", None)
    rec = _Replay()

    def run(fn, *args):
        rec.pos = 0
        _state.replay = rec
        try:
            return fn(*args)
        finally:
            _state.replay = prev
            rec.recording = False

    yield run


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameters, their gradients and Adam moments."""

    def __init__(self):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name=name)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def num_values(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def grads(self):
        return {k: p.grad.copy() for k, p in self.params.items()}

    def values(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_values(self, values, strict=True):
        if strict and set(values) != set(self.params):
            missing = set(self.params) ^ set(values)
            raise KeyError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for k, v in values.items():
            if k in self.params:
                p = self.params[k]
                if p.data.shape != np.shape(v):
                    raise ShapeError(f"parameter {k!r}: stored shape {np.shape(v)} != {p.data.shape}")
                p.data[...] = v


class Adam:
    """Adam with bias correction; betas and eps follow the usual defaults."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, store: ParamStore, lr: float):
        for name, p in store.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError("gradient", name)
        store.step += 1
        t = store.step
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in store.params.items():
            g = p.grad
            m = store.m[name]
            v = store.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        store.zero_grad()
        return store


def optimizer_step(store, lr, opt=None):
    return (opt or Adam()).step(store, lr)


# ---------------------------------------------------------------- gradient check

def grad_check(loss_fn, store: ParamStore, step=1e-5, tolerance=1e-4, names=None,
               max_entries=None, rng=None, freeze_detached=True):
    """Compare tape gradients with central finite differences.

    ``loss_fn(store)`` must build a scalar Tensor from the store's parameters
    deterministically.  For each parameter the relative error is
    ``max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max|a|, 1e-12)`` over the
    checked entries (all of them, or ``max_entries`` picked as the largest
    analytic entries plus a random sample).

    With ``freeze_detached`` the values passed through :func:`detach` are
    those of the first (unperturbed) evaluation on every probe.

    Returns a dict with per-parameter errors and an overall pass flag.
    """
    if freeze_detached:
        with replay_detached() as run:
            return grad_check(lambda s: run(loss_fn, s), store, step, tolerance, names,
                              max_entries, rng, freeze_detached=False)
    names = list(store.params) if names is None else list(names)
    with no_grad():
        l1 = float(loss_fn(store).data)
        l2 = float(loss_fn(store).data)
    if not (l1 == l2 or (np.isnan(l1) and np.isnan(l2))):
        raise NondeterministicLossError(f"loss differs across calls: {l1!r} vs {l2!r}")

    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn(store)
    tape.backward(loss)
    analytic = store.grads()
    store.zero_grad()

    rng = np.random.default_rng(0) if rng is None else rng
    per_param = {}
    worst = 0.0
    for name in names:
        p = store.params[name]
        a = analytic[name].reshape(-1)
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            n_top = max_entries // 2
            top = np.argsort(-np.abs(a), kind="stable")[:n_top]
            rest = np.setdiff1d(np.arange(flat.size), top)
            idx = np.concatenate([top, rng.choice(rest, max_entries - n_top, replace=False)])
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            with no_grad():
                flat[i] = old + step
                lp = float(loss_fn(store).data)
                flat[i] = old - step
                lm = float(loss_fn(store).data)
            flat[i] = old
            num[j] = (lp - lm) / (2.0 * step)
        ai = a[idx]
        scale = max(np.abs(a).max() * 1e-3 if a.size else 0.0, 1e-12)
        denom = np.maximum(np.maximum(np.abs(ai), np.abs(num)), scale)
        err = float(np.max(np.abs(ai - num) / denom)) if idx.size else 0.0
        if np.all(ai == 0) and np.all(num == 0):
            err = 0.0
        per_param[name] = {"max_rel_err": err, "checked": int(idx.size),
                           "max_abs_grad": float(np.abs(a).max()) if a.size else 0.0}
        worst = max(worst, err)
    return {"loss": l1, "per_param": per_param, "max_rel_err": worst,
            "tolerance": tolerance, "passed": bool(worst < tolerance), "analytic": analytic}
