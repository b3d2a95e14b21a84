"""Minimal reverse-mode automatic differentiation over float64 arrays.

A fresh computation graph is built per example: ops on a :class:`Tape`
return :class:`Node` objects carrying a value, parents, and a backward
closure; :func:`backward` runs the closures in reverse topological order.
:class:`NoGrad` exposes the same op surface but returns bare arrays, so
forward-only code paths (search, mining) share one implementation with
the differentiated paths and produce bit-identical values.

All values are float64; scalars are 0-d arrays.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def softmax(x):
    """Numerically stable softmax along the last axis."""
    x = _f64(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x):
    x = _f64(x)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x):
    # clip keeps exp finite; f64 sigmoid is already saturated past +-40
    z = np.clip(_f64(x), -708.0, 708.0)
    return 1.0 / (1.0 + np.exp(-z))


def merged_logit(p_gen, o_gen, o_copy):
    """Gate-weighted logit interpolation ``p_gen*o_gen + (1-p_gen)*o_copy``.

    Computed anchored at ``o_gen`` and clamped so the result always lies in
    the closed interval between the two logits, which plain floating-point
    interpolation does not guarantee.
    """
    v = o_gen + (1.0 - p_gen) * (o_copy - o_gen)
    return np.clip(v, np.minimum(o_gen, o_copy), np.maximum(o_gen, o_copy))


class Node:
    """One graph vertex: a value, its parents, and a backward closure."""

    __slots__ = ("value", "parents", "bwd", "grad")

    def __init__(self, value, parents=(), bwd=None):
        self.value = value
        self.parents = parents
        self.bwd = bwd
        self.grad = None


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _acc(node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def backward(loss):
    """Accumulate gradients of a scalar ``loss`` into ``node.grad``."""
    if np.shape(loss.value) != ():
        raise ValueError("backward expects a scalar loss")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


class NoGrad:
    """Forward-only twin of :class:`Tape`: same ops, bare float64 arrays."""

    def __init__(self, store=None):
        self.store = store

    def param(self, name):
        return self.store[name]

    def const(self, x):
        return _f64(x)

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def mul(self, a, b):
        return a * b

    def scale(self, a, c):
        return a * c

    def matmul(self, a, b):
        return a @ b

    def concat(self, parts):
        return np.concatenate([np.atleast_1d(p) for p in parts])

    def stack(self, rows):
        return np.stack(rows)

    def lookup(self, m, i):
        return m[i]

    def slice1d(self, v, start, stop):
        return v[start:stop]

    def gather(self, v, idx):
        return v[list(idx)]

    def pick(self, v, i):
        return _f64(v[i])

    def tanh(self, x):
        return np.tanh(x)

    def sigmoid(self, x):
        return sigmoid(x)

    def exp(self, x):
        return np.exp(x)

    def log(self, x):
        return np.log(x)

    def softmax(self, x):
        return softmax(x)

    def log_softmax(self, x):
        return log_softmax(x)

    def sum(self, x):
        return _f64(np.sum(x))

    def mean(self, x):
        return _f64(np.mean(x))

    def dot(self, a, b):
        return _f64(a @ b)

    def clip_min(self, x, c):
        return np.maximum(x, c)

    def add_n(self, parts):
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    def merged_logits(self, o_gen, o_copy, p_copy, mask):
        merged = merged_logit(1.0 - p_copy, o_gen, o_copy)
        return np.where(mask, merged, o_gen)


class Tape(NoGrad):
    """Graph-building op surface.  Parameter nodes are cached per tape so
    gradients from every use of a parameter accumulate in one node."""

    def __init__(self, store):
        super().__init__(store)
        self._params = {}

    def param(self, name):
        node = self._params.get(name)
        if node is None:
            node = Node(self.store[name])
            self._params[name] = node
        return node

    def const(self, x):
        return Node(_f64(x))

    def grads(self):
        """Per-parameter gradients after :func:`backward`; zeros where a
        parameter never entered the graph."""
        out = {}
        for name, arr in self.store.items():
            node = self._params.get(name)
            if node is None or node.grad is None:
                out[name] = np.zeros_like(arr)
            else:
                out[name] = node.grad
        return out

    def add(self, a, b):
        out = Node(a.value + b.value, (a, b))

        def bwd(g):
            _acc(a, _unbroadcast(g, a.value.shape))
            _acc(b, _unbroadcast(g, b.value.shape))

        out.bwd = bwd
        return out

    def sub(self, a, b):
        out = Node(a.value - b.value, (a, b))

        def bwd(g):
            _acc(a, _unbroadcast(g, a.value.shape))
            _acc(b, _unbroadcast(-g, b.value.shape))

        out.bwd = bwd
        return out

    def mul(self, a, b):
        out = Node(a.value * b.value, (a, b))

        def bwd(g):
            _acc(a, _unbroadcast(g * b.value, a.value.shape))
            _acc(b, _unbroadcast(g * a.value, b.value.shape))

        out.bwd = bwd
        return out

    def scale(self, a, c):
        out = Node(a.value * c, (a,))
        out.bwd = lambda g: _acc(a, g * c)
        return out

    def matmul(self, a, b):
        av, bv = a.value, b.value
        out = Node(av @ bv, (a, b))

        def bwd(g):
            if av.ndim == 2 and bv.ndim == 1:
                _acc(a, np.outer(g, bv))
                _acc(b, av.T @ g)
            elif av.ndim == 1 and bv.ndim == 2:
                _acc(a, bv @ g)
                _acc(b, np.outer(av, g))
            else:
                _acc(a, g @ bv.T)
                _acc(b, av.T @ g)

        out.bwd = bwd
        return out

    def concat(self, parts):
        vals = [np.atleast_1d(p.value) for p in parts]
        out = Node(np.concatenate(vals), tuple(parts))
        sizes = [v.shape[0] for v in vals]

        def bwd(g):
            off = 0
            for p, n in zip(parts, sizes):
                piece = g[off : off + n]
                _acc(p, piece.reshape(p.value.shape))
                off += n

        out.bwd = bwd
        return out

    def stack(self, rows):
        out = Node(np.stack([r.value for r in rows]), tuple(rows))

        def bwd(g):
            for i, r in enumerate(rows):
                _acc(r, g[i])

        out.bwd = bwd
        return out

    def lookup(self, m, i):
        out = Node(m.value[i], (m,))

        def bwd(g):
            gm = np.zeros_like(m.value)
            gm[i] = g
            _acc(m, gm)

        out.bwd = bwd
        return out

    def slice1d(self, v, start, stop):
        out = Node(v.value[start:stop], (v,))

        def bwd(g):
            gv = np.zeros_like(v.value)
            gv[start:stop] = g
            _acc(v, gv)

        out.bwd = bwd
        return out

    def gather(self, v, idx):
        idx = list(idx)
        out = Node(v.value[idx], (v,))

        def bwd(g):
            gv = np.zeros_like(v.value)
            np.add.at(gv, idx, g)
            _acc(v, gv)

        out.bwd = bwd
        return out

    def pick(self, v, i):
        out = Node(_f64(v.value[i]), (v,))

        def bwd(g):
            gv = np.zeros_like(v.value)
            gv[i] = g
            _acc(v, gv)

        out.bwd = bwd
        return out

    def tanh(self, x):
        y = np.tanh(x.value)
        out = Node(y, (x,))
        out.bwd = lambda g: _acc(x, g * (1.0 - y * y))
        return out

    def sigmoid(self, x):
        y = sigmoid(x.value)
        out = Node(y, (x,))
        out.bwd = lambda g: _acc(x, g * y * (1.0 - y))
        return out

    def exp(self, x):
        y = np.exp(x.value)
        out = Node(y, (x,))
        out.bwd = lambda g: _acc(x, g * y)
        return out

    def log(self, x):
        out = Node(np.log(x.value), (x,))
        out.bwd = lambda g: _acc(x, g / x.value)
        return out

    def softmax(self, x):
        y = softmax(x.value)
        out = Node(y, (x,))

        def bwd(g):
            _acc(x, y * (g - np.sum(g * y, axis=-1, keepdims=True)))

        out.bwd = bwd
        return out

    def log_softmax(self, x):
        y = log_softmax(x.value)
        out = Node(y, (x,))
        sm = np.exp(y)

        def bwd(g):
            _acc(x, g - sm * np.sum(g, axis=-1, keepdims=True))

        out.bwd = bwd
        return out

    def sum(self, x):
        out = Node(_f64(np.sum(x.value)), (x,))
        out.bwd = lambda g: _acc(x, np.broadcast_to(g, x.value.shape))
        return out

    def mean(self, x):
        n = x.value.size
        out = Node(_f64(np.mean(x.value)), (x,))
        out.bwd = lambda g: _acc(x, np.broadcast_to(g / n, x.value.shape))
        return out

    def dot(self, a, b):
        out = Node(_f64(a.value @ b.value), (a, b))

        def bwd(g):
            _acc(a, g * b.value)
            _acc(b, g * a.value)

        out.bwd = bwd
        return out

    def clip_min(self, x, c):
        mask = x.value > c
        out = Node(np.maximum(x.value, c), (x,))
        out.bwd = lambda g: _acc(x, g * mask)
        return out

    def add_n(self, parts):
        total = parts[0].value
        for p in parts[1:]:
            total = total + p.value
        out = Node(total, tuple(parts))

        def bwd(g):
            for p in parts:
                _acc(p, g)

        out.bwd = bwd
        return out

    def merged_logits(self, o_gen, o_copy, p_copy, mask):
        """Per-token gate interpolation with a bypass mask.

        Where ``mask`` is true the value is the clamped interpolation of
        the generation and copy logits under the copy gate; elsewhere it
        is the generation logit untouched.  The backward pass uses the
        unclamped partials (the clamp only trims float rounding at the
        interval endpoints).
        """
        og, oc, pc = o_gen.value, o_copy.value, p_copy.value
        merged = merged_logit(1.0 - pc, og, oc)
        out = Node(np.where(mask, merged, og), (o_gen, o_copy, p_copy))

        def bwd(g):
            _acc(o_gen, g * np.where(mask, 1.0 - pc, 1.0))
            _acc(o_copy, g * mask * pc)
            _acc(p_copy, np.sum(g * mask * (oc - og)))

        out.bwd = bwd
        return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # only scalar <-> array broadcasting is used
    if shape == ():
        return _f64(np.sum(g))
    return np.broadcast_to(g, shape)


# --- parameters -------------------------------------------------------------


def _name_seed(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class ParamStore:
    """Ordered, named float64 parameter tensors.

    Each tensor is initialized uniform(-scale, scale) from a generator
    seeded by (store seed, parameter name), so initialization is stable
    under unrelated parameters being added or reordered.
    """

    def __init__(self, seed=0):
        self.seed = seed
        self._params = {}

    def add(self, name, shape, scale=0.1):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _name_seed(name)]))
        arr = rng.uniform(-scale, scale, size=shape).astype(np.float64)
        self._params[name] = arr
        return arr

    def set_(self, name, arr):
        arr = _f64(arr)
        if name in self._params and self._params[name].shape != arr.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {self._params[name].shape} vs {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in parameter {name!r}")
        self._params[name] = arr.copy()

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def copy(self):
        out = ParamStore(self.seed)
        for name, arr in self._params.items():
            out._params[name] = arr.copy()
        return out

    def load_state(self, state):
        """Replace all tensors from ``state``; names and shapes must match."""
        mine, theirs = set(self._params), set(state)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ValueError(f"parameter name mismatch: missing={missing} unexpected={extra}")
        bad = [n for n in self._params if self._params[n].shape != state[n].shape]
        if bad:
            detail = ", ".join(f"{n}: {self._params[n].shape} vs {state[n].shape}" for n in sorted(bad))
            raise ValueError(f"parameter shape mismatch: {detail}")
        for name in self._params:
            self.set_(name, state[name])


# --- optimization -----------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store, grads, state, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in parameter order, in place."""
    state.t += 1
    t = state.t
    for name, _ in store.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        store._params[name] = store[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        grads = {name: g * factor for name, g in grads.items()}
    return grads, total


def finite_difference_grad(f, store, name, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. one parameter."""
    base = store[name]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f()
        flat[i] = keep - h
        lo = f()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
