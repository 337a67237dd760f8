"""Reverse-mode automatic differentiation over dense float64 tensors.

The whole workbench runs on this substrate: a `Tensor` wraps a numpy
float64 array, and every primitive below records a closure that knows how
to push gradients back to its inputs. `backward` walks the tape in reverse
topological order.

Gradient semantics: calling `backward` twice without `zero_grad`
ACCUMULATES gradients (sums into `.grad`). Callers that want fresh
gradients must call `zero_grad` on their parameters first; the trainers in
this package do so every step.

Everything is float64 and single-threaded per graph, so identical inputs
produce bit-identical outputs and gradients.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        yield a, _unbroadcast(g, a.data.shape)
        yield b, _unbroadcast(g, b.data.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        yield a, _unbroadcast(g, a.data.shape)
        yield b, _unbroadcast(-g, b.data.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        yield a, _unbroadcast(g * b.data, a.data.shape)
        yield b, _unbroadcast(g * a.data, b.data.shape)

    return _result(a.data * b.data, (a, b), backward)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient flows to the constant)."""
    c = float(c)

    def backward(g):
        yield a, g * c

    return _result(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")

    def backward(g):
        yield a, g @ b.data.T
        yield b, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.data.shape}")

    def backward(g):
        yield a, g.T

    return _result(a.data.T, (a,), backward)


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"col_slice: [{start}:{stop}] invalid for shape {a.data.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        yield a, full

    return _result(a.data[:, start:stop].copy(), (a,), backward)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: expected a nonempty list of 2-D tensors")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError(
            f"concat_cols: row counts differ: {[p.data.shape for p in parts]}"
        )
    widths = [p.data.shape[1] for p in parts]

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            yield p, g[:, off:off + w]
            off += w

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range for table with {table.data.shape[0]} rows"
        )

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        yield table, full

    return _result(table.data[ids], (table,), backward)


# gathering rows of an activation matrix is the same op as an embedding lookup
gather_rows = embedding


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        yield a, np.full_like(a.data, float(g))

    return _result(a.data.sum(), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def backward(g):
            yield a, np.full_like(a.data, float(g) / n)

        return _result(a.data.mean(), (a,), backward)

    n = a.data.shape[axis]

    def backward_axis(g):
        yield a, np.repeat(np.expand_dims(g / n, axis), n, axis=axis)

    return _result(a.data.mean(axis=axis), (a,), backward_axis)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        yield a, s * (g - dot)

    return _result(s, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit variance, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        yield gain, (g * xhat).reshape(-1, d).sum(axis=0)
        yield bias, g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        yield x, inv * (dxhat - m1 - xhat * m2)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        yield a, g * (phi + a.data * pdf)

    return _result(a.data * phi, (a,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer targets under softmax(logits). logits: N x K."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} does not match logits rows {n}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ShapeError(f"cross_entropy: target out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), targets]).mean()

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        yield logits, p * (float(g) / n)

    return _result(loss, (logits,), backward)


def sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention, composed from the primitives above."""
    dh = q.data.shape[-1]
    scores = smul(matmul(q, transpose(k)), 1.0 / math.sqrt(dh))
    return matmul(softmax(scores), v)


def primitive_set():
    """Catalogue of the differentiable primitives."""
    return {
        "add": add,
        "sub": sub,
        "mul": mul,
        "smul": smul,
        "matmul": matmul,
        "transpose": transpose,
        "col_slice": col_slice,
        "concat_cols": concat_cols,
        "embedding": embedding,
        "sum": sum_all,
        "mean": mean,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "cross_entropy": cross_entropy,
        "sdpa": sdpa,
    }


def grad_check(fn, params, eps: float = 1e-5, samples_per_tensor: int = 50, seed: int = 0):
    """Compare analytic gradients of `fn()` against central finite differences.

    `fn` is a zero-argument callable returning a scalar Tensor built from the
    tensors in `params`. Returns the max relative error over sampled
    coordinates (at least `samples_per_tensor` per tensor, all if fewer):
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError("grad_check: parameters must be finite")
        p.zero_grad()

    loss = fn()
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: forward value is not finite")
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_tensor, replace=False)
        analytic = np.zeros(n) if p.grad is None else p.grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def backward(loss: Tensor):
    """Populate `.grad` on every reachable requires_grad tensor.

    Gradients accumulate into existing `.grad` values; see module docstring.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    upstream = {id(loss): np.ones(())}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            _accumulate(node, g)
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not (parent.requires_grad or parent._parents):
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg
