"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors are thin wrappers around numpy arrays. Every primitive records a
node on the output tensor; ``backward`` collects the nodes reachable from a
scalar loss and replays them in reverse execution order. Leaf tensors with
``requires_grad`` own a gradient buffer that backward accumulates into.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "out_id")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable, out_id: int):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.out_id = out_id

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense real array with an optional gradient buffer.

    Only leaves (tensors not produced by a recorded op) keep a persistent
    ``grad``; intermediate gradients live for the duration of one backward.
    """

    __slots__ = ("values", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._node = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._node = Node(op, parents, backward_fn, id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph replay


@dataclass
class ComputeGraph:
    """Operations reachable from ``root``, in execution order."""

    root: Tensor
    ops: list[Node] = field(default_factory=list)
    _tensors: dict[int, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        seen: set[int] = set()
        stack = [self.root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            self.ops.append(node)
            self._tensors[id(t)] = t
            stack.extend(node.parents)
        self.ops.sort(key=lambda n: n.seq)

    def replay_backward(self, seed: np.ndarray, visit: Callable[[Node], None] | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.ops):
            g = grads.pop(node.out_id, None)
            if visit is not None:
                visit(node)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad += 1.0
        return
    ComputeGraph(loss).replay_backward(np.ones_like(loss.values))


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    """Elementwise add with numpy broadcasting (covers bias add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values - b.values
    sa, sb = a.shape, b.shape
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    av, bv = a.values, b.values
    return _make(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)
    return _make(a.values * c, "scale", (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, "gelu", (x,), bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return _make(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.values)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.values * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims of ``a`` broadcast against a 2-D ``b``,
    or both operands share identical leading (batch) dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    if b.ndim == 2:
        def bw(g):
            ga = g @ bv.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def bw(g):
            ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _make(out, "matmul", (a, b), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.values.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.values, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def slice_(x: Tensor, index) -> Tensor:
    """Basic (view) indexing, e.g. ``x[:, 0, :]``."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] += g
        return (full,)

    return _make(x.values[index], "slice", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    out = np.concatenate([t.values for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tuple(xs), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(weight.values[ids], "embedding", (weight,), bw)


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then affine with gamma/beta."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values
    d = v.shape[-1]

    def bw(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.values
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(out, "layer_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses


def _weights(mask, n: int) -> tuple[np.ndarray, float]:
    if mask is None:
        return np.ones(n, dtype=DTYPE), float(n)
    w = np.asarray(mask, dtype=DTYPE).reshape(-1)
    if w.shape[0] != n:
        raise ShapeError(f"mask length {w.shape[0]} != rows {n}")
    total = float(w.sum())
    if total <= 0:
        raise ValueError("mask selects no positions")
    return w, total


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy over (unmasked) rows of ``logits`` [n x c]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    w, total = _weights(mask, n)
    active = w > 0
    if np.any((labels[active] < 0) | (labels[active] >= c)):
        raise ValueError(f"cross_entropy: label outside [0, {c})")
    safe = np.where(active, labels, 0).astype(np.int64)
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), safe]
    loss = float((nll * w).sum() / total)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), safe] -= 1.0
        return (p * (w[:, None] * (float(g) / total)),)

    return _make(np.array(loss), "cross_entropy", (logits,), bw)


softmax_xent = cross_entropy


def binary_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean BCE on sigmoid(logits), computed from logits for stability."""
    x = logits.values
    y = np.asarray(targets, dtype=DTYPE).reshape(x.shape)
    if mask is None:
        w, total = np.ones_like(x), float(x.size)
    else:
        w = np.asarray(mask, dtype=DTYPE).reshape(x.shape)
        total = float(w.sum())
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = float((per * w).sum() / total)

    def bw(g):
        return ((_stable_sigmoid(x) - y) * w * (float(g) / total),)

    return _make(np.array(loss), "binary_cross_entropy", (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    y = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    diff = pred.values - y
    n = diff.size
    return _make(np.array(float((diff * diff).sum() / n)), "mse", (pred,),
                 lambda g: (diff * (2.0 * float(g) / n),))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple[int, ...]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central
    differences, coordinate by coordinate."""
    if not x.requires_grad:
        raise ValueError("grad_check needs x.requires_grad=True")
    x.zero_grad()
    backward(f(x))
    analytic = x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = abs_err / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradCheckReport(float(rel.max(initial=0.0)), float(abs_err.max(initial=0.0)),
                           tuple(int(i) for i in worst), tol)
