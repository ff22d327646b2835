"""Dense tensors with reverse-mode differentiation.

Only the primitives the transformer needs are provided. Every op takes
``Tensor`` or array-like inputs and returns a ``Tensor``; an output records
its parents only when at least one input requires a gradient, so constant
computations (frozen embeddings, evaluation passes) build no graph at all.

Gradients are obtained with :func:`grad`, which topologically orders the
nodes reachable from a scalar loss into a :class:`Graph` and walks it in
reverse exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation is violated."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op}, shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
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
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward, "mul")


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * a.data * g,)

    return _node(a.data * a.data, (a,), backward, "square")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.data.sum()), (a,), backward, "sum")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(a.data, -1, -2), (a,), backward, "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(data, ts, backward, "concat")


def take(a, key) -> Tensor:
    """Numpy indexing with a scatter-add backward."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _node(a.data[key], (a,), backward, "take")


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no generator is given."""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax_rows(m, scale: float = 1.0, causal: bool = False) -> Tensor:
    """Row softmax of ``m / scale`` along the last axis.

    With ``causal=True`` the last two axes are treated as (query, key) and
    query ``i`` may only see keys ``j <= i + (n_keys - n_queries)``. The
    offset lets a block holding only the trailing queries reuse the mask a
    full square score matrix would get.
    """
    if scale <= 0:
        raise ContractError(f"softmax_rows: scale must be positive, got {scale}")
    m = as_tensor(m)
    z = m.data / scale
    if causal:
        nq, nk = z.shape[-2], z.shape[-1]
        if nq > nk:
            raise ContractError(f"softmax_rows: causal mask needs n_queries <= n_keys, got {nq} > {nk}")
        mask = np.arange(nk)[None, :] > (np.arange(nq)[:, None] + (nk - nq))
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / scale,)

    return _node(p, (m,), backward, "softmax_rows")


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with ``Phi`` the standard normal CDF (erf form)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _node(x.data * cdf, (x,), backward, "gelu")


def layer_norm(x, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance.

    Gain and bias are fixed at 1 and 0 and are not parameters.
    """
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] < 2:
        raise ContractError(f"layer_norm: last dimension must be >= 2, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (x,), backward, "layer_norm")


def cross_entropy(logits, target) -> Tensor:
    """Negative log softmax probability of ``target``.

    ``logits`` of shape (T,) takes an integer target; shape (m, T) takes m
    targets and returns the mean loss.
    """
    logits = as_tensor(logits)
    tgt = np.asarray(target)
    n_classes = logits.shape[-1]
    if np.any(tgt < 0) or np.any(tgt >= n_classes):
        raise IndexError(f"cross_entropy: target outside [0, {n_classes})")
    z = logits.data.reshape(-1, n_classes)
    t = tgt.reshape(-1).astype(np.int64)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: {t.shape[0]} targets for logits of shape {logits.shape}")
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = np.asarray((lse - z[rows, t]).mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((g / z.shape[0]) * p.reshape(logits.shape),)

    return _node(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse-mode driver


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor]
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self) -> None:
        out = self.nodes[-1]
        self.grads = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = self.grads.pop(id(node), None) if node.parents else self.grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for p, gp in zip(node.parents, node.backward_fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in self.grads:
                    self.grads[key] = self.grads[key] + gp
                else:
                    self.grads[key] = gp

    def grad_of(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``leaves``.

    Leaves with no path to the loss get zeros.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"grad: loss must be scalar, got shape {loss.shape}")
    leaves = list(leaves)
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in leaves]
    graph = Graph.from_output(loss)
    graph.backward()
    return [graph.grad_of(t) for t in leaves]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_error(a, b) -> float:
    """``max|a - b|`` scaled by the larger of the two max-magnitudes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)
