"""Minimal reverse-mode automatic differentiation over float64 arrays.

A ``Node`` wraps an ndarray value plus the recipe for pushing a gradient
back to its parents.  Graphs are built afresh for every loss evaluation;
``backward`` walks the graph once in reverse topological order and
accumulates gradients additively across fan-out.  Only the handful of
operations the denoising network needs are provided; network-specific
primitives (spectral convolution, channel mixing) build their own Nodes on
top of this module.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

GELU_CUBIC = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording; ops return leaf Nodes holding values only.

    Useful for sampling loops, where keeping the whole graph alive would
    hold every intermediate array in memory for no reason.
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def recording() -> bool:
    return _grad_enabled


def make_node(value, parents, vjp) -> Node:
    """Node constructor honoring :func:`no_grad`."""
    if _grad_enabled:
        return Node(value, parents, vjp)
    return Node(value)


class Node:
    """One value in the computation graph.

    Leaves default to requiring gradients (parameters); wrap inputs with
    :func:`constant` to keep backward from propagating into them.
    """

    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp  # grad -> tuple of parent gradients (same order)
        if parents:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)
    return make_node(a.value + b.value, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)
    return make_node(a.value - b.value, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))
    return make_node(a.value * b.value, (a, b), vjp)


def scale(a: Node, c: float) -> Node:
    return make_node(a.value * c, (a,), lambda g: (g * c,))


def square(a: Node) -> Node:
    return make_node(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def mean(a: Node) -> Node:
    inv = 1.0 / a.value.size
    return make_node(a.value.mean(), (a,), lambda g: (np.full_like(a.value, g * inv),))


def total_sum(a: Node) -> Node:
    return make_node(a.value.sum(), (a,), lambda g: (np.full_like(a.value, g),))


def gelu(a: Node) -> Node:
    """GELU with the tanh approximation (cubic constant 0.044715)."""
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_SCALE * (x + GELU_CUBIC * x2 * x))
    half_one_plus_t = 0.5 * (1.0 + t)
    if _grad_enabled:
        cubic = (0.5 * _GELU_SCALE) * (x + (3.0 * GELU_CUBIC) * x2 * x)

        def vjp(g):
            return (g * (half_one_plus_t + cubic * (1.0 - t * t)),)

        return Node(x * half_one_plus_t, (a,), vjp)
    return Node(x * half_one_plus_t)


def mean_squared_error(pred: Node, target: np.ndarray) -> Node:
    """Mean over all entries of (pred - target)²; target is not differentiated."""
    diff = pred.value - np.asarray(target, dtype=np.float64)
    inv = 2.0 / diff.size
    return make_node((diff**2).mean(), (pred,), lambda g: (g * inv * diff,))


def weighted_squared_error(pred: Node, target: np.ndarray, weights: np.ndarray) -> Node:
    """Scalar sum of weights * (pred - target)²; only pred is differentiated.

    Folding reduction weights into one op keeps multi-term losses a single
    pass over the arrays.
    """
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    diff = pred.value - target
    value = (diff * diff * weights).sum()
    return make_node(value, (pred,), lambda g: (g * 2.0 * weights * diff,))


def backward(loss: Node) -> None:
    """Fill ``grad`` on every gradient-requiring node reachable from
    ``loss``.

    ``loss`` must be scalar; its gradient is seeded with 1.  Gradients
    accumulate lazily (first contribution is kept, later ones added), and
    subgraphs of constants are never visited.  A vjp may return None for a
    parent slot it chose not to compute.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
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

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)

    for node in reversed(order):
        if node.vjp is None or not node.parents or node.grad is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(node.grad)):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
