"""Reverse-mode automatic differentiation over dense float64 arrays.

A tape is built implicitly: every operation returns a `Node` holding its
value, references to its parent nodes, and a backward closure that maps the
incoming gradient to per-parent gradients. `gradients` walks the graph once
in reverse topological order, accumulating additively over fan-out.

The op set is deliberately small: exactly what heteroscedastic MLP heads,
Gaussian CDFs, softmax-based sorting relaxations and input-gradient
computation require. Everything runs in 64-bit floats; any op producing a
NaN/Inf raises instead of propagating it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, ndtr

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """A value on the tape plus the recipe for back-propagating through it."""

    __slots__ = ("value", "parents", "requires_grad", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all route through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(value):
    """Wrap an array as a tape leaf that never receives a gradient."""
    return value if isinstance(value, Node) else Node(value)


def param(value):
    """Wrap an array as a trainable tape leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def as_node(value):
    return value if isinstance(value, Node) else Node(value)


def _result(name, value, parents, backward):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name}: non-finite values in result")
    return Node(value, parents=parents, backward=backward)


def _unbroadcast(grad, shape):
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(name, a, b, fwd, bwd_a, bwd_b):
    a, b = as_node(a), as_node(b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ValueError(
            f"{name}: incompatible shapes {a.shape} and {b.shape}"
        ) from exc

    def backward(g):
        return (
            _unbroadcast(bwd_a(g, a.value, b.value), a.value.shape),
            _unbroadcast(bwd_b(g, a.value, b.value), b.value.shape),
        )

    return _result(name, value, (a, b), backward)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def subtract(a, b):
    return _binary(
        "subtract", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g
    )


def multiply(a, b):
    return _binary(
        "multiply", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def divide(a, b):
    b_node = as_node(b)
    if np.any(b_node.value == 0.0):
        raise ValueError("divide: zero in denominator (clamp before dividing)")
    return _binary(
        "divide",
        a,
        b_node,
        np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def negate(a):
    a = as_node(a)
    return _result("negate", -a.value, (a,), lambda g: (-g,))


def absolute(a):
    a = as_node(a)
    return _result(
        "absolute", np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),)
    )


def exp(a):
    a = as_node(a)
    value = np.exp(a.value)
    return _result("exp", value, (a,), lambda g: (g * value,))


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise ValueError("log: nonpositive argument (clamp before taking log)")
    return _result("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = as_node(a)
    value = np.tanh(a.value)
    return _result("tanh", value, (a,), lambda g: (g * (1.0 - value * value),))


def relu(a):
    a = as_node(a)
    return _result(
        "relu", np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0.0),)
    )


def softplus(a):
    """log(1 + exp(x)), computed stably; gradient is the logistic sigmoid."""
    a = as_node(a)
    value = np.logaddexp(0.0, a.value)
    return _result("softplus", value, (a,), lambda g: (g * expit(a.value),))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient passes through where the input was in range."""
    a = as_node(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _result(
        "clip", np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,)
    )


def softmax(a, axis=-1):
    """Row-wise softmax along `axis` (max-shifted for stability)."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - inner),)

    return _result("softmax", value, (a,), backward)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (g @ b.value.T, a.value.T @ g)

    return _result("matmul", a.value @ b.value, (a, b), backward)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return _result("sum", value, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_node(a)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.value.shape).copy(),)

    return _result("mean", value, (a,), backward)


def pairwise_abs_diff(a):
    """|s_i - s_j| matrix of a 1-d vector; sign(0) = 0 keeps ties smooth."""
    a = as_node(a)
    if a.value.ndim != 1:
        raise ValueError(f"pairwise_abs_diff: expected 1-d input, got {a.shape}")
    diff = a.value[:, None] - a.value[None, :]
    sgn = np.sign(diff)

    def backward(g):
        gs = g * sgn
        return (gs.sum(axis=1) - gs.sum(axis=0),)

    return _result("pairwise_abs_diff", np.abs(diff), (a,), backward)


def std_normal_cdf(a):
    """Standard normal CDF; backward uses the exact density, not a
    derivative of the CDF approximation."""
    a = as_node(a)
    value = ndtr(a.value)

    def backward(g):
        return (g * INV_SQRT_2PI * np.exp(-0.5 * a.value * a.value),)

    return _result("std_normal_cdf", value, (a,), backward)


def take(a, idx):
    """Indexing/slicing; the backward scatters the gradient back in place."""
    a = as_node(a)
    value = a.value[idx]

    def backward(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, idx, g)
        return (buf,)

    return _result("take", value, (a,), backward)


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("concat: need at least one input")
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(
        "concat", np.concatenate([n.value for n in nodes], axis=axis), nodes, backward
    )


def reshape(a, shape):
    a = as_node(a)
    return _result(
        "reshape",
        a.value.reshape(shape),
        (a,),
        lambda g: (g.reshape(a.value.shape),),
    )


def dropout(a, mask, rate):
    """Multiply by a caller-supplied 0/1 mask with inverted scaling 1/(1-rate).

    The mask is sampled outside the tape (from a seeded RNG) so forward
    passes are replayable.
    """
    a = as_node(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.value.shape:
        raise ValueError(
            f"dropout: mask shape {mask.shape} does not match input {a.shape}"
        )
    scaled = mask / (1.0 - rate)
    return _result("dropout", a.value * scaled, (a,), lambda g: (g * scaled,))


def _topo_order(output):
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(output, wrt):
    """d(output)/d(node) for each node in `wrt`.

    Requires a scalar output. Fan-out accumulates additively; inputs the
    output does not depend on get a zero gradient.
    """
    if output.value.size != 1:
        raise ValueError(f"gradients: output must be scalar, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise ValueError("gradients: every wrt node must have requires_grad set")
    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between the tape gradient of f and central
    finite differences: max |autodiff - central| / (|central| + 1e-8)."""
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    leaf = Node(x.copy(), requires_grad=True)
    out = f(leaf)
    if out.value.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    (auto,) = gradients(out, [leaf])
    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    for i in range(x.size):
        bumped = x.reshape(-1).copy()
        bumped[i] += h
        hi = float(f(Node(bumped.reshape(x.shape))).value)
        bumped[i] -= 2 * h
        lo = float(f(Node(bumped.reshape(x.shape))).value)
        flat[i] = (hi - lo) / (2.0 * h)
    rel = np.abs(auto - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())
