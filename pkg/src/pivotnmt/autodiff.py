"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Node wraps one computed ndarray together with references to the nodes it
was computed from; ``backward`` walks the graph once in reverse topological
order and accumulates vector-Jacobian products additively. The op set is
exactly what the sequence models here need: matmul, add, elementwise mul,
tanh, sigmoid, softmax over the last axis, concat, embedding lookup (row
gather), axis slicing, full sum, log, negation, Euclidean norm, and fused
cross-entropy against an index.

Every op output is validated: NaN/Inf raises ``NonFiniteError`` naming the
op that produced it, and shape mismatches raise ``ShapeError`` naming both
shapes. Reduction order is fixed (numpy kernels plus left-to-right
accumulation in a deterministic traversal), so two backward passes over the
same graph produce bitwise-identical gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Node",
    "leaf",
    "const",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "softmax",
    "concat",
    "embedding",
    "slice_axis",
    "sum_all",
    "log",
    "negate",
    "euclidean_norm",
    "cross_entropy",
    "backward",
    "gradient_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """A tensor or op output contains NaN or Inf."""


def _validated(kind: str, values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"op '{kind}' produced a non-finite value")
    return arr


class Tensor:
    """Immutable dense float64 array; construction rejects non-finite values."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains a non-finite value")
        arr.flags.writeable = False
        self.values = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.values.shape})"


class Node:
    """One vertex of the computation graph: an op kind, inputs, cached value."""

    __slots__ = ("kind", "inputs", "value", "grad", "requires_grad", "extra")

    def __init__(self, kind, inputs, value, requires_grad, extra=None):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.extra = extra

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node({self.kind}, shape={self.value.shape})"


def _make(kind: str, inputs: tuple, value, extra=None) -> Node:
    value = _validated(kind, value)
    rg = any(n.requires_grad for n in inputs)
    return Node(kind, inputs, value, rg, extra)


def leaf(values, requires_grad: bool = True) -> Node:
    """Wrap an array (or Tensor) as a graph leaf. Does not copy plain arrays."""
    if isinstance(values, Tensor):
        arr = values.values
    else:
        arr = np.asarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("op 'leaf' received a non-finite value")
    return Node("leaf", (), arr, requires_grad, None)


def const(values) -> Node:
    """A leaf that never accumulates gradient."""
    return leaf(values, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# ops


def add(a: Node, b: Node) -> Node:
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    return _make("add", (a, b), out)


def mul(a: Node, b: Node) -> Node:
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    return _make("mul", (a, b), out)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", (a, b), a.value @ b.value)


def tanh(a: Node) -> Node:
    return _make("tanh", (a,), np.tanh(a.value))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    return _make("sigmoid", (a,), _sigmoid_values(a.value))


def softmax(a: Node) -> Node:
    """Softmax over the last axis, computed with a max shift."""
    x = a.value
    if x.ndim == 0:
        raise ShapeError(f"softmax: requires at least one axis, got shape {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", (a,), out)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    if not nodes:
        raise ShapeError("concat: no inputs")
    ndim = nodes[0].value.ndim
    ax = axis if axis >= 0 else axis + ndim
    if not 0 <= ax < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for shape {nodes[0].shape}")
    ref = list(nodes[0].shape)
    for n in nodes[1:]:
        other = list(n.shape)
        if len(other) != ndim or other[:ax] != ref[:ax] or other[ax + 1:] != ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {nodes[0].shape} and {n.shape}")
    out = np.concatenate([n.value for n in nodes], axis=ax)
    sizes = tuple(n.shape[ax] for n in nodes)
    return _make("concat", tuple(nodes), out, extra=(ax, sizes))


def embedding(table: Node, ids) -> Node:
    """Row gather: ``table[ids]``. Gradient scatter-adds into the table."""
    if table.value.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got shape {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range for table with {table.shape[0]} rows"
        )
    return _make("embedding", (table,), table.value[idx], extra=idx)


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    ndim = a.value.ndim
    ax = axis if axis >= 0 else axis + ndim
    if not 0 <= ax < ndim:
        raise ShapeError(f"slice: axis {axis} out of range for shape {a.shape}")
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for shape {a.shape}")
    slicer = (slice(None),) * ax + (slice(start, stop),)
    return _make("slice", (a,), a.value[slicer], extra=(ax, start, stop))


def sum_all(a: Node) -> Node:
    """Sum of every entry, as a scalar node."""
    return _make("sum", (a,), np.asarray(a.value.sum()))


def log(a: Node) -> Node:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.value)
    return _make("log", (a,), out)


def negate(a: Node) -> Node:
    return _make("negate", (a,), -a.value)


def euclidean_norm(a: Node) -> Node:
    """Full-tensor L2 norm as a scalar; gradient at the origin is zero."""
    val = np.sqrt((a.value * a.value).sum())
    return _make("norm", (a,), np.asarray(val))


def cross_entropy(logits: Node, index) -> Node:
    """-log softmax(logits)[index], fused and max-shifted.

    1-d logits take a scalar index and yield a scalar; 2-d logits of shape
    (B, V) take an index vector of length B and yield per-row values (B,).
    """
    x = logits.value
    if x.ndim == 1:
        i = int(index)
        if not 0 <= i < x.shape[0]:
            raise ShapeError(f"cross_entropy: index {i} out of range for shape {x.shape}")
        m = x.max()
        e = np.exp(x - m)
        s = e.sum()
        out = np.asarray(m + np.log(s) - x[i])
        p = e / s
        return _make("cross_entropy", (logits,), out, extra=(np.asarray(i), p))
    if x.ndim == 2:
        idx = np.asarray(index, dtype=np.intp)
        if idx.shape != (x.shape[0],):
            raise ShapeError(
                f"cross_entropy: index shape {idx.shape} does not match logits {x.shape}"
            )
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
            raise ShapeError(
                f"cross_entropy: index out of range for logits with {x.shape[1]} columns"
            )
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        s = e.sum(axis=-1, keepdims=True)
        picked = np.take_along_axis(x, idx[:, None], axis=1)[:, 0]
        out = m[:, 0] + np.log(s[:, 0]) - picked
        p = e / s
        return _make("cross_entropy", (logits,), out, extra=(idx, p))
    raise ShapeError(f"cross_entropy: logits must be 1-d or 2-d, got shape {x.shape}")


# ---------------------------------------------------------------------------
# backward


def _vjp_add(node, g):
    a, b = node.inputs
    return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))


def _vjp_mul(node, g):
    a, b = node.inputs
    return (
        (a, _unbroadcast(g * b.value, a.shape)),
        (b, _unbroadcast(g * a.value, b.shape)),
    )


def _vjp_matmul(node, g):
    a, b = node.inputs
    return ((a, g @ b.value.T), (b, a.value.T @ g))


def _vjp_tanh(node, g):
    return ((node.inputs[0], g * (1.0 - node.value * node.value)),)


def _vjp_sigmoid(node, g):
    v = node.value
    return ((node.inputs[0], g * v * (1.0 - v)),)


def _vjp_softmax(node, g):
    p = node.value
    inner = (g * p).sum(axis=-1, keepdims=True)
    return ((node.inputs[0], p * (g - inner)),)


def _vjp_concat(node, g):
    ax, sizes = node.extra
    out = []
    offset = 0
    for n, size in zip(node.inputs, sizes):
        slicer = (slice(None),) * ax + (slice(offset, offset + size),)
        out.append((n, g[slicer]))
        offset += size
    return tuple(out)


def _vjp_embedding(node, g):
    table = node.inputs[0]
    gt = np.zeros(table.shape, dtype=np.float64)
    np.add.at(gt, node.extra, g)
    return ((table, gt),)


def _vjp_slice(node, g):
    a = node.inputs[0]
    ax, start, stop = node.extra
    ga = np.zeros(a.shape, dtype=np.float64)
    slicer = (slice(None),) * ax + (slice(start, stop),)
    ga[slicer] = g
    return ((a, ga),)


def _vjp_sum(node, g):
    a = node.inputs[0]
    return ((a, np.full(a.shape, float(g))),)


def _vjp_log(node, g):
    a = node.inputs[0]
    return ((a, g / a.value),)


def _vjp_negate(node, g):
    return ((node.inputs[0], -g),)


def _vjp_norm(node, g):
    a = node.inputs[0]
    val = float(node.value)
    if val == 0.0:
        return ((a, np.zeros(a.shape, dtype=np.float64)),)
    return ((a, (float(g) / val) * a.value),)


def _vjp_cross_entropy(node, g):
    logits = node.inputs[0]
    idx, p = node.extra
    gl = p.copy()
    if gl.ndim == 1:
        gl[int(idx)] -= 1.0
        gl *= float(g)
    else:
        gl[np.arange(gl.shape[0]), idx] -= 1.0
        gl *= np.asarray(g)[:, None]
    return ((logits, gl),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "softmax": _vjp_softmax,
    "concat": _vjp_concat,
    "embedding": _vjp_embedding,
    "slice": _vjp_slice,
    "sum": _vjp_sum,
    "log": _vjp_log,
    "negate": _vjp_negate,
    "norm": _vjp_norm,
    "cross_entropy": _vjp_cross_entropy,
}


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(root: Node, leaves: Sequence[Node] | None = None) -> dict[Node, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from reachable gradient-requiring leaf nodes to their
    gradients; leaves passed explicitly always appear, with zeros when the
    root does not depend on them. Also stores each visited node's gradient
    on ``node.grad``.
    """
    if root.value.shape != ():
        raise ShapeError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
    by_id: dict[int, Node] = {id(root): root}
    result: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.get(id(node))
        node.grad = g
        if g is None:
            continue
        if node.kind == "leaf":
            if node.requires_grad:
                result[node] = g
            continue
        for inp, contrib in _VJP[node.kind](node, g):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.asarray(contrib, dtype=np.float64)
                by_id[key] = inp
    if leaves is not None:
        for node in leaves:
            if node not in result:
                result[node] = np.zeros(node.shape, dtype=np.float64)
    return result


def gradient_check(
    build_root: Callable[[list[Node]], Node],
    leaves: Sequence,
    step: float = 1e-5,
) -> float:
    """Compare backward gradients against central finite differences.

    ``build_root`` must deterministically rebuild the same scalar graph from
    the leaf nodes it is given. Returns the max over all leaf entries of
    |analytic - central difference| / max(1, |central difference|).
    """
    if step <= 0:
        raise ValueError("gradient_check: step must be positive")
    arrays = [
        np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
        for x in leaves
    ]
    base = [leaf(a.copy()) for a in arrays]
    root = build_root(base)
    if root.value.shape != ():
        raise ShapeError(f"gradient_check requires a scalar root, got {root.value.shape}")
    analytic = backward(root, leaves=base)

    def evaluate() -> float:
        return float(build_root([const(a) for a in arrays]).value)

    worst = 0.0
    for li, arr in enumerate(arrays):
        grad_flat = analytic[base[li]].reshape(-1)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            try:
                f_plus = evaluate()
                flat[j] = orig - step
                f_minus = evaluate()
            except NonFiniteError as exc:
                raise NonFiniteError(f"leaf {li} entry {j}: {exc}") from None
            finally:
                flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(grad_flat[j] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
