"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every traced operation appends a node to the active :class:`Graph`.  A graph
is opened with :func:`tape` and lives for one optimisation step::

    w = Tensor(np.ones(3), requires_grad=True)
    with tape():
        loss = (w * w).sum()
    grads = backward(loss)
    grads[w]  # -> Tensor([2., 2., 2.])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GradMap",
    "ShapeError",
    "DomainError",
    "tape",
    "backward",
    "forward_op",
    "OP_KINDS",
    "concat",
    "maximum",
    "as_tensor",
]


class ShapeError(ValueError):
    """Input shapes do not conform for the requested op."""


class DomainError(ValueError):
    """Op evaluated outside its mathematical domain."""


class Graph:
    """Append-only list of operation records.

    A node is ``(kind, input_ids, backward_fn)``.  Leaves have
    ``backward_fn=None``.  Input ids always precede the node itself.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None]] = []
        self.leaf_shapes: dict[int, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, kind: str, input_ids: tuple[int, ...], backward_fn: Callable | None) -> int:
        self.nodes.append((kind, input_ids, backward_fn))
        return len(self.nodes) - 1


_active: list[Graph] = []


@contextlib.contextmanager
def tape() -> Iterator[Graph]:
    """Open a fresh graph; traced ops inside the block are recorded on it."""
    g = Graph()
    _active.append(g)
    try:
        yield g
    finally:
        _active.pop()


def _current_graph() -> Graph:
    if not _active:
        raise RuntimeError("operation on a requires_grad tensor outside of an active tape()")
    return _active[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_graph")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._graph: Graph | None = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def _node(self, graph: Graph) -> int | None:
        """Node id of this tensor in ``graph``; registers trainable leaves lazily."""
        if not self.requires_grad:
            return None
        if self._graph is not graph:
            self._graph = graph
            self.node_id = graph.add("leaf", (), None)
            graph.leaf_shapes[self.node_id] = self.data.shape
        return self.node_id

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return forward_op("add", [self, other])

    def __radd__(self, other):
        return forward_op("add", [other, self])

    def __sub__(self, other):
        return forward_op("sub", [self, other])

    def __rsub__(self, other):
        return forward_op("sub", [other, self])

    def __mul__(self, other):
        return forward_op("mul", [self, other])

    def __rmul__(self, other):
        return forward_op("mul", [other, self])

    def __truediv__(self, other):
        return forward_op("div", [self, other])

    def __rtruediv__(self, other):
        return forward_op("div", [other, self])

    def __matmul__(self, other):
        return forward_op("matmul", [self, other])

    def __rmatmul__(self, other):
        return forward_op("matmul", [other, self])

    def __neg__(self):
        return forward_op("neg", [self])

    def __getitem__(self, index):
        return forward_op("slice", [self], index=index)

    def exp(self):
        return forward_op("exp", [self])

    def log(self):
        return forward_op("log", [self])

    def tanh(self):
        return forward_op("tanh", [self])

    def relu(self):
        return forward_op("relu", [self])

    def square(self):
        return forward_op("square", [self])

    def softmax(self, axis: int = -1):
        return forward_op("softmax", [self], axis=axis)

    def sum(self, axis=None, keepdims: bool = False):
        return forward_op("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return forward_op("mean", [self], axis=axis, keepdims=keepdims)

    def broadcast_to(self, shape):
        return forward_op("broadcast", [self], shape=tuple(shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(kind: str, fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# Each rule maps (input arrays, params) -> (output array, backward) where
# backward(g) returns one gradient array (or None) per input.


def _op_add(x, y):
    return _binary("add", np.add, x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))


def _op_sub(x, y):
    return _binary("sub", np.subtract, x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))


def _op_mul(x, y):
    return _binary("mul", np.multiply, x, y), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))


def _op_div(x, y):
    out = _binary("div", np.divide, x, y)
    return out, lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape))


def _op_matmul(x, y):
    if x.ndim not in (1, 2) or y.ndim not in (1, 2) or x.shape[-1] != y.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    out = x @ y

    def back(g):
        x2 = x.reshape(1, -1) if x.ndim == 1 else x
        y2 = y.reshape(-1, 1) if y.ndim == 1 else y
        g2 = g.reshape(x2.shape[0], y2.shape[1])
        return (g2 @ y2.T).reshape(x.shape), (x2.T @ g2).reshape(y.shape)

    return out, back


def _op_exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _op_log(x):
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive input (min {x.min():.6g})")
    return np.log(x), lambda g: (g / x,)


def _op_tanh(x):
    out = np.tanh(x)
    return out, lambda g: (g * (1.0 - out * out),)


def _op_relu(x):
    out = np.maximum(x, 0.0)
    return out, lambda g: (g * (out > 0),)


def _op_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def _op_sum(x, axis=None, keepdims=False):
    out = np.sum(x, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, back


def _op_mean(x, axis=None, keepdims=False):
    out = np.mean(x, axis=axis, keepdims=keepdims)
    count = x.size / max(np.size(out), 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return out, back


def _op_square(x):
    return x * x, lambda g: (2.0 * g * x,)


def _op_neg(x):
    return -x, lambda g: (-g,)


def _op_broadcast(x, shape=()):
    try:
        out = np.broadcast_to(x, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    return out.copy(), lambda g: (_unbroadcast(g, x.shape),)


def _op_slice(x, index=None):
    try:
        out = x[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None

    def back(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return np.array(out, dtype=np.float64), back


def _op_concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _op_max(x, y):
    out = _binary("elementwise-max", np.maximum, x, y)
    take_x = x >= y
    return out, lambda g: (
        _unbroadcast(g * take_x, x.shape),
        _unbroadcast(g * ~take_x, y.shape),
    )


_RULES: dict[str, Callable] = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "div": _op_div,
    "matmul": _op_matmul,
    "exp": _op_exp,
    "log": _op_log,
    "tanh": _op_tanh,
    "relu": _op_relu,
    "softmax": _op_softmax,
    "sum": _op_sum,
    "mean": _op_mean,
    "square": _op_square,
    "neg": _op_neg,
    "broadcast": _op_broadcast,
    "slice": _op_slice,
    "concat": _op_concat,
    "elementwise-max": _op_max,
}
OP_KINDS = frozenset(_RULES)


def forward_op(kind: str, inputs: Sequence, **params) -> Tensor:
    """Evaluate op ``kind`` on ``inputs``, tracing it if any input requires grad."""
    try:
        rule = _RULES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(OP_KINDS)}") from None
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    out, back = rule(*[t.data for t in tensors], **params)
    result = Tensor(out)
    if any([t.requires_grad for t in tensors]):
        graph = _current_graph()
        ids = tuple([t._node(graph) for t in tensors])
        result.requires_grad = True
        result._graph = graph
        result.node_id = graph.add(kind, ids, back)
    return result


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return forward_op("concat", tensors, axis=axis)


def maximum(a, b) -> Tensor:
    return forward_op("elementwise-max", [a, b])


class GradMap(dict):
    """Leaf gradients keyed by node id; also indexable by the leaf tensor.

    Tensor lookups only succeed for leaves traced on the same graph, so a
    stale node id from an earlier tape never aliases another node.
    """

    graph: Graph | None = None

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            if key.node_id is None or key._graph is not self.graph:
                raise KeyError("tensor was not traced on this graph")
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            return (key.node_id is not None and key._graph is self.graph
                    and super().__contains__(key.node_id))
        return super().__contains__(key)


def backward(root: Tensor) -> GradMap:
    """Reverse sweep from scalar ``root``; returns d(root)/d(leaf) for every traced leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node_id is None or root._graph is None:
        raise ValueError("backward root is not traced (no input requires grad)")
    nodes = root._graph.nodes
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    leaves = GradMap()
    leaves.graph = root._graph
    for nid in range(root.node_id, -1, -1):
        kind, ids, back = nodes[nid]
        if back is None:
            g = grads.pop(nid, None)
            leaves[nid] = Tensor(g if g is not None else np.zeros(root._graph.leaf_shapes[nid]))
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        for iid, gi in zip(ids, back(g)):
            if iid is None or gi is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + gi
            else:
                grads[iid] = gi
    return leaves
