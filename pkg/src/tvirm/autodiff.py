"""Static computation graphs over dense float64 arrays with reverse-mode gradients.

A :class:`Graph` is an append-only list of nodes ``(op, parents, payload)``.
Leaves are named placeholders bound at evaluation time; constants carry their
value as payload. Evaluation is a single forward sweep in node order and
:func:`graph_backward` walks the same list in reverse.

Broadcasting is deliberately absent: elementwise binary ops need identical
shapes and the only row-broadcast is :meth:`Graph.bias_add`.

``abs`` uses the subgradient ``sign(x)``, which is exactly 0 at ``x == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "GraphError",
    "ShapeError",
    "UnboundLeafError",
    "NonFiniteError",
    "graph_eval",
    "graph_backward",
    "finite_diff_gradient",
]


class GraphError(RuntimeError):
    pass


class ShapeError(GraphError, ValueError):
    pass


class UnboundLeafError(GraphError, KeyError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    pass


@dataclass(frozen=True)
class Node:
    """Handle to a node of a graph. Supports ``+ - * @`` sugar."""

    graph: "Graph"
    id: int

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self) -> str:
        op = self.graph.nodes[self.id][0]
        return f"Node({self.id}, {op})"


def _sigmoid(x):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _row_max(x):
    # numpy reduces narrow rows slowly; a column loop is much faster for small k
    if x.shape[1] > 32:
        return x.max(axis=1)
    m = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        np.maximum(m, x[:, j], out=m)
    return m


def _mm(a, b):
    # gemm is slow for rank-1 products; an outer product gives the same values
    if a.shape[1] == 1:
        return a * b
    return a @ b


def _row_sum(x):
    return x @ np.ones(x.shape[1])


def _softmax_rows(x):
    e = np.exp(x - _row_max(x)[:, None])
    return e / _row_sum(e)[:, None]


def _logsumexp_rows(x):
    m = _row_max(x)
    return m + np.log(_row_sum(np.exp(x - m[:, None])))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    return shape[axis]


def _all_finite(x):
    # a finite sum rules out any nan or inf element; only overflow needs the slow path
    return bool(np.isfinite(np.add.reduce(x, axis=None))) or bool(np.isfinite(x).all())


def _needs_grad(graph, names):
    """Per node, whether any leaf in ``names`` reaches it."""
    need = [False] * len(graph.nodes)
    for k, (op, parents, payload) in enumerate(graph.nodes):
        need[k] = payload in names if op == "leaf" else any(need[p] for p in parents)
    return need


def _check_simplex(x, tol):
    if x.ndim != 2:
        raise ShapeError(f"simplex rows need a 2-D input, got {x.shape}")
    if x.size and (x.min() < -tol or np.abs(_row_sum(x) - 1.0).max() > tol):
        raise GraphError("environment weights leave the simplex")


class Graph:
    """Append-only DAG. Parents of node ``k`` always have ids ``< k``."""

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple[int, ...], object]] = []
        self.leaves: dict[str, int] = {}
        self.trainable: set[str] = set()
        self.values: dict[int, np.ndarray] | None = None

    def _push(self, op: str, parents: tuple[Node, ...] = (), payload=None) -> Node:
        for p in parents:
            if not isinstance(p, Node) or p.graph is not self:
                raise GraphError(f"{op}: parent is not a node of this graph")
        self.nodes.append((op, tuple(p.id for p in parents), payload))
        self.values = None
        return Node(self, len(self.nodes) - 1)

    # leaves

    def leaf(self, name: str, trainable: bool = False) -> Node:
        """Named placeholder; requesting the same name twice returns the same node."""
        if name in self.leaves:
            node = Node(self, self.leaves[name])
        else:
            node = self._push("leaf", (), name)
            self.leaves[name] = node.id
        if trainable:
            self.trainable.add(name)
        return node

    def param(self, name: str) -> Node:
        return self.leaf(name, trainable=True)

    def const(self, value) -> Node:
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("constant contains non-finite values")
        arr.setflags(write=False)
        return self._push("const", (), arr)

    # primitives

    def add(self, a: Node, b: Node) -> Node:
        return self._push("add", (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        return self._push("sub", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        return self._push("mul", (a, b))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._push("matmul", (a, b))

    def bias_add(self, a: Node, bias: Node) -> Node:
        return self._push("bias_add", (a, bias))

    def relu(self, a: Node) -> Node:
        return self._push("relu", (a,))

    def sigmoid(self, a: Node) -> Node:
        return self._push("sigmoid", (a,))

    def softmax(self, a: Node) -> Node:
        """Row-wise softmax of a 2-D input."""
        return self._push("softmax", (a,))

    def logsumexp(self, a: Node) -> Node:
        """Row-wise max-shifted log-sum-exp: ``(m, k) -> (m,)``."""
        return self._push("logsumexp", (a,))

    def square(self, a: Node) -> Node:
        return self._push("square", (a,))

    def abs(self, a: Node) -> Node:
        return self._push("abs", (a,))

    def mean(self, a: Node, axis: int | None = None) -> Node:
        return self._push("mean", (a,), axis)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        return self._push("sum", (a,), axis)

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", (a,), float(c))

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        """Reshape; one entry may be -1."""
        return self._push("reshape", (a,), tuple(int(s) for s in shape))

    def simplex_rows(self, a: Node, tol: float = 1e-9) -> Node:
        """Identity that raises at evaluation if any row leaves the simplex."""
        return self._push("simplex", (a,), float(tol))

    def __len__(self) -> int:
        return len(self.nodes)


def _forward(op, args, payload):
    if op == "add":
        _same_shape(op, *args)
        return args[0] + args[1]
    if op == "sub":
        _same_shape(op, *args)
        return args[0] - args[1]
    if op == "mul":
        _same_shape(op, *args)
        return args[0] * args[1]
    if op == "matmul":
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return _mm(a, b)
    if op == "bias_add":
        a, b = args
        if a.ndim != 2 or b.shape != (a.shape[1],):
            raise ShapeError(f"bias_add: bias {b.shape} does not fit {a.shape}")
        return a + b
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "sigmoid":
        return _sigmoid(args[0])
    if op == "softmax":
        if args[0].ndim != 2:
            raise ShapeError(f"softmax: need 2-D input, got {args[0].shape}")
        return _softmax_rows(args[0])
    if op == "logsumexp":
        if args[0].ndim != 2:
            raise ShapeError(f"logsumexp: need 2-D input, got {args[0].shape}")
        return _logsumexp_rows(args[0])
    if op == "square":
        return args[0] * args[0]
    if op == "abs":
        return np.abs(args[0])
    if op == "mean":
        x = args[0]
        if payload == 0 and x.ndim == 2:
            return np.ones(x.shape[0]) @ x / x.shape[0]
        return np.asarray(x.mean(axis=payload))
    if op == "sum":
        x = args[0]
        if payload == 1 and x.ndim == 2:
            return _row_sum(x)
        return np.asarray(x.sum(axis=payload))
    if op == "scale":
        return payload * args[0]
    if op == "reshape":
        try:
            return args[0].reshape(payload)
        except ValueError:
            raise ShapeError(f"reshape: {args[0].shape} cannot become {payload}") from None
    if op == "simplex":
        _check_simplex(args[0], payload)
        return args[0]
    raise GraphError(f"unknown op {op!r}")


def graph_eval(graph: Graph, bindings: Mapping[str, np.ndarray]) -> dict[int, np.ndarray]:
    """Evaluate every node once, in order. Values are also cached on the graph."""
    values: dict[int, np.ndarray] = {}
    for k, (op, parents, payload) in enumerate(graph.nodes):
        if op == "leaf":
            if payload not in bindings:
                raise UnboundLeafError(f"leaf {payload!r} is not bound")
            v = np.asarray(bindings[payload], dtype=np.float64)
        elif op == "const":
            v = payload
        else:
            # overflow is reported below as NonFiniteError, not as a numpy warning
            with np.errstate(over="ignore", invalid="ignore"):
                v = _forward(op, [values[p] for p in parents], payload)
        if not _all_finite(v):
            what = payload if op == "leaf" else op
            raise NonFiniteError(f"non-finite value at node {k} ({what})")
        values[k] = v
    graph.values = values
    return values


def _vjp(op, g, args, out, payload, need=(True, True)):
    """Cotangents for each parent of one node; ``None`` where ``need`` is false."""
    if op == "matmul":
        return (_mm(g, args[1].T) if need[0] else None, args[0].T @ g if need[1] else None)
    if op == "mul":
        return (g * args[1] if need[0] else None, g * args[0] if need[1] else None)
    if op == "add":
        return g, g
    if op == "sub":
        return g, -g
    if op == "bias_add":
        return g, np.ones(g.shape[0]) @ g
    if op == "relu":
        return (g * (args[0] > 0),)
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "softmax":
        return (out * (g - _row_sum(g * out)[:, None]),)
    if op == "logsumexp":
        return (g[:, None] * _softmax_rows(args[0]),)
    if op == "square":
        return (2.0 * args[0] * g,)
    if op == "abs":
        return (np.sign(args[0]) * g,)
    if op == "mean":
        shape = args[0].shape
        return (_expand_reduced(g, shape, payload) / _reduced_count(shape, payload),)
    if op == "sum":
        return (_expand_reduced(g, args[0].shape, payload),)
    if op == "scale":
        return (payload * g,)
    if op == "reshape":
        return (g.reshape(args[0].shape),)
    if op == "simplex":
        return (g,)
    raise GraphError(f"unknown op {op!r}")


def graph_backward(graph: Graph, root: Node, wrt: set[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar ``root`` with respect to trainable leaves.

    Every trainable leaf (or every name in ``wrt``) gets an entry; leaves the
    root does not depend on receive zeros.
    """
    values = graph.values
    if values is None:
        raise GraphError("graph has not been evaluated")
    if values[root.id].shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {values[root.id].shape}")
    names = graph.trainable if wrt is None else set(wrt)
    need = _needs_grad(graph, names)

    adj: dict[int, np.ndarray] = {root.id: np.ones(())}
    for k in range(root.id, -1, -1):
        g = adj.pop(k, None)
        if g is None or not need[k]:
            continue
        op, parents, payload = graph.nodes[k]
        if op in ("leaf", "const"):
            adj[k] = g  # keep leaf adjoints for the result
            continue
        grads = _vjp(op, g, [values[p] for p in parents], values[k], payload, [need[p] for p in parents])
        for p, gp in zip(parents, grads):
            if gp is None or not need[p]:
                continue
            if p in adj:
                adj[p] = adj[p] + gp
            else:
                adj[p] = np.asarray(gp, dtype=np.float64)

    out = {}
    for name in sorted(names):
        nid = graph.leaves.get(name)
        if nid is None:
            raise UnboundLeafError(f"no leaf named {name!r}")
        grad = adj.get(nid)
        out[name] = np.zeros_like(values[nid]) if grad is None else np.array(grad)
    return out


def finite_diff_gradient(
    fn: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` for every coordinate."""
    if not h > 0:
        raise ValueError("step h must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(work))
            flat[i] = orig - h
            fm = float(fn(work))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out
