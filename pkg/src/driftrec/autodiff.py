"""Reverse-mode automatic differentiation on a recorded operation graph.

Every forward primitive appends a node to a :class:`Graph`. The backward
pass builds vector-Jacobian products out of the *same* primitives, so the
returned gradients are ordinary graph tensors and a scalar function of
them (e.g. a squared gradient norm) can be differentiated again. That
double-backward capability is what the cross-environment gradient-variance
penalty relies on.

Values are float64 numpy arrays of rank 0..2. Broadcasting is supported
for elementwise ops in the numpy sense; gradients are un-broadcast by
summation. There is no GPU path and no operator fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special as _special

LOG_FLOOR = 1e-12

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_TWO_OVER_SQRT_PI = float(2.0 / np.sqrt(np.pi))


class ShapeError(ValueError):
    """Operands have incompatible shapes; indicates a programming error."""


@dataclass
class Node:
    """One recorded primitive application."""

    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool


class Graph:
    """Ordered list of nodes; inputs of a node always precede it."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _add(self, kind: str, inputs: tuple[int, ...], attrs: dict,
             value: np.ndarray, requires_grad: bool) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(kind, inputs, attrs, value, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = False) -> "Tensor":
        return self._add("leaf", (), {}, value, requires_grad)

    def constant(self, value) -> "Tensor":
        return self.leaf(value, requires_grad=False)

    def variable(self, value) -> "Tensor":
        return self.leaf(value, requires_grad=True)

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded node and return the recomputed values.

        Recomputation follows the recorded order with the recorded attrs,
        so on identical leaf values it is bit-identical to the first run.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
            else:
                args = [values[i] for i in node.inputs]
                values.append(_FORWARD[node.kind](node.attrs, *args))
        return values


@dataclass(frozen=True)
class Tensor:
    """Handle to one node of a graph."""

    graph: Graph
    node_id: int

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.node_id].requires_grad

    def __add__(self, other):
        return add(self, _coerce(self.graph, other))

    def __radd__(self, other):
        return add(_coerce(self.graph, other), self)

    def __sub__(self, other):
        return subtract(self, _coerce(self.graph, other))

    def __rsub__(self, other):
        return subtract(_coerce(self.graph, other), self)

    def __mul__(self, other):
        return multiply(self, _coerce(self.graph, other))

    def __rmul__(self, other):
        return multiply(_coerce(self.graph, other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        return reshape(self, shape)


def _coerce(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise ValueError("operands belong to different graphs")
        return x
    return graph.constant(x)


def _same_graph(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ValueError("operands belong to different graphs")
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# forward rules (shared by op constructors and Graph.replay)

def _fwd_add(attrs, a, b):
    return a + b


def _fwd_subtract(attrs, a, b):
    return a - b


def _fwd_multiply(attrs, a, b):
    return a * b


def _fwd_scale(attrs, a):
    return a * attrs["c"]


def _fwd_matmul(attrs, a, b):
    aa = a.T if attrs["ta"] else a
    bb = b.T if attrs["tb"] else b
    return aa @ bb


def _fwd_tanh(attrs, a):
    return np.tanh(a)


def _fwd_exp(attrs, a):
    return np.exp(a)


def _fwd_log(attrs, a):
    return np.log(np.maximum(a, LOG_FLOOR))


def _fwd_clip(attrs, a):
    return np.clip(a, attrs["lo"], attrs["hi"])


def _fwd_square(attrs, a):
    return a * a


def _fwd_erf(attrs, a):
    return _special.erf(a)


def _fwd_sum(attrs, a):
    return np.sum(a, axis=attrs["axis"], keepdims=attrs["keepdims"])


def _fwd_reshape(attrs, a):
    return np.reshape(a, attrs["shape"])


def _fwd_concat(attrs, *parts):
    return np.concatenate(parts, axis=attrs["axis"])


def _fwd_logsumexp(attrs, a):
    axis, keepdims = attrs["axis"], attrs["keepdims"]
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if not keepdims:
        out = out.reshape(np.sum(a, axis=axis, keepdims=False).shape)
    return out


def _fwd_dropout(attrs, a):
    return a * attrs["mask"]


def _fwd_gather_rows(attrs, a):
    return a[np.asarray(attrs["indices"], dtype=np.intp), :]


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add,
    "subtract": _fwd_subtract,
    "multiply": _fwd_multiply,
    "scale": _fwd_scale,
    "matmul": _fwd_matmul,
    "tanh": _fwd_tanh,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "clip": _fwd_clip,
    "square": _fwd_square,
    "erf": _fwd_erf,
    "sum": _fwd_sum,
    "reshape": _fwd_reshape,
    "concat": _fwd_concat,
    "logsumexp": _fwd_logsumexp,
    "dropout": _fwd_dropout,
    "gather_rows": _fwd_gather_rows,
}


# ---------------------------------------------------------------------------
# op constructors

def add(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    _check_broadcast(a.value, b.value, "add")
    return g._add("add", (a.node_id, b.node_id), {}, _fwd_add({}, a.value, b.value),
                  a.requires_grad or b.requires_grad)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    _check_broadcast(a.value, b.value, "subtract")
    return g._add("subtract", (a.node_id, b.node_id), {},
                  _fwd_subtract({}, a.value, b.value),
                  a.requires_grad or b.requires_grad)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    _check_broadcast(a.value, b.value, "multiply")
    return g._add("multiply", (a.node_id, b.node_id), {},
                  _fwd_multiply({}, a.value, b.value),
                  a.requires_grad or b.requires_grad)


def scale(a: Tensor, c: float) -> Tensor:
    attrs = {"c": float(c)}
    return a.graph._add("scale", (a.node_id,), attrs,
                        _fwd_scale(attrs, a.value), a.requires_grad)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    g = _same_graph(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul requires rank-2 operands")
    attrs = {"ta": bool(transpose_a), "tb": bool(transpose_b)}
    ka = a.value.shape[0] if transpose_a else a.value.shape[1]
    kb = b.value.shape[1] if transpose_b else b.value.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dims {ka} != {kb} "
                         f"(shapes {a.value.shape}, {b.value.shape})")
    return g._add("matmul", (a.node_id, b.node_id), attrs,
                  _fwd_matmul(attrs, a.value, b.value),
                  a.requires_grad or b.requires_grad)


def tanh(a: Tensor) -> Tensor:
    return a.graph._add("tanh", (a.node_id,), {}, _fwd_tanh({}, a.value),
                        a.requires_grad)


def exp(a: Tensor) -> Tensor:
    return a.graph._add("exp", (a.node_id,), {}, _fwd_exp({}, a.value),
                        a.requires_grad)


def log(a: Tensor) -> Tensor:
    # Argument is floored at LOG_FLOOR; below the floor the derivative is 0.
    return a.graph._add("log", (a.node_id,), {}, _fwd_log({}, a.value),
                        a.requires_grad)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    attrs = {"lo": float(lo), "hi": float(hi)}
    return a.graph._add("clip", (a.node_id,), attrs,
                        _fwd_clip(attrs, a.value), a.requires_grad)


def square(a: Tensor) -> Tensor:
    return a.graph._add("square", (a.node_id,), {}, _fwd_square({}, a.value),
                        a.requires_grad)


def erf(a: Tensor) -> Tensor:
    return a.graph._add("erf", (a.node_id,), {}, _fwd_erf({}, a.value),
                        a.requires_grad)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    attrs = {"axis": axis, "keepdims": bool(keepdims)}
    return a.graph._add("sum", (a.node_id,), attrs,
                        _fwd_sum(attrs, a.value), a.requires_grad)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    attrs = {"shape": shape, "orig": a.value.shape}
    return a.graph._add("reshape", (a.node_id,), attrs,
                        _fwd_reshape(attrs, a.value), a.requires_grad)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    g = _same_graph(*parts)
    attrs = {"axis": int(axis), "sizes": tuple(p.value.shape[axis] for p in parts)}
    return g._add("concat", tuple(p.node_id for p in parts), attrs,
                  _fwd_concat(attrs, *[p.value for p in parts]),
                  any(p.requires_grad for p in parts))


def logsumexp(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    attrs = {"axis": axis, "keepdims": bool(keepdims)}
    return a.graph._add("logsumexp", (a.node_id,), attrs,
                        _fwd_logsumexp(attrs, a.value), a.requires_grad)


def dropout(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a caller-supplied mask (typically 0 or 1/(1-p) entries).

    The mask is data, not a differentiable input; drawing it is the
    caller's job so runs are reproducible.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.value.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} != input {a.value.shape}")
    attrs = {"mask": mask}
    return a.graph._add("dropout", (a.node_id,), attrs,
                        _fwd_dropout(attrs, a.value), a.requires_grad)


def gather_rows(a: Tensor, indices) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError("gather_rows requires a rank-2 operand")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise IndexError("gather_rows index out of range")
    attrs = {"indices": idx, "n_rows": a.value.shape[0]}
    return a.graph._add("gather_rows", (a.node_id,), attrs,
                        _fwd_gather_rows(attrs, a.value), a.requires_grad)


def softmax(a: Tensor, axis: int) -> Tensor:
    """exp(a - logsumexp(a)) along `axis`; rows sum to one."""
    return exp(subtract(a, logsumexp(a, axis=axis, keepdims=True)))


def log_softmax(a: Tensor, axis: int) -> Tensor:
    return subtract(a, logsumexp(a, axis=axis, keepdims=True))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, 0.5 * (1 + erf(x / sqrt(2)))."""
    one = a.graph.constant(1.0)
    return scale(add(one, erf(scale(a, _INV_SQRT2))), 0.5)


# ---------------------------------------------------------------------------
# backward

def _unbroadcast(grad: Tensor, target_shape: tuple[int, ...]) -> Tensor:
    """Sum `grad` down to `target_shape` (adjoint of numpy broadcasting)."""
    if grad.shape == target_shape:
        return grad
    g = grad
    while len(g.shape) > len(target_shape):
        g = reduce_sum(g, axis=0, keepdims=False)
    for ax, size in enumerate(target_shape):
        if size == 1 and g.shape[ax] != 1:
            g = reduce_sum(g, axis=ax, keepdims=True)
    if g.shape != target_shape:
        g = reshape(g, target_shape)
    return g


def _tensor(graph: Graph, node_id: int) -> Tensor:
    return Tensor(graph, node_id)


def _vjp(node: Node, graph: Graph, node_id: int, grad: Tensor) -> list[tuple[int, Tensor]]:
    """Per-input adjoint contributions, each built from primitives."""
    kind = node.kind
    ins = node.inputs
    out: list[tuple[int, Tensor]] = []

    if kind == "add":
        a, b = (_tensor(graph, i) for i in ins)
        out.append((ins[0], _unbroadcast(grad, a.shape)))
        out.append((ins[1], _unbroadcast(grad, b.shape)))
    elif kind == "subtract":
        a, b = (_tensor(graph, i) for i in ins)
        out.append((ins[0], _unbroadcast(grad, a.shape)))
        out.append((ins[1], _unbroadcast(scale(grad, -1.0), b.shape)))
    elif kind == "multiply":
        a, b = (_tensor(graph, i) for i in ins)
        out.append((ins[0], _unbroadcast(multiply(grad, b), a.shape)))
        out.append((ins[1], _unbroadcast(multiply(grad, a), b.shape)))
    elif kind == "scale":
        out.append((ins[0], scale(grad, node.attrs["c"])))
    elif kind == "matmul":
        a, b = (_tensor(graph, i) for i in ins)
        ta, tb = node.attrs["ta"], node.attrs["tb"]
        if ta:
            da = matmul(b, grad, transpose_a=tb, transpose_b=True)
        else:
            da = matmul(grad, b, transpose_b=not tb)
        if tb:
            db = matmul(grad, a, transpose_a=True, transpose_b=ta)
        else:
            db = matmul(a, grad, transpose_a=not ta)
        out.append((ins[0], da))
        out.append((ins[1], db))
    elif kind == "tanh":
        y = _tensor(graph, node_id)
        one = graph.constant(1.0)
        out.append((ins[0], multiply(grad, subtract(one, square(y)))))
    elif kind == "exp":
        y = _tensor(graph, node_id)
        out.append((ins[0], multiply(grad, y)))
    elif kind == "log":
        # 1/max(x, floor) as exp(-log_output), zeroed where the floor clamps.
        y = _tensor(graph, node_id)
        inv = exp(scale(y, -1.0))
        active = graph.constant(
            (graph.nodes[ins[0]].value > LOG_FLOOR).astype(np.float64))
        out.append((ins[0], multiply(multiply(grad, inv), active)))
    elif kind == "clip":
        x = graph.nodes[ins[0]].value
        interior = ((x > node.attrs["lo"]) & (x < node.attrs["hi"])).astype(np.float64)
        out.append((ins[0], multiply(grad, graph.constant(interior))))
    elif kind == "square":
        x = _tensor(graph, ins[0])
        out.append((ins[0], scale(multiply(grad, x), 2.0)))
    elif kind == "erf":
        x = _tensor(graph, ins[0])
        dens = exp(scale(square(x), -1.0))
        out.append((ins[0], scale(multiply(grad, dens), _TWO_OVER_SQRT_PI)))
    elif kind == "sum":
        x_shape = graph.nodes[ins[0]].value.shape
        axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
        g = grad
        if axis is not None and not keepdims:
            kept = list(x_shape)
            kept[axis] = 1
            g = reshape(g, tuple(kept))
        ones = graph.constant(np.ones(x_shape))
        out.append((ins[0], multiply(g, ones)))
    elif kind == "reshape":
        out.append((ins[0], reshape(grad, node.attrs["orig"])))
    elif kind == "concat":
        axis = node.attrs["axis"]
        offset = 0
        for in_id, size in zip(ins, node.attrs["sizes"]):
            rng = np.arange(offset, offset + size)
            if axis == 0:
                piece = gather_rows(grad, rng)
                if graph.nodes[in_id].value.ndim == 1:
                    piece = reshape(piece, (size,))
            else:
                total = node.value.shape[axis]
                sel = np.zeros((total, size))
                sel[rng, np.arange(size)] = 1.0
                piece = matmul(grad, graph.constant(sel))
            out.append((in_id, piece))
            offset += size
    elif kind == "logsumexp":
        x = _tensor(graph, ins[0])
        y = _tensor(graph, node_id)
        axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
        g, yk = grad, y
        if axis is None:
            sm = exp(subtract(x, yk))
            out.append((ins[0], multiply(g, sm)))
        else:
            if not keepdims:
                kept = list(graph.nodes[ins[0]].value.shape)
                kept[axis] = 1
                g = reshape(g, tuple(kept))
                yk = reshape(yk, tuple(kept))
            sm = exp(subtract(x, yk))
            out.append((ins[0], multiply(g, sm)))
    elif kind == "dropout":
        out.append((ins[0], dropout(grad, node.attrs["mask"])))
    elif kind == "gather_rows":
        idx = node.attrs["indices"]
        n_rows = node.attrs["n_rows"]
        onehot = np.zeros((len(idx), n_rows))
        onehot[np.arange(len(idx)), idx] = 1.0
        out.append((ins[0], matmul(graph.constant(onehot), grad, transpose_a=True)))
    elif kind == "leaf":
        pass
    else:  # pragma: no cover
        raise NotImplementedError(f"no VJP for primitive {kind!r}")
    return out


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar `output` w.r.t. `wrt`, as graph tensors.

    The adjoint computation is appended to the same graph using the
    primitive set, so any scalar built from the returned tensors can be
    passed to `backward` again.
    """
    if output.value.size != 1:
        raise ValueError("backward requires a scalar output")
    graph = output.graph
    adjoints: dict[int, Tensor] = {
        output.node_id: graph.constant(np.ones_like(output.value))
    }
    wrt_ids = {t.node_id for t in wrt}
    for nid in range(output.node_id, -1, -1):
        grad = adjoints.get(nid)
        if grad is None:
            continue
        node = graph.nodes[nid]
        for in_id, contrib in _vjp(node, graph, nid, grad):
            if not graph.nodes[in_id].requires_grad and in_id not in wrt_ids:
                continue
            prev = adjoints.get(in_id)
            adjoints[in_id] = contrib if prev is None else add(prev, contrib)
    grads = []
    for t in wrt:
        got = adjoints.get(t.node_id)
        if got is None:
            got = graph.constant(np.zeros_like(t.value))
        grads.append(got)
    return grads


# ---------------------------------------------------------------------------
# parameter bookkeeping

class ParamStore:
    """Named float64 parameter arrays with a stable flattening order."""

    def __init__(self) -> None:
        self._params: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        self._params[name] = np.asarray(value, dtype=np.float64).copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        cur = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ShapeError(f"parameter {name!r}: shape {value.shape} != {cur.shape}")
        self._params[name] = value.copy()

    def names(self) -> list[str]:
        return list(self._params)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._params.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._params.values())

    def flatten(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._params.values()])

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"vector length {vec.size} != store size {self.size}")
        offset = 0
        for name, cur in self._params.items():
            n = cur.size
            self._params[name] = vec[offset:offset + n].reshape(cur.shape).copy()
            offset += n

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._params.items():
            out.add(name, value)
        return out

    def bind(self, graph: Graph) -> dict[str, Tensor]:
        """Create one differentiable leaf per parameter, in store order."""
        return {name: graph.variable(value) for name, value in self._params.items()}


def gradient_vector(output: Tensor, binding: dict[str, Tensor],
                    store: ParamStore) -> np.ndarray:
    """Flat gradient of `output` aligned with `store.flatten()`."""
    order = store.names()
    grads = backward(output, [binding[name] for name in order])
    return np.concatenate([g.value.ravel() for g in grads]) if order else np.zeros(0)


def finite_diff_check(fn: Callable[[Graph, Tensor], Tensor], point: np.ndarray,
                      step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` receives a fresh graph and a variable bound to `point` and must
    return a scalar tensor. Error per coordinate is
    |analytic - central| / (|analytic| + |central| + 1e-8).
    """
    point = np.asarray(point, dtype=np.float64)
    g = Graph()
    x = g.variable(point)
    y = fn(g, x)
    analytic = backward(y, [x])[0].value

    def eval_at(p: np.ndarray) -> float:
        gg = Graph()
        return float(fn(gg, gg.variable(p)).value)

    worst = 0.0
    flat = point.ravel()
    for i in range(flat.size):
        delta = np.zeros_like(flat)
        delta[i] = step
        hi = eval_at((flat + delta).reshape(point.shape))
        lo = eval_at((flat - delta).reshape(point.shape))
        central = (hi - lo) / (2.0 * step)
        a = analytic.ravel()[i]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-8)
        worst = max(worst, err)
    return worst
