"""Small define-then-run reverse-mode autodiff over numpy arrays.

A :class:`Graph` records operation nodes; leaves are bound by name when
:meth:`Graph.forward` runs, and :meth:`Graph.gradient` back-propagates a
scalar output to any differentiable leaf.  Only the handful of operations
needed by the classifiers, statistical features and attack losses are
provided.

Example
-------
>>> g = Graph()
>>> x = g.leaf("x")
>>> g.output("y", (x * x).sum())
>>> g.forward({"x": np.array([1.0, 2.0, 3.0])})["y"]
array(14.)
>>> g.gradient("y", ["x"])["x"]
array([2., 4., 6.])
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Node",
    "GraphError",
    "ShapeError",
    "NumericalError",
    "forward",
    "gradient",
    "elementwise_pow",
    "sqrt",
    "absolute",
    "relu",
    "maximum",
    "sum",
    "mean",
    "amax",
    "l2norm",
    "reshape",
    "flatten",
    "matmul",
    "conv1d",
    "maxpool1d",
    "take",
    "softmax_cross_entropy",
]

DTYPE = np.float64


class GraphError(RuntimeError):
    """Misuse of a graph (unbound leaf, bad gradient request, ...)."""


class ShapeError(GraphError, ValueError):
    """Operand shapes are inconsistent with an operation's signature."""


class NumericalError(GraphError, ArithmeticError):
    """A node produced NaN or infinite values."""


class Node:
    """Handle to one operation record in a :class:`Graph`."""

    __slots__ = ("graph", "index")
    __array_priority__ = 100

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    def __repr__(self):
        return f"Node({self.graph._describe(self.index)})"

    @property
    def value(self) -> np.ndarray:
        v = self.graph._values[self.index]
        if v is None:
            raise GraphError(f"{self.graph._describe(self.index)} has not been evaluated")
        return v

    def __add__(self, other):
        return self.graph._op("add", (self, other))

    def __radd__(self, other):
        return self.graph._op("add", (other, self))

    def __sub__(self, other):
        return self.graph._op("sub", (self, other))

    def __rsub__(self, other):
        return self.graph._op("sub", (other, self))

    def __mul__(self, other):
        return self.graph._op("mul", (self, other))

    def __rmul__(self, other):
        return self.graph._op("mul", (other, self))

    def __truediv__(self, other):
        return self.graph._op("div", (self, other))

    def __rtruediv__(self, other):
        return self.graph._op("div", (other, self))

    def __neg__(self):
        return self.graph._op("neg", (self,))

    def __pow__(self, k):
        return elementwise_pow(self, k)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Record:
    __slots__ = ("op", "parents", "attrs", "name", "differentiable")

    def __init__(self, op, parents, attrs=None, name=None, differentiable=False):
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.name = name
        self.differentiable = differentiable


class Graph:
    """Operation records in evaluation order plus their cached values.

    Parents always precede children, so the record list is a topological
    order.  A graph is single-writer: do not call :meth:`forward` or
    :meth:`gradient` on one instance from several threads at once.
    """

    def __init__(self, check_finite: bool = True):
        self._records: list[_Record] = []
        self._values: list[np.ndarray | None] = []
        self._caches: list = []
        self._leaves: dict[str, int] = {}
        self._outputs: dict[str, int] = {}
        self._schedule: list[int] | None = None
        self.check_finite = check_finite

    # -- construction -------------------------------------------------
    def leaf(self, name: str, differentiable: bool = True) -> Node:
        if name in self._leaves:
            raise GraphError(f"leaf {name!r} already defined")
        node = self._append(_Record("leaf", (), name=name, differentiable=differentiable))
        self._leaves[name] = node.index
        return node

    def constant(self, value, name: str | None = None) -> Node:
        node = self._append(_Record("const", (), name=name))
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            arr = arr.astype(DTYPE, copy=False)
        self._values[node.index] = arr
        return node

    def output(self, name: str, node: Node) -> Node:
        self._check_owned(node)
        self._outputs[name] = node.index
        self._schedule = None
        return node

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaves)

    def _append(self, rec: _Record) -> Node:
        self._records.append(rec)
        self._values.append(None)
        self._caches.append(None)
        self._schedule = None
        return Node(self, len(self._records) - 1)

    def _check_owned(self, node: Node):
        if node.graph is not self:
            raise GraphError("node belongs to a different graph")

    def _lift(self, x) -> int:
        if isinstance(x, Node):
            self._check_owned(x)
            return x.index
        return self.constant(np.asarray(x, dtype=DTYPE)).index

    def _op(self, op: str, args, **attrs) -> Node:
        parents = tuple(self._lift(a) for a in args)
        return self._append(_Record(op, parents, attrs))

    def _describe(self, i: int) -> str:
        rec = self._records[i]
        label = f" {rec.name!r}" if rec.name else ""
        return f"node #{i} <{rec.op}{label}>"

    # -- evaluation ---------------------------------------------------
    def _needed(self) -> list[int]:
        if self._schedule is None:
            targets = list(self._outputs.values()) or [len(self._records) - 1]
            keep = np.zeros(len(self._records), dtype=bool)
            for t in targets:
                keep[t] = True
            for i in range(len(self._records) - 1, -1, -1):
                if keep[i]:
                    for p in self._records[i].parents:
                        keep[p] = True
            self._schedule = [i for i in range(len(self._records)) if keep[i]]
        return self._schedule

    def forward(self, inputs: dict | None = None) -> dict[str, np.ndarray]:
        """Bind leaves from ``inputs``, evaluate, and return named outputs."""
        inputs = dict(inputs or {})
        unknown = set(inputs) - set(self._leaves)
        if unknown:
            raise GraphError(f"unknown leaves: {sorted(unknown)}")
        for i in self._needed():
            rec = self._records[i]
            if rec.op == "const":
                continue
            if rec.op == "leaf":
                if rec.name not in inputs:
                    raise GraphError(f"leaf {rec.name!r} is not bound")
                v = np.asarray(inputs[rec.name])
                if v.dtype.kind in "fc" or rec.differentiable:
                    v = v.astype(DTYPE, copy=False)
                self._values[i] = v
                continue
            args = [self._values[p] for p in rec.parents]
            try:
                # non-finite results are reported below, so numpy's own warnings are redundant
                with np.errstate(all="ignore"):
                    out, cache = _FORWARD[rec.op](args, rec.attrs)
            except ShapeError as exc:
                raise ShapeError(f"{self._describe(i)}: {exc}") from None
            except ValueError as exc:
                shapes = [np.shape(a) for a in args]
                raise ShapeError(f"{self._describe(i)}: operands {shapes}: {exc}") from None
            if self.check_finite and not np.all(np.isfinite(out)):
                raise NumericalError(f"{self._describe(i)} produced non-finite values")
            self._values[i] = out
            self._caches[i] = cache
        return {k: self._values[i] for k, i in self._outputs.items()}

    def gradient(self, output: str, wrt) -> dict[str, np.ndarray]:
        """Gradient of the scalar output ``output`` w.r.t. the named leaves."""
        if output not in self._outputs:
            raise GraphError(f"unknown output {output!r}")
        root = self._outputs[output]
        if self._values[root] is None:
            raise GraphError("forward() must run before gradient()")
        if np.size(self._values[root]) != 1:
            raise GraphError(
                f"output {output!r} has shape {np.shape(self._values[root])}; gradient needs a scalar"
            )
        wrt = [wrt] if isinstance(wrt, str) else list(wrt)
        for name in wrt:
            if name not in self._leaves:
                raise GraphError(f"unknown leaf {name!r}")
            if not self._records[self._leaves[name]].differentiable:
                raise GraphError(f"leaf {name!r} is not marked differentiable")

        # only propagate along paths that reach a requested leaf
        n = root + 1
        live = np.zeros(n, dtype=bool)
        for name in wrt:
            if self._leaves[name] < n:
                live[self._leaves[name]] = True
        for i in range(n):
            if not live[i] and any(live[p] for p in self._records[i].parents):
                live[i] = True

        grads: dict[int, np.ndarray] = {root: np.ones_like(self._values[root])}
        for i in range(root, -1, -1):
            if i not in grads or not live[i]:
                continue
            rec = self._records[i]
            if not rec.parents:
                continue
            g = grads.pop(i)
            args = [self._values[p] for p in rec.parents]
            need = [bool(live[p]) for p in rec.parents]
            pgrads = _BACKWARD[rec.op](g, args, self._values[i], self._caches[i], rec.attrs, need)
            for p, pg, nd in zip(rec.parents, pgrads, need):
                if not nd or pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        out = {}
        for name in wrt:
            idx = self._leaves[name]
            val = self._values[idx]
            out[name] = grads.get(idx, np.zeros(np.shape(val), dtype=DTYPE))
        return out


def forward(graph: Graph, inputs: dict | None = None) -> dict[str, np.ndarray]:
    return graph.forward(inputs)


def gradient(graph: Graph, output: str, wrt) -> dict[str, np.ndarray]:
    return graph.gradient(output, wrt)


# -- operation constructors ----------------------------------------------


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise GraphError("at least one operand must be a graph node")


def elementwise_pow(x: Node, k: int) -> Node:
    """Elementwise ``x**k`` for a nonnegative integer ``k`` (``k=0`` gives ones)."""
    if int(k) != k or k < 0:
        raise ValueError(f"power must be a nonnegative integer, got {k!r}")
    return x.graph._op("pow", (x,), k=int(k))


def sqrt(x: Node) -> Node:
    return x.graph._op("sqrt", (x,))


def absolute(x: Node) -> Node:
    """|x| with subgradient 0 at 0."""
    return x.graph._op("abs", (x,))


def relu(x: Node) -> Node:
    return x.graph._op("relu", (x,))


def maximum(a, b) -> Node:
    """Elementwise max; on exact ties the gradient goes to ``a``."""
    return _graph_of(a, b)._op("maximum", (a, b))


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    return x.graph._op("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    return x.graph._op("mean", (x,), axis=axis, keepdims=keepdims)


def amax(x: Node, axis: int = -1) -> Node:
    """Max over one axis; ties route the gradient to the lowest index."""
    return x.graph._op("amax", (x,), axis=axis)


def l2norm(x: Node, axis: int = -1) -> Node:
    """Euclidean norm over one axis, with zero subgradient at the origin."""
    return x.graph._op("l2norm", (x,), axis=axis)


def reshape(x: Node, shape) -> Node:
    return x.graph._op("reshape", (x,), shape=tuple(shape))


def flatten(x: Node) -> Node:
    """Collapse every axis after the first (batch) axis."""
    return x.graph._op("flatten", (x,))


def matmul(x: Node, w) -> Node:
    """``(B, D) @ (D, U)``."""
    return _graph_of(x, w)._op("matmul", (x, w))


def conv1d(x, w) -> Node:
    """Valid, stride-1 cross-correlation: ``(B, C, T) * (F, C, K) -> (B, F, T-K+1)``."""
    return _graph_of(x, w)._op("conv1d", (x, w))


def maxpool1d(x: Node, width: int) -> Node:
    """Non-overlapping max pooling over the last axis; a trailing remainder is dropped."""
    return x.graph._op("maxpool1d", (x,), width=int(width))


def take(x: Node, indices) -> Node:
    """``take_along_axis(x, indices, axis=-1)``; indices are not differentiated."""
    g = x.graph
    if not isinstance(indices, Node):
        indices = g.constant(np.asarray(indices, dtype=np.intp), name="__index__")
    return g._op("take", (x, indices))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Per-row cross-entropy of softmax(logits) against integer labels."""
    g = logits.graph
    if not isinstance(labels, Node):
        labels = g.constant(np.asarray(labels, dtype=np.intp), name="__index__")
    return g._op("xent", (logits, labels))


# -- kernels ----------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _f_add(a, at):
    return a[0] + a[1], None


def _b_add(g, a, out, c, at, need):
    return (_unbroadcast(g, np.shape(a[0])) if need[0] else None,
            _unbroadcast(g, np.shape(a[1])) if need[1] else None)


def _f_sub(a, at):
    return a[0] - a[1], None


def _b_sub(g, a, out, c, at, need):
    return (_unbroadcast(g, np.shape(a[0])) if need[0] else None,
            _unbroadcast(-g, np.shape(a[1])) if need[1] else None)


def _f_mul(a, at):
    return a[0] * a[1], None


def _b_mul(g, a, out, c, at, need):
    return (_unbroadcast(g * a[1], np.shape(a[0])) if need[0] else None,
            _unbroadcast(g * a[0], np.shape(a[1])) if need[1] else None)


def _f_div(a, at):
    return a[0] / a[1], None


def _b_div(g, a, out, c, at, need):
    return (_unbroadcast(g / a[1], np.shape(a[0])) if need[0] else None,
            _unbroadcast(-g * out / a[1], np.shape(a[1])) if need[1] else None)


def _f_neg(a, at):
    return -a[0], None


def _b_neg(g, a, out, c, at, need):
    return (-g,)


def _f_pow(a, at):
    k = at["k"]
    x = a[0]
    if k == 0:
        return np.ones_like(x, dtype=DTYPE), None
    if k == 1:
        return x.copy(), None
    return x ** k, None


def _b_pow(g, a, out, c, at, need):
    k = at["k"]
    if k == 0:
        return (np.zeros_like(g),)
    if k == 1:
        return (g,)
    return (g * k * a[0] ** (k - 1),)


def _f_sqrt(a, at):
    if np.any(a[0] < 0):
        raise NumericalError("sqrt of a negative value")
    return np.sqrt(a[0]), None


def _b_sqrt(g, a, out, c, at, need):
    with np.errstate(divide="ignore"):
        return (g * 0.5 / out,)


def _f_abs(a, at):
    return np.abs(a[0]), None


def _b_abs(g, a, out, c, at, need):
    return (g * np.sign(a[0]),)


def _f_relu(a, at):
    return np.maximum(a[0], 0.0), None


def _b_relu(g, a, out, c, at, need):
    return (g * (a[0] > 0),)


def _f_maximum(a, at):
    left = a[0] >= a[1]
    return np.where(left, a[0], a[1]), left


def _b_maximum(g, a, out, left, at, need):
    return (_unbroadcast(np.where(left, g, 0.0), np.shape(a[0])) if need[0] else None,
            _unbroadcast(np.where(left, 0.0, g), np.shape(a[1])) if need[1] else None)


def _f_sum(a, at):
    return np.sum(a[0], axis=at["axis"], keepdims=at["keepdims"]), None


def _b_sum(g, a, out, c, at, need):
    return (_expand(g, a[0].shape, at["axis"], at["keepdims"]).copy(),)


def _f_mean(a, at):
    return np.mean(a[0], axis=at["axis"], keepdims=at["keepdims"]), None


def _b_mean(g, a, out, c, at, need):
    x = a[0]
    ax = at["axis"]
    count = x.size if ax is None else np.prod([x.shape[i] for i in np.atleast_1d(ax)])
    return (_expand(g, x.shape, ax, at["keepdims"]) / count,)


def _f_amax(a, at):
    x = a[0]
    ax = at["axis"] % x.ndim
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    return np.take_along_axis(x, idx, axis=ax).squeeze(ax), (idx, ax)


def _b_amax(g, a, out, cache, at, need):
    idx, ax = cache
    gx = np.zeros_like(a[0])
    np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
    return (gx,)


def _f_l2norm(a, at):
    return np.sqrt(np.sum(a[0] ** 2, axis=at["axis"])), None


def _b_l2norm(g, a, out, c, at, need):
    ax = at["axis"]
    safe = np.where(out > 0, out, 1.0)
    scale = np.where(out > 0, g / safe, 0.0)
    return (a[0] * np.expand_dims(scale, ax),)


def _f_reshape(a, at):
    return a[0].reshape(at["shape"]), None


def _b_reshape(g, a, out, c, at, need):
    return (g.reshape(a[0].shape),)


def _f_flatten(a, at):
    x = a[0]
    return x.reshape(x.shape[0], -1), None


def _f_matmul(a, at):
    x, w = a
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul expects (B,D)@(D,U), got {x.shape} @ {w.shape}")
    return x @ w, None


def _b_matmul(g, a, out, c, at, need):
    x, w = a
    return (g @ w.T if need[0] else None, x.T @ g if need[1] else None)


def _f_conv1d(a, at):
    x, w = a
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d expects (B,C,T) and (F,C,K), got {x.shape} and {w.shape}")
    k = w.shape[2]
    if k > x.shape[2]:
        raise ShapeError(f"kernel width {k} exceeds series length {x.shape[2]}")
    windows = sliding_window_view(x, k, axis=2)  # (B, C, L, K)
    out = np.tensordot(windows, w, axes=([1, 3], [1, 2]))  # (B, L, F)
    return np.ascontiguousarray(out.transpose(0, 2, 1)), windows


def _b_conv1d(g, a, out, windows, at, need):
    x, w = a
    gx = gw = None
    if need[1]:
        gw = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
    if need[0]:
        k = w.shape[2]
        length = g.shape[2]
        gx = np.zeros_like(x)
        for j in range(k):
            gx[:, :, j:j + length] += np.einsum("bfl,fc->bcl", g, w[:, :, j], optimize=True)
    return gx, gw


def _f_maxpool(a, at):
    x = a[0]
    w = at["width"]
    b, f, length = x.shape
    m = length // w
    if m == 0:
        raise ShapeError(f"pool width {w} exceeds length {length}")
    # argmax is recomputed in the backward pass; inference never needs it
    out = x[:, :, 0: m * w: w].copy()
    for j in range(1, w):
        np.maximum(out, x[:, :, j: m * w: w], out=out)
    return out, None


def _b_maxpool(g, a, out, cache, at, need):
    x = a[0]
    w = at["width"]
    b, f, length = x.shape
    m = length // w
    idx = np.argmax(x[:, :, : m * w].reshape(b, f, m, w), axis=3)[..., None]
    blocks = np.zeros((b, f, m, w), dtype=DTYPE)
    np.put_along_axis(blocks, idx, g[..., None], axis=3)
    gx = np.zeros_like(x)
    gx[:, :, : m * w] = blocks.reshape(b, f, m * w)
    return (gx,)


def _f_take(a, at):
    return np.take_along_axis(a[0], a[1].astype(np.intp), axis=-1), None


def _b_take(g, a, out, c, at, need):
    x, idx = a
    idx = np.broadcast_to(idx.astype(np.intp), g.shape)
    gx = np.zeros_like(x)
    lead = np.indices(idx.shape)[:-1]
    np.add.at(gx, (*lead, idx), g)
    return gx, None


def _f_xent(a, at):
    z, y = a
    y = y.astype(np.intp)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    return loss, logp


def _b_xent(g, a, out, logp, at, need):
    y = a[1].astype(np.intp)
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
    return (g[..., None] * (p - onehot), None)


_FORWARD = {
    "add": _f_add, "sub": _f_sub, "mul": _f_mul, "div": _f_div, "neg": _f_neg,
    "pow": _f_pow, "sqrt": _f_sqrt, "abs": _f_abs, "relu": _f_relu,
    "maximum": _f_maximum, "sum": _f_sum, "mean": _f_mean, "amax": _f_amax,
    "l2norm": _f_l2norm, "reshape": _f_reshape, "flatten": _f_flatten,
    "matmul": _f_matmul, "conv1d": _f_conv1d, "maxpool1d": _f_maxpool,
    "take": _f_take, "xent": _f_xent,
}

_BACKWARD = {
    "add": _b_add, "sub": _b_sub, "mul": _b_mul, "div": _b_div, "neg": _b_neg,
    "pow": _b_pow, "sqrt": _b_sqrt, "abs": _b_abs, "relu": _b_relu,
    "maximum": _b_maximum, "sum": _b_sum, "mean": _b_mean, "amax": _b_amax,
    "l2norm": _b_l2norm, "reshape": _b_reshape, "flatten": _b_reshape,
    "matmul": _b_matmul, "conv1d": _b_conv1d, "maxpool1d": _b_maxpool,
    "take": _b_take, "xent": _b_xent,
}
