"""Reverse-mode tape over numpy values with a differentiable backward pass.

Every adjoint the backward sweep builds is expressed through the same
recorded operations as the forward pass, so when recording is left on
the backward computation lands on the tape too. A second reverse sweep
seeded with ones at a gradient vector g_p then computes d(sum g_p)/dp.
For a 1-D parameter p of length C that vector is exactly H_pp @ 1, the
row sums of p's Hessian block; it coincides with the block's diagonal
whenever the block is diagonal, as it is for the scale and shift of a
terminal batch-norm layer under an elementwise loss.

Tapes are define-by-run and single-use: build a fresh Graph per step.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeMismatchError,
    broadcast_shape,
    conv_pads,
    elementwise,
    fold2d,
    unfold2d,
)
from .tensor import matmul as _matmul_np

CHANNELWISE_1D = "channelwise-1d"
DENSE = "dense"


class NonScalarLossError(ValueError):
    pass


class MissingDifferentiableGraphError(RuntimeError):
    pass


class WrongKindError(TypeError):
    pass


class Graph:
    """Append-only tape. Node ids are topologically ordered (inputs precede
    consumers) and a backward pass visits them in strictly reverse id order.

    While `recording` is False, newly built Variables get id -1 and are not
    appended: their values are still computed, but no later sweep can
    traverse them."""

    def __init__(self):
        self.nodes: list[Variable] = []
        self.recording = True
        self.retained: dict[int, "Variable"] | None = None

    def _append(self, v: "Variable") -> int:
        if not self.recording:
            return -1
        self.nodes.append(v)
        return len(self.nodes) - 1

    def variable(self, value, requires_grad: bool = False, kind: str | None = None) -> "Variable":
        return Variable(self, value, requires_grad, kind=kind, op="leaf")

    def constant(self, value) -> "Variable":
        return Variable(self, value, False, op="const")

    def release(self) -> None:
        """Severs every node's tape edges and drops the node list. Adjoint
        attributes and self-capturing vjp closures (exp, sqrt, recip) tie the
        forward and backward webs into reference cycles that refcounting
        cannot free, so a finished tape otherwise lives until a full gc pass.
        No sweep may run afterwards."""
        for v in self.nodes:
            v.adjoint = None
            v.vjp = None
            v.parents = ()
        self.nodes.clear()
        self.retained = None
        self.recording = False

    def __len__(self) -> int:
        return len(self.nodes)


class Variable:
    """One tape node: forward value, parent edges, a vjp closure that maps
    an output adjoint to per-parent contributions, and an adjoint slot
    filled by the most recent backward pass."""

    __slots__ = ("graph", "id", "value", "requires_grad", "parents", "vjp", "adjoint", "kind", "op")

    def __init__(self, graph, value, requires_grad, parents=(), vjp=None, kind=None, op=""):
        self.graph = graph
        self.value = np.asarray(value)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.vjp = vjp if self.requires_grad else None
        self.adjoint: Variable | None = None
        self.kind = kind
        self.op = op
        self.id = graph._append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __add__(self, other):
        return cadd(self, other) if isinstance(other, (int, float)) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return cadd(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __rsub__(self, other):
        return cadd(neg(self), other)

    def __mul__(self, other):
        return cmul(self, other) if isinstance(other, (int, float)) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return cmul(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __rtruediv__(self, other):
        return cmul(recip(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Variable(id={self.id}, op={self.op!r}, shape={self.shape})"


def _op(graph: Graph, value, parents, vjp, op: str) -> Variable:
    needs = any(p.requires_grad for p in parents)
    return Variable(graph, value, needs, parents, vjp, op=op)


# ---------------------------------------------------------------------------
# primitive ops; every vjp is itself built from these ops so that a recorded
# backward pass stays differentiable


def _align(a: Variable, b: Variable) -> tuple[Variable, Variable]:
    if a.shape == b.shape:
        return a, b
    s = broadcast_shape(a.shape, b.shape)
    if a.shape != s:
        a = broadcast_to(a, s)
    if b.shape != s:
        b = broadcast_to(b, s)
    return a, b


def add(a: Variable, b: Variable) -> Variable:
    a, b = _align(a, b)

    def vjp(g):
        return [g if a.requires_grad else None, g if b.requires_grad else None]

    return _op(a.graph, a.value + b.value, (a, b), vjp, "add")


def sub(a: Variable, b: Variable) -> Variable:
    a, b = _align(a, b)

    def vjp(g):
        return [g if a.requires_grad else None, neg(g) if b.requires_grad else None]

    return _op(a.graph, a.value - b.value, (a, b), vjp, "sub")


def neg(a: Variable) -> Variable:
    def vjp(g):
        return [neg(g)]

    return _op(a.graph, -a.value, (a,), vjp, "neg")


def mul(a: Variable, b: Variable) -> Variable:
    a, b = _align(a, b)

    def vjp(g):
        return [
            mul(g, b) if a.requires_grad else None,
            mul(g, a) if b.requires_grad else None,
        ]

    return _op(a.graph, a.value * b.value, (a, b), vjp, "mul")


def recip(a: Variable) -> Variable:
    out = _op(a.graph, elementwise("recip", a.value), (a,), None, "recip")
    if out.requires_grad:

        def vjp(g):
            return [neg(mul(g, mul(out, out)))]

        out.vjp = vjp
    return out


def div(a: Variable, b: Variable) -> Variable:
    return mul(a, recip(b))


def cadd(a: Variable, c) -> Variable:
    """Add a non-differentiable constant (scalar or array)."""
    value = a.value + c
    if value.shape != a.shape:
        raise ShapeMismatchError(
            f"constant of shape {np.shape(c)} widens variable of shape {a.shape}"
        )

    def vjp(g):
        return [g]

    return _op(a.graph, value, (a,), vjp, "cadd")


def cmul(a: Variable, c) -> Variable:
    """Multiply by a non-differentiable constant (scalar or array). The
    constant is invisible to differentiation: this is how zero second
    derivatives of relu/abs kinks enter the tape."""
    value = a.value * c
    if value.shape != a.shape:
        raise ShapeMismatchError(
            f"constant of shape {np.shape(c)} widens variable of shape {a.shape}"
        )

    def vjp(g):
        return [cmul(g, c)]

    return _op(a.graph, value, (a,), vjp, "cmul")


def sqrt(a: Variable) -> Variable:
    out = _op(a.graph, elementwise("sqrt", a.value), (a,), None, "sqrt")
    if out.requires_grad:

        def vjp(g):
            return [mul(g, cmul(recip(out), 0.5))]

        out.vjp = vjp
    return out


def exp(a: Variable) -> Variable:
    out = _op(a.graph, elementwise("exp", a.value), (a,), None, "exp")
    if out.requires_grad:

        def vjp(g):
            return [mul(g, out)]

        out.vjp = vjp
    return out


def log(a: Variable) -> Variable:
    def vjp(g):
        return [mul(g, recip(a))]

    return _op(a.graph, elementwise("log", a.value), (a,), vjp, "log")


def relu(a: Variable) -> Variable:
    mask = (a.value > 0).astype(a.value.dtype)

    def vjp(g):
        return [cmul(g, mask)]

    return _op(a.graph, elementwise("relu", a.value), (a,), vjp, "relu")


def abs_(a: Variable) -> Variable:
    sign = np.sign(a.value).astype(a.value.dtype)

    def vjp(g):
        return [cmul(g, sign)]

    return _op(a.graph, elementwise("abs", a.value), (a,), vjp, "abs")


def matmul(a: Variable, b: Variable) -> Variable:
    value = _matmul_np(a.value, b.value)

    def vjp(g):
        return [
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ]

    return _op(a.graph, value, (a, b), vjp, "matmul")


def transpose(a: Variable) -> Variable:
    if a.value.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a 2-D value, got {a.shape}")

    def vjp(g):
        return [transpose(g)]

    return _op(a.graph, a.value.T, (a,), vjp, "transpose")


def permute(a: Variable, axes: tuple) -> Variable:
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return [permute(g, inv)]

    return _op(a.graph, np.transpose(a.value, axes), (a,), vjp, "permute")


def reshape(a: Variable, shape: tuple) -> Variable:
    src = a.shape

    def vjp(g):
        return [reshape(g, src)]

    return _op(a.graph, a.value.reshape(shape), (a,), vjp, "reshape")


def broadcast_to(a: Variable, shape: tuple) -> Variable:
    src = a.shape

    def vjp(g):
        return [_sum_to(g, src)]

    return _op(a.graph, np.broadcast_to(a.value, shape), (a,), vjp, "broadcast")


def sum_axes(a: Variable, axes: tuple) -> Variable:
    axes = tuple(int(ax) % a.value.ndim for ax in axes)
    keep = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    src = a.shape

    def vjp(g):
        return [broadcast_to(reshape(g, keep), src)]

    return _op(a.graph, np.sum(a.value, axis=axes), (a,), vjp, "sum")


def sum_all(a: Variable) -> Variable:
    return sum_axes(a, tuple(range(a.value.ndim))) if a.value.ndim else a


def mean_axes(a: Variable, axes: tuple) -> Variable:
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return cmul(sum_axes(a, axes), 1.0 / count)


def _sum_to(g: Variable, shape: tuple) -> Variable:
    """Reduce g back to `shape` by summing broadcast axes; adjoint of
    broadcast_to."""
    if g.shape == shape:
        return g
    ndiff = g.value.ndim - len(shape)
    axes = list(range(ndiff))
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i + ndiff] != 1:
            axes.append(i + ndiff)
    out = sum_axes(g, tuple(axes)) if axes else g
    return reshape(out, shape) if out.shape != shape else out


def unfold(x: Variable, kh: int, kw: int, pads: tuple) -> Variable:
    src = x.shape

    def vjp(g):
        return [fold(g, src, kh, kw, pads)]

    return _op(x.graph, unfold2d(x.value, kh, kw, pads), (x,), vjp, "unfold")


def fold(cols: Variable, x_shape: tuple, kh: int, kw: int, pads: tuple) -> Variable:
    def vjp(g):
        return [unfold(g, kh, kw, pads)]

    return _op(cols.graph, fold2d(cols.value, x_shape, kh, kw, pads), (cols,), vjp, "fold")


def conv2d(x: Variable, w: Variable, padding: str = "valid") -> Variable:
    """Stride-1 cross-correlation as unfold + matmul, so both backward
    passes reduce to the linear-op adjoint pairs above."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeMismatchError(f"conv2d needs 4-D input/kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    pads = conv_pads(h, wd, kh, kw, padding)
    oh = h + pads[0] + pads[1] - kh + 1
    ow = wd + pads[2] + pads[3] - kw + 1
    cols = unfold(x, kh, kw, pads)
    wmat = reshape(w, (cout, cin * kh * kw))
    out = matmul(cols, transpose(wmat))
    return permute(reshape(out, (n, oh, ow, cout)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# backward machinery


def _sweep(graph: Graph, seeds: dict[int, Variable], publish: bool) -> dict[int, Variable]:
    """Reverse accumulation from seed adjoints. Visits recorded nodes in
    strictly decreasing id order; each node's vjp fires exactly once, so
    every tape edge receives exactly one adjoint contribution."""
    adj = dict(seeds)
    if not adj:
        return adj
    for nid in range(max(adj), -1, -1):
        g = adj.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        if publish:
            node.adjoint = g
        if node.vjp is None:
            continue
        for p, c in zip(node.parents, node.vjp(g)):
            if c is None or not p.requires_grad or p.id < 0:
                continue
            prev = adj.get(p.id)
            adj[p.id] = c if prev is None else add(prev, c)
    return adj


def backward(loss: Variable, retain_differentiable: bool = False) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every requires_grad leaf, keyed by
    node id. With retain_differentiable the adjoint computation is itself
    recorded and the gradient Variables are kept on the graph, making a
    subsequent hessian_diag_1d call valid."""
    graph = loss.graph
    if loss.value.size != 1:
        raise NonScalarLossError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.id < 0:
        raise MissingDifferentiableGraphError("loss was built while recording was off")
    prev = graph.recording
    graph.recording = bool(retain_differentiable)
    try:
        seed = Variable(graph, np.ones_like(loss.value), False, op="const")
        adj = _sweep(graph, {loss.id: seed}, publish=True)
    finally:
        graph.recording = prev
    grads: dict[int, np.ndarray] = {}
    retained: dict[int, Variable] = {}
    for node in graph.nodes:
        if node.op == "leaf" and node.requires_grad:
            a = adj.get(node.id)
            grads[node.id] = np.zeros_like(node.value) if a is None else a.value.copy()
            if a is not None:
                retained[node.id] = a
    graph.retained = retained if retain_differentiable else None
    return grads


def hessian_diag_1d(loss: Variable, p: Variable) -> np.ndarray:
    """Channel-wise curvature of a 1-D parameter: seeds a second reverse
    sweep with ones at p's retained gradient, returning d(sum grad_p)/dp,
    i.e. the row sums H_pp @ 1 of p's exact Hessian block."""
    if p.kind != CHANNELWISE_1D or p.value.ndim != 1:
        raise WrongKindError(
            f"hessian_diag_1d needs a 1-D parameter tagged {CHANNELWISE_1D!r}, "
            f"got kind {p.kind!r} with shape {p.shape}"
        )
    graph = p.graph
    if loss.graph is not graph:
        raise MissingDifferentiableGraphError("loss and parameter live on different graphs")
    if graph.retained is None:
        raise MissingDifferentiableGraphError(
            "run backward(loss, retain_differentiable=True) on this graph first"
        )
    g_p = graph.retained.get(p.id)
    if g_p is None:
        return np.zeros_like(p.value)
    prev = graph.recording
    graph.recording = False
    try:
        seed = Variable(graph, np.ones_like(g_p.value), False, op="const")
        adj = _sweep(graph, {g_p.id: seed}, publish=False)
    finally:
        graph.recording = prev
    a = adj.get(p.id)
    return np.zeros_like(p.value) if a is None else np.array(a.value)


def zero_adjoints(graph: Graph) -> None:
    """Clear every adjoint slot and the retained-gradient registry; the
    tape itself stays valid for another backward pass."""
    for node in graph.nodes:
        node.adjoint = None
    graph.retained = None
