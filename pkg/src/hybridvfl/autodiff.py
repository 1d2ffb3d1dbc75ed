"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record onto the active :class:`Graph` (entered with ``with``).
Outside a graph they just compute values, which is what inference uses.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_(x * x)
    >>> backward(g, loss)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "DimensionError",
    "NumericDomainError",
    "ContractError",
    "OracleInvalidError",
    "backward",
    "vjp",
    "finite_diff_check",
    "matmul",
    "affine",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clip",
    "maximum",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "stack",
    "concat",
    "take",
    "softmax",
    "layer_norm_op",
    "conv2d_op",
    "max_pool2_op",
]

_ACTIVE_GRAPH: contextvars.ContextVar[Graph | None] = contextvars.ContextVar(
    "hybridvfl_active_graph", default=None
)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ArithmeticError):
    """An operation left the finite domain (division by zero, log of <= 0, NaN/Inf)."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


class OracleInvalidError(RuntimeError):
    """The finite-difference oracle cannot be trusted for this function."""


class Tensor:
    """A float64 ndarray plus a ``requires_grad`` flag.

    Equality is identity so tensors can key gradient tables.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: Tensor
    rule: BackwardRule | None = None


@dataclass
class Graph:
    """Append-only tape of recorded operations.

    Node inputs always point at earlier nodes, so reverse insertion order is a
    valid topological order for the backward sweep.
    """

    nodes: list[Node] = field(default_factory=list)
    _index: dict[int, int] = field(default_factory=dict, repr=False)
    _tokens: list = field(default_factory=list, repr=False)

    def __enter__(self) -> Graph:
        self._tokens.append(_ACTIVE_GRAPH.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_GRAPH.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, t: Tensor) -> int | None:
        return self._index.get(id(t))

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._index

    def _leaf(self, t: Tensor) -> int:
        nid = self._index.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t))
            self._index[id(t)] = nid
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, rule: BackwardRule) -> None:
        ids = []
        for t in inputs:
            if t.requires_grad or id(t) in self._index:
                ids.append(self._leaf(t))
            else:
                ids.append(-1)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, tuple(ids), out, rule))
        self._index[id(out)] = nid


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, kind: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericDomainError(f"{kind} produced a non-finite value")
    return arr


def _emit(kind: str, inputs: Sequence[Tensor], data: np.ndarray, rule: BackwardRule) -> Tensor:
    _finite(data, kind)
    graph = _ACTIVE_GRAPH.get()
    needs = any(t.requires_grad for t in inputs) or (
        graph is not None and any(graph.tracks(t) for t in inputs)
    )
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    if graph is not None and needs:
        graph.record(kind, inputs, out, rule)
    return out


# ----------------------------------------------------------------------------
# backward


class Gradients(dict):
    """Mapping ``Tensor -> ndarray`` of gradients for requires_grad leaves."""


def vjp(graph: Graph, seeds: Mapping[Tensor, np.ndarray], wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Vector-Jacobian product: push ``seeds`` (output -> cotangent) back through ``graph``.

    Returns gradients for every requires_grad leaf on the tape, plus any
    extra tensors listed in ``wrt``.
    """
    n = len(graph.nodes)
    grads: list[np.ndarray | None] = [None] * n
    for t, g in seeds.items():
        nid = graph.node_id(t)
        if nid is None:
            raise ContractError(f"seed tensor {t!r} is not on this graph")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != t.shape:
            raise DimensionError(f"seed shape {list(g.shape)} != tensor shape {list(t.shape)}")
        grads[nid] = g.copy() if grads[nid] is None else grads[nid] + g

    for nid in range(n - 1, -1, -1):
        node = graph.nodes[nid]
        g = grads[nid]
        if g is None or node.rule is None:
            continue
        in_grads = node.rule(g)
        for src, gi in zip(node.inputs, in_grads):
            if src < 0 or gi is None:
                continue
            if grads[src] is None:
                grads[src] = gi
            else:
                grads[src] = grads[src] + gi

    table = Gradients()
    for nid, node in enumerate(graph.nodes):
        if node.kind == "leaf" and node.output.requires_grad:
            g = grads[nid]
            table[node.output] = np.zeros_like(node.output.data) if g is None else g
    for t in wrt or ():
        nid = graph.node_id(t)
        if nid is None:
            raise ContractError(f"{t!r} is not on this graph")
        g = grads[nid]
        table[t] = np.zeros_like(t.data) if g is None else g
    return table


def backward(graph: Graph, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Reverse sweep from a scalar ``loss`` seeded with 1.0."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss (shape [] or [1]), got {list(loss.shape)}")
    return vjp(graph, {loss: np.ones_like(loss.data)}, wrt=wrt)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
) -> float:
    """Compare autodiff against central differences.

    Returns ``max |g_ad - g_fd| / max(1, |g_fd|)`` over all coordinates of ``x``.
    ``f`` must map ``x`` to a scalar tensor.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    base = np.array(x.data, copy=True)

    def value(arr: np.ndarray) -> float:
        return float(f(Tensor(arr)).data.reshape(-1)[0])

    v0 = value(base)
    if value(base) != v0:
        raise OracleInvalidError("f gave two different values at the same point")

    probe = Tensor(base.copy(), requires_grad=True)
    with Graph() as g:
        out = f(probe)
    g_ad = backward(g, out)[probe]

    g_fd = np.empty_like(base)
    flat = g_fd.reshape(-1)
    for i in range(base.size):
        hi = base.copy().reshape(-1)
        lo = base.copy().reshape(-1)
        hi[i] += epsilon
        lo[i] -= epsilon
        flat[i] = (value(hi.reshape(base.shape)) - value(lo.reshape(base.shape))) / (2 * epsilon)
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd)))) if base.size else 0.0


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; any leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, rule)


def affine(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w + bias`` for x of shape [..., in]; bias is added to every row."""
    x = _as_tensor(x)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine shape mismatch: {list(x.shape)} x {list(w.shape)}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {list(bias.shape)} does not match weight {list(w.shape)}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(*xd.shape[:-1], wd.shape[1])

    def rule(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("affine", inputs, out, rule)


# ----------------------------------------------------------------------------
# elementwise


def _binary(kind: str, a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise DimensionError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} differ")
        ad, bd = a.data, b.data
        if kind == "add":
            return _emit(kind, (a, b), ad + bd, lambda g: (g, g))
        if kind == "sub":
            return _emit(kind, (a, b), ad - bd, lambda g: (g, -g))
        if kind == "mul":
            return _emit(kind, (a, b), ad * bd, lambda g: (g * bd, g * ad))
        if kind == "div":
            if np.any(bd == 0):
                raise NumericDomainError("division by zero")
            return _emit(kind, (a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))
    else:
        s = float(b)
        ad = a.data
        if kind == "add":
            return _emit(kind, (a,), ad + s, lambda g: (g,))
        if kind == "sub":
            return _emit(kind, (a,), ad - s, lambda g: (g,))
        if kind == "mul":
            return _emit(kind, (a,), ad * s, lambda g: (g * s,))
        if kind == "div":
            if s == 0:
                raise NumericDomainError("division by zero")
            return _emit(kind, (a,), ad / s, lambda g: (g / s,))
    raise ContractError(f"unknown binary op {kind!r}")


def add(a, b) -> Tensor:
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def div(a, b) -> Tensor:
    return _binary("div", a, b)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor, clamp: float | None = None) -> Tensor:
    """Natural log. With ``clamp``, inputs below it are raised to it and get zero gradient."""
    ad = a.data
    if clamp is None:
        if np.any(ad <= 0):
            raise NumericDomainError("log of a non-positive value")
        return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))
    inside = ad > clamp
    safe = np.where(inside, ad, clamp)
    return _emit("log", (a,), np.log(safe), lambda g: (np.where(inside, g / safe, 0.0),))


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(ad)
    if np.any(out == 0):
        raise NumericDomainError("sqrt at 0 has no finite derivative; clamp first")
    return _emit("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * mask,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; clamped entries pass no gradient."""
    mask = a.data > floor
    return _emit("maximum", (a,), np.where(mask, a.data, floor), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add/sub/mul/div take a second operand, relu/exp/log do not."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b) if kind in ("add", "sub", "mul", "div") else fn(a)


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _emit(
        "sum", (a,), a.data.sum(axis=ax),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
        if n == 0:
            raise ContractError("mean of an empty tensor")
        return _emit("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(shape, g / n),))
    ax = axis % a.ndim
    n = shape[ax]
    if n == 0:
        raise ContractError("mean over an empty axis")
    return _emit(
        "mean", (a,), a.data.mean(axis=ax),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, ax), shape).copy(),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {list(old)} to {list(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), lambda g: (g.transpose(inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {[list(s) for s in shapes]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def rule(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return _emit("stack", tuple(tensors), out, rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise DimensionError(f"concat: {list(t.shape)} incompatible with {list(ref.shape)} on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))]

    return _emit("concat", tuple(tensors), out, rule)


def take(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit("take", (a,), a.data[idx].copy(), rule)


# ----------------------------------------------------------------------------
# fused nn primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), p, rule)


def layer_norm_op(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params must have shape [{d}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit("layer_norm", (x, gain, bias), out, rule)


def conv2d_op(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [b,c,h,w] with filters w [c',c,kh,kw] via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {list(x.shape)} and {list(w.shape)}")
    b, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {ci}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp or (hp - kh) % stride or (wp - kw) % stride:
        raise ContractError(
            f"conv2d output size is not an integer for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [b, oh, ow, c*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh, ow, c * kh * kw)
    wmat = w.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols.reshape(-1, c * kh * kw)).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", inputs, out, rule)


def max_pool2_op(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool on [b,c,h,w]; ties route gradient to the first max."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2 expects 4-d input, got {list(x.shape)}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _emit("max_pool2", (x,), out, rule)
