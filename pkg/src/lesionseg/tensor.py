"""Rank-4 float64 tensors with define-by-run reverse-mode differentiation.

Every tensor is NCHW-shaped; scalars are ``1x1x1x1``.  Each operation
records its inputs and a closure computing the vector-Jacobian product, and
node ids are drawn from a monotone counter, so sorting reachable nodes by
id gives a valid topological order of the graph.
"""

from __future__ import annotations

import itertools
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "DiffTensor",
    "GraphNode",
    "add",
    "affine",
    "backward",
    "clamp",
    "concat",
    "conv2d",
    "div",
    "log",
    "maxpool2x2",
    "mean",
    "mul",
    "relu",
    "sigmoid",
    "sum",
    "trace",
    "upsample_nearest_x2",
]

_node_ids = itertools.count()

# Largest double strictly below 1; keeps sigmoid outputs inside the open interval.
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DiffTensor:
    """A dense NCHW float64 array that participates in a differentiation graph.

    Leaf tensors created with ``requires_grad=True`` are parameters: they own
    a ``grad`` buffer (zeros until a backward pass reaches them) that
    accumulates across calls to :func:`backward` until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["DiffTensor", ...] = (),
        backward: Backward | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"DiffTensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = op
        self.parents = parents
        self._backward = backward
        self.grad = np.zeros_like(arr) if (self.requires_grad and not parents) else None

    @classmethod
    def param(cls, data) -> "DiffTensor":
        return cls(np.array(data, dtype=np.float64), requires_grad=True)

    @classmethod
    def constant(cls, data) -> "DiffTensor":
        return cls(data, requires_grad=False)

    @classmethod
    def scalar(cls, value: float, requires_grad: bool = False) -> "DiffTensor":
        return cls(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar: tensor-tensor uses the strict ops, numbers use affine.
    def __add__(self, other):
        if isinstance(other, DiffTensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, other)
        return affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __sub__(self, other):
        if isinstance(other, DiffTensor):
            return add(self, affine(other, -1.0, 0.0))
        return affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __truediv__(self, other):
        if isinstance(other, DiffTensor):
            return div(self, other)
        return affine(self, 1.0 / float(other), 0.0)


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[DiffTensor, ...], backward: Backward) -> DiffTensor:
    if any(p.requires_grad for p in parents):
        return DiffTensor(data, True, op=op, parents=parents, backward=backward)
    # Nothing upstream needs a gradient: drop the closure and its saved arrays.
    return DiffTensor(data, False, op=op)


def _check_same_shape(op: str, a: DiffTensor, b: DiffTensor) -> None:
    if a.shape != b.shape:
        bad = [ax for ax, (p, q) in zip("NCHW", zip(a.shape, b.shape)) if p != q]
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ on axes {', '.join(bad)}")


# ---------------------------------------------------------------------------
# Elementwise operations


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise sum.  ``b`` may also be a ``(1, C, 1, 1)`` bias."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.shape != a.shape and b.shape == (1, a.shape[1], 1, 1)
    if not bias:
        _check_same_shape("add", a, b)

    def _bw(g):
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias else g
        return g, gb

    return _make(a.data + b.data, "add", (a, b), _bw)


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def _bw(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _make(ad * bd, "mul", (a, b), _bw)


def div(a: DiffTensor, b: DiffTensor, zero_by_zero: float | None = None) -> DiffTensor:
    """Elementwise quotient.

    With ``zero_by_zero`` set, entries where both operands are exactly zero
    evaluate to that value and pass no gradient.  Any other zero divisor is
    a domain error.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    zero_den = bd == 0.0
    if zero_den.any():
        if zero_by_zero is None or np.any(ad[zero_den] != 0.0):
            raise DomainError("div: division by zero")
    safe_b = np.where(zero_den, 1.0, bd)
    out = np.where(zero_den, zero_by_zero if zero_by_zero is not None else 0.0, ad / safe_b)

    def _bw(g):
        ga = np.where(zero_den, 0.0, g / safe_b) if a.requires_grad else None
        gb = np.where(zero_den, 0.0, -g * ad / (safe_b * safe_b)) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), _bw)


def affine(x: DiffTensor, scale: float, shift: float) -> DiffTensor:
    """``scale * x + shift`` with Python-number coefficients."""
    x = _as_tensor(x)
    scale, shift = float(scale), float(shift)
    return _make(x.data * scale + shift, "affine", (x,), lambda g: (g * scale,))


def relu(x: DiffTensor) -> DiffTensor:
    x = _as_tensor(x)
    pos = x.data > 0.0
    return _make(np.where(pos, x.data, 0.0), "relu", (x,), lambda g: (g * pos,))


def sigmoid(x: DiffTensor) -> DiffTensor:
    """Logistic function, evaluated stably and kept inside the open interval (0, 1)."""
    x = _as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    np.clip(out, _TINY, _ONE_MINUS, out=out)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log(x: DiffTensor) -> DiffTensor:
    x = _as_tensor(x)
    d = x.data
    if np.any(d <= 0.0) or np.any(np.isnan(d)):
        raise DomainError("log: input must be strictly positive (clamp before taking logs)")
    return _make(np.log(d), "log", (x,), lambda g: (g / d,))


def clamp(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    x = _as_tensor(x)
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), "clamp", (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Structural operations


def concat(tensors: Sequence[DiffTensor], axis: int = 1) -> DiffTensor:
    """Concatenate along the channel axis (the only supported axis)."""
    if axis != 1:
        raise DimensionError("concat only supports the channel axis (axis=1)")
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat needs at least one tensor")
    n, _, h, w = ts[0].shape
    for t in ts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ts[0].shape} on axes N/H/W")
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]

    def _bw(g):
        return np.split(g, splits, axis=1)

    return _make(np.concatenate([t.data for t in ts], axis=1), "concat", ts, _bw)


def upsample_nearest_x2(x: DiffTensor) -> DiffTensor:
    x = _as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest_x2", (x,), _bw)


def maxpool2x2(x: DiffTensor) -> DiffTensor:
    """2x2 max pooling, stride 2.  Gradient goes to the first maximal cell."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H and W, got H={h}, W={w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        routed = (np.arange(4) == idx[..., None]) * g[..., None]
        return (routed.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _make(out, "maxpool2x2", (x,), _bw)


def sum(x: DiffTensor, per_image: bool = False) -> DiffTensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries (``1x1x1x1``) or of each image (``Nx1x1x1``)."""
    x = _as_tensor(x)
    shape = x.shape
    if per_image:
        out = x.data.sum(axis=(1, 2, 3), keepdims=True)
    else:
        out = np.full((1, 1, 1, 1), x.data.sum())
    return _make(out, "sum", (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: DiffTensor, per_image: bool = False) -> DiffTensor:
    x = _as_tensor(x)
    count = x.data[0].size if per_image else x.data.size
    return affine(sum(x, per_image=per_image), 1.0 / count, 0.0)


# ---------------------------------------------------------------------------
# Convolution


def conv2d(
    x: DiffTensor,
    weight: DiffTensor,
    bias: DiffTensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> DiffTensor:
    """2-D cross-correlation of an NCHW batch with an ``(O, C, k, k)`` kernel.

    Lowered to a single matrix product over an im2col buffer laid out as
    ``(C*k*k, N*Ho*Wo)``.  ``bias`` has shape ``(1, O, 1, 1)``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {k}x{k2} on axes H/W of weight")
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels (axis C) but weight expects {ci}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (1, o, 1, 1):
            raise DimensionError(f"conv2d: bias must have shape (1, {o}, 1, 1), got {bias.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input on axes H/W ({h}x{w}, pad {padding})")

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + hs : stride, j : j + ws : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data

    def _bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", parents, _bw)


# ---------------------------------------------------------------------------
# Graph traversal


class GraphNode(NamedTuple):
    node_id: int
    op: str
    input_ids: tuple[int, ...]


def _reachable(out: DiffTensor) -> list[DiffTensor]:
    seen: dict[int, DiffTensor] = {}
    stack = [out]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        stack.extend(t.parents)
    return sorted(seen.values(), key=lambda t: t.node_id)


def trace(out: DiffTensor) -> list[GraphNode]:
    """The differentiable subgraph behind ``out``, inputs before consumers."""
    return [GraphNode(t.node_id, t.op, tuple(p.node_id for p in t.parents)) for t in _reachable(out)]


def backward(out: DiffTensor) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every reachable parameter."""
    if out.data.size != 1:
        raise ContractError(f"backward needs a single-element output, got shape {out.shape}")
    if not out.requires_grad:
        return
    pending: dict[int, np.ndarray] = {out.node_id: np.ones_like(out.data)}
    for node in reversed(_reachable(out)):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
