"""Minimal dense tensor with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every primitive records its parents and a
closure mapping the output gradient to per-parent gradients; :func:`backward`
replays the graph in reverse topological order and sums gradients along all
paths, so a parameter used at several sites receives the total.

Broadcasting is restricted to leading dimensions: a binary op accepts two
shapes only when one is a suffix of the other.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "parameter",
    "no_grad",
    "checked_mode",
    "grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "softplus",
    "gelu",
    "softmax",
    "concat",
    "split",
    "reshape",
    "swapaxes",
    "sum",
    "mean",
    "conv1d_causal",
    "embedding",
    "cross_entropy",
    "rmsnorm",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECKED = False


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's contraction/broadcast rule."""


class NonFiniteError(FloatingPointError):
    """A non-finite value reached a primitive while checked mode is on."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Reject non-finite inputs to every primitive inside the block."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biu" or arr.dtype == np.float16 or arr.dtype.kind == "O":
            arr = arr.astype(_DEFAULT_DTYPE)
        elif arr.dtype.kind == "f" and not isinstance(data, np.ndarray):
            arr = arr.astype(_DEFAULT_DTYPE)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(op: str, arrays: Iterable[np.ndarray]) -> None:
    for a in arrays:
        if a.dtype.kind == "f" and not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _pair(op: str, a, b) -> list[Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return _prep(op, a, b)


def _prep(op: str, *xs) -> list[Tensor]:
    ts = [as_tensor(x) for x in xs]
    if _CHECKED:
        _check_finite(op, (t.data for t in ts))
    return ts


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each reached leaf to the gradient contributed by this
    pass.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root has no provenance (nothing requires grad)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


# --------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-dimension broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# --------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    sa, sb = a.shape, b.shape
    _broadcast_shape("add", sa, sb)

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    sa, sb = a.shape, b.shape
    _broadcast_shape("sub", sa, sb)

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    sa, sb = a.shape, b.shape
    _broadcast_shape("mul", sa, sb)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), bw)


def neg(a) -> Tensor:
    (a,) = _prep("neg", a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# --------------------------------------------------------------------------
# contraction


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., m, k) and ``b`` of shape (k, n) or (..., k, n)."""
    a, b = _prep("matmul", a, b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: contraction mismatch {sa} @ {sb}")
    if b.ndim > 2 and sb[:-2] != sa[:-2]:
        raise ShapeError(f"matmul: batch dims differ {sa} @ {sb}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2
    if flat:
        # one GEMM over all leading rows
        y = (ad.reshape(-1, sa[-1]) @ bd).reshape(sa[:-1] + (sb[-1],))
    else:
        y = ad @ bd

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, sb[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(sa)
            if b.requires_grad:
                gb = ad.reshape(-1, sa[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", y, (a, b), bw)


# --------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    (a,) = _prep("exp", a)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    (a,) = _prep("log", a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    (a,) = _prep("sigmoid", a)
    s = _sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def silu(a) -> Tensor:
    (a,) = _prep("silu", a)
    x = a.data
    s = _sigmoid(x)
    return _make("silu", x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),))


def softplus(a) -> Tensor:
    (a,) = _prep("softplus", a)
    x = a.data
    return _make("softplus", np.logaddexp(0, x).astype(x.dtype, copy=False), (a,),
                 lambda g: (g * _sigmoid(x),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GeLU, tanh approximation."""
    (a,) = _prep("gelu", a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make("gelu", y, (a,), bw)


def softmax(a) -> Tensor:
    """Softmax over the last dimension."""
    (a,) = _prep("softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), bw)


# --------------------------------------------------------------------------
# structural


def concat(xs: Sequence) -> Tensor:
    """Concatenate along the last dimension."""
    ts = _prep("concat", *xs)
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {ts[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _make("concat", np.concatenate([t.data for t in ts], axis=-1), ts, bw)


def split(a, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last dimension into pieces of the given widths."""
    (a,) = _prep("split", a)
    if int(np.sum(sizes)) != a.shape[-1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to last extent of {a.shape}")
    out = []
    start = 0
    shape, dtype = a.shape, a.dtype
    for w in sizes:
        lo, hi = start, start + w

        def bw(g, lo=lo, hi=hi):
            full = np.zeros(shape, dtype=dtype)
            full[..., lo:hi] = g
            return (full,)

        out.append(_make("split", a.data[..., lo:hi], (a,), bw))
        start = hi
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    (a,) = _prep("reshape", a)
    old = a.shape
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make("reshape", y, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    (a,) = _prep("swapaxes", a)
    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    (a,) = _prep("sum", a)
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    (a,) = _prep("mean", a)
    shape, n = a.shape, a.size
    return _make("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),))


# --------------------------------------------------------------------------
# model primitives


def conv1d_causal(x, kernel, history: np.ndarray | None = None) -> Tensor:
    """Depthwise causal convolution.

    ``x`` is (..., T, C) and ``kernel`` is (C, k); tap ``k-1`` multiplies the
    current position, tap 0 the input ``k-1`` steps back. The series is
    left-padded with zeros, or with ``history`` (..., k-1, C) when given.
    """
    x, kernel = _prep("conv1d_causal", x, kernel)
    if x.ndim < 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise ShapeError(f"conv1d_causal: series {x.shape} incompatible with kernel {kernel.shape}")
    T = x.shape[-2]
    k = kernel.shape[1]
    w = kernel.data
    if history is None:
        pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
        xp = np.pad(x.data, pad)
    else:
        want = x.shape[:-2] + (k - 1, x.shape[-1])
        if history.shape != want:
            raise ShapeError(f"conv1d_causal: history {history.shape}, expected {want}")
        xp = np.concatenate([history.astype(x.dtype, copy=False), x.data], axis=-2)
    y = np.zeros_like(x.data)
    for j in range(k):
        y += xp[..., j:j + T, :] * w[:, j]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T, :] += g * w[:, j]
            gx = gxp[..., k - 1:, :]
        if kernel.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                prod = g * xp[..., j:j + T, :]
                gw[:, j] = prod.reshape(-1, prod.shape[-1]).sum(axis=0)
        return gx, gw

    return _make("conv1d_causal", y, (x, kernel), bw)


def embedding(ids, table) -> Tensor:
    ids = np.asarray(ids)
    (table,) = _prep("embedding", table)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding: ids must be integers")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: id out of range [0, {V})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits, targets) -> Tensor:
    """Mean next-token cross-entropy; ``logits`` (..., V), integer ``targets`` (...)."""
    (logits,) = _prep("cross_entropy", logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    n = t.size
    loss = (lse[:, 0] - z[np.arange(n), t]).mean()

    def bw(g):
        p = np.exp(z - lse)
        p[np.arange(n), t] -= 1
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def rmsnorm(x, weight, eps: float = 1e-5) -> Tensor:
    """``x * weight / sqrt(mean(x**2) + eps)`` over the last dimension."""
    x, weight = _prep("rmsnorm", x, weight)
    if x.shape[-1] == 0:
        raise ShapeError("rmsnorm: zero-length last dimension")
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: weight {weight.shape} does not match last extent of {x.shape}")
    if eps < 0:
        raise ValueError("rmsnorm: eps must be non-negative")
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        gx = gw = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, wd.shape[0]).sum(axis=0)
        if x.requires_grad:
            gxh = g * wd
            gx = inv * (gxh - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make("rmsnorm", xhat * wd, (x, weight), bw)
