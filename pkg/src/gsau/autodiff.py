"""Dense tensors with a reverse-mode tape.

Only the operations the encoders and losses need are provided. There is no
broadcasting: every elementwise op requires identical shapes, and bias/row
adaptation goes through dedicated ops (``add_bias``) or explicit reshapes.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

NORM_EPS = 1e-12

_ids = itertools.count()
_mode = threading.local()


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_ids))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "flags")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.flags: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        op = self.node.op if self.node else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else None
    return Tensor(data, requires_grad=False, dtype=dtype)


def _make(op: str, out: np.ndarray, inputs: tuple, bwd) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op}: non-finite value in output of shape {out.shape}")
    t = Tensor(out)
    if grad_enabled() and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, inputs, bwd)
    return t


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not on the tape")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t.node.inputs)
    order = sorted(nodes.values(), key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi


# --------------------------------------------------------------------------
# elementwise / linear algebra
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make("add_scalar", x.data + c, (x,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the one sanctioned row-vector expansion."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    z = x.data / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(z))
    out = (x.data * cdf).astype(x.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return _make("gelu", out, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (..., k, m); leading dims must match exactly."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make("matmul", a.data @ b.data, (a, b), bwd)


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense ``x``; ``adj`` is not differentiated."""
    if x.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: shape mismatch {adj.shape} vs {x.shape}")
    out = np.asarray(adj @ x.data, dtype=x.dtype)
    return _make("spmm", out, (x,), lambda g: (np.asarray(adj.T @ g, dtype=x.dtype),))


# --------------------------------------------------------------------------
# shape manipulation and indexing
# --------------------------------------------------------------------------


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(
            d1 != d2 for k, (d1, d2) in enumerate(zip(ref, other)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return _make("concat", out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {x.shape}")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make("slice_rows", x.data[start:stop], (x,), bwd)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``indices.shape + (d,)``."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for {table.shape[0]} rows")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding_lookup", table.data[idx], (table,), bwd)


def take(x: Tensor, flat_indices) -> Tensor:
    """1-D gather from the flattened tensor."""
    idx = np.asarray(flat_indices, dtype=np.int64)

    def bwd(g):
        full = np.zeros(x.data.size, dtype=x.dtype)
        np.add.at(full, idx, g)
        return (full.reshape(x.shape),)

    return _make("take", x.data.reshape(-1)[idx], (x,), bwd)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: shape mismatch {x.shape} vs {mask.shape}")
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make("masked_fill", out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


# --------------------------------------------------------------------------
# reductions and row-wise ops
# --------------------------------------------------------------------------


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _make("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make("sum", out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def log_mean_exp(x: Tensor) -> Tensor:
    """log(mean(exp(x))) over all elements, max-shifted."""
    if x.data.size == 0:
        raise ShapeError("log_mean_exp: empty input")
    m = x.data.max()
    w = np.exp(x.data - m)
    s = w.sum()
    out = np.asarray(m + np.log(s / x.data.size), dtype=x.dtype)
    return _make("log_mean_exp", out, (x,), lambda g: (g * w / s,))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def bwd(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), bwd)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows (last axis) to unit norm.

    Rows whose norm is below ``NORM_EPS`` pass through unchanged, are
    reported in ``out.flags`` and contribute no gradient.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    small = norm < NORM_EPS
    safe = np.where(small, 1, norm).astype(x.dtype)
    y = x.data / safe

    def bwd(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(small, 0, gx).astype(x.dtype),)

    out = _make("l2_normalize", y, (x,), bwd)
    out.flags = small[..., 0]
    return out


def squared_row_distance(a: Tensor, b: Tensor) -> Tensor:
    """||a_r - b_r||^2 for each row r; returns shape ``a.shape[:-1]``."""
    _same_shape("squared_row_distance", a, b)
    diff = a.data - b.data

    def bwd(g):
        gd = 2 * g[..., None] * diff
        return gd, -gd

    return _make("squared_row_distance", (diff * diff).sum(axis=-1), (a, b), bwd)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of ||a_i - b_j||^2 for 2-D ``a`` [n, d] and ``b`` [m, d]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: shape mismatch {a.shape} vs {b.shape}")
    aa = (a.data * a.data).sum(axis=1)
    bb = (b.data * b.data).sum(axis=1)
    out = np.maximum(aa[:, None] + bb[None, :] - 2 * a.data @ b.data.T, 0).astype(a.dtype)

    def bwd(g):
        ga = 2 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        gb = 2 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _make("pairwise_sq_dist", out, (a, b), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        gh = g * gain.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx.astype(x.dtype), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    out = (xhat * gain.data + bias.data).astype(x.dtype)
    return _make("layer_norm", out, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no rng is given."""
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return mul(x, constant(keep, like=x))
