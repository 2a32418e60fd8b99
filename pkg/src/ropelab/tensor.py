"""Minimal dense-array numerics with reverse-mode autodiff.

Backed by numpy float64 arrays (the one float width used repo-wide).
Tensors are rank <= 4. Broadcasting is deliberately restricted: besides
scalars, an operand may only differ from the other by size-1 axes or by
being a trailing vector (shape equal to the other's last axis). Anything
else requires an explicit reshape.

Gradients are computed by a reverse-mode tape: ops record their parents
and a backward closure; ``backward(loss)`` walks the graph in reverse
topological order with per-call gradient buffers and accumulates into
the ``.grad`` of requires_grad leaves, so repeated calls accumulate.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries."""


class GradientError(ValueError):
    """backward() called on something that is not a scalar on a tape."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are rank <= 4, got rank {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- restricted broadcasting ----------------------------------------------


def _broadcast_ok(a_shape: tuple, b_shape: tuple) -> bool:
    """Scalars, size-1 axes, and trailing vectors only."""
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return True
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) == 1 and small[0] == big[-1]:
        return True  # trailing vector (bias / gain over last axis)
    if len(small) != len(big):
        return False
    return all(s == b or s == 1 or b == 1 for s, b in zip(small, big))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not "
                         "compatible (only scalar/size-1/trailing-vector broadcast)")


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            yield a, _unbroadcast(g, a.shape)
        if b.requires_grad:
            yield b, _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            yield a, _unbroadcast(g, a.shape)
        if b.requires_grad:
            yield b, _unbroadcast(-g, b.shape)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            yield a, _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            yield b, _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            yield a, _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            yield b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            yield a, g * exponent * a.data ** (exponent - 1.0)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            yield a, g * out_data

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            yield a, g / a.data

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            yield a, g * (1.0 - out_data * out_data)

    return _make(out_data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU with its analytic derivative."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            yield a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _make(out_data, (a,), backward)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            yield a, g.reshape(a.shape)

    return _make(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            yield a, g.transpose(inverse)

    return _make(out_data, (a,), backward)


def swap_last(a) -> Tensor:
    """Transpose the last two axes (matrix transpose on stacked tensors)."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                yield t, piece

    return _make(out_data, ts, backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                yield a, np.broadcast_to(g, a.shape).copy()
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                yield a, np.broadcast_to(gg, a.shape).copy()

    return _make(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


# -- matmul ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product a @ b.

    Supported: 2D @ 2D; stacked a (rank 3/4) @ 2D weight; or stacked @
    stacked with identical leading dims. Inner extents must match.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            yield a, ga
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            yield b, gb

    return _make(out_data, (a, b), backward)


# -- fused ops -------------------------------------------------------------


def softmax_rows(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis.

    `mask` is a boolean array broadcastable to x.shape; True entries are
    kept, False entries get probability exactly 0. A row with no True
    entry raises DegenerateRowError.
    """
    x = as_tensor(x)
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        shifted = np.where(mask, data, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted, where=mask, out=np.zeros_like(data))
    else:
        if not np.isfinite(data).all():
            raise DegenerateRowError("softmax input must be finite")
        e = np.exp(data - data.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * probs).sum(axis=-1, keepdims=True)
            yield x, probs * (g - dot)

    return _make(probs, (x,), backward)


def cross_entropy_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row logits.

    logits: [N, V]; targets: int array [N]. Returns a scalar tensor.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"targets length {targets.shape[0]} != logits rows {n}")
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError("target ids out of vocabulary range")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    nll = -log_probs[np.arange(n), targets]
    out_data = np.asarray(nll.mean())

    def backward(g):
        if logits.requires_grad:
            gz = ez / sez
            gz[np.arange(n), targets] -= 1.0
            yield logits, gz * (float(g) / n)

    return _make(out_data, (logits,), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :], scatter-add on backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError("embedding ids out of range")
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            yield table, gt

    return _make(out_data, (table,), backward)


def rotate_pairs(x, angles: np.ndarray) -> Tensor:
    """Rotate each (2j, 2j+1) plane of the last axis by angles[..., j].

    `angles` is a plain array broadcastable to x.shape[:-1] + (d/2,).
    The rotation is orthogonal per plane, so the backward pass is the
    inverse rotation of the upstream gradient.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotate_pairs needs an even trailing extent, got {d}")
    angles = np.broadcast_to(np.asarray(angles, dtype=DTYPE), x.shape[:-1] + (d // 2,))
    cos, sin = np.cos(angles), np.sin(angles)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        if x.requires_grad:
            ge, go = g[..., 0::2], g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            yield x, gx

    return _make(out_data, (x,), backward)


def pairwise_rotated_scores(q, k, angles: np.ndarray) -> Tensor:
    """Scores s[..., i, j] = q_i . R(angles[i, j, :]) k_j.

    Used by attention variants that rewrite each pair's relative position
    (clamping, grouped remapping); `angles` is a constant [S, S, d/2]
    table shared across leading dims. Exact attention corresponds to
    angles[i, j] = (j - i) * (alpha * theta).
    """
    q, k = as_tensor(q), as_tensor(k)
    if q.shape != k.shape:
        raise ShapeError(f"pairwise scores need matching q/k shapes, got {q.shape} vs {k.shape}")
    d = q.shape[-1]
    if d % 2:
        raise ShapeError(f"pairwise scores need an even head dim, got {d}")
    s = q.shape[-2]
    angles = np.asarray(angles, dtype=DTYPE)
    if angles.shape != (s, s, d // 2):
        raise ShapeError(f"angle table must be [S, S, d/2] = {(s, s, d // 2)}, got {angles.shape}")
    lead = q.shape[:-2]
    qf = q.data.reshape(-1, s, d)
    kf = k.data.reshape(-1, s, d)
    cos, sin = np.cos(angles), np.sin(angles)
    qe, qo = qf[..., 0::2], qf[..., 1::2]
    ke, ko = kf[..., 0::2], kf[..., 1::2]
    # q . R(a) k = cos(a) (qe*ke + qo*ko) + sin(a) (qo*ke - qe*ko), summed over planes
    out = (np.einsum("nip,ijp,njp->nij", qe, cos, ke, optimize=True)
           + np.einsum("nip,ijp,njp->nij", qo, cos, ko, optimize=True)
           + np.einsum("nip,ijp,njp->nij", qo, sin, ke, optimize=True)
           - np.einsum("nip,ijp,njp->nij", qe, sin, ko, optimize=True))
    out_data = out.reshape(lead + (s, s))

    def backward(g):
        gf = g.reshape(-1, s, s)
        if q.requires_grad:
            gqe = (np.einsum("nij,ijp,njp->nip", gf, cos, ke, optimize=True)
                   - np.einsum("nij,ijp,njp->nip", gf, sin, ko, optimize=True))
            gqo = (np.einsum("nij,ijp,njp->nip", gf, cos, ko, optimize=True)
                   + np.einsum("nij,ijp,njp->nip", gf, sin, ke, optimize=True))
            gq = np.empty_like(qf)
            gq[..., 0::2] = gqe
            gq[..., 1::2] = gqo
            yield q, gq.reshape(q.shape)
        if k.requires_grad:
            gke = (np.einsum("nij,ijp,nip->njp", gf, cos, qe, optimize=True)
                   + np.einsum("nij,ijp,nip->njp", gf, sin, qo, optimize=True))
            gko = (np.einsum("nij,ijp,nip->njp", gf, cos, qo, optimize=True)
                   - np.einsum("nij,ijp,nip->njp", gf, sin, qe, optimize=True))
            gk = np.empty_like(kf)
            gk[..., 0::2] = gke
            gk[..., 1::2] = gko
            yield k, gk.reshape(k.shape)

    return _make(out_data, (q, k), backward)


# -- reverse pass ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Propagate dLoss into the .grad of every requires_grad leaf.

    Gradient buffers for interior nodes are per-call, so calling twice
    without resetting leaf grads accumulates.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GradientError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        raise GradientError("loss is not connected to any requires_grad tensor")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            if node.requires_grad:
                node._accumulate(g)
            continue
        for parent, contribution in node._backward(g):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution


__all__ = [
    "DTYPE", "Tensor", "ShapeError", "DegenerateRowError", "GradientError",
    "no_grad", "as_tensor", "add", "sub", "mul", "div", "power", "exp",
    "log", "tanh", "gelu", "reshape", "transpose", "swap_last", "concat",
    "reduce_sum", "reduce_mean", "matmul", "softmax_rows",
    "cross_entropy_logits", "embedding", "rotate_pairs",
    "pairwise_rotated_scores", "backward",
]
