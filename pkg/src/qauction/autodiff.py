"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every tracked operation in execution order; backward() replays
the tape in strict reverse order, accumulating vector-Jacobian products. The
op set is exactly what the auction network and misreport ascent need; there is
no graph optimization and no broadcasting beyond the bias-add pattern, which
keeps the engine small enough to audit.

Forward values are computed identically whether or not inputs are tracked, so
evaluation with tracking disabled is bitwise identical to tracked evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError


class Tape:
    """Append-only record of differentiable operations.

    Node ids are append positions; reverse iteration order is therefore a
    valid reverse-topological order. One tape per logical training step; tapes
    are not shared across threads.
    """

    def __init__(self):
        self.nodes: list[list[tuple[int, Callable[[np.ndarray], np.ndarray]]]] = []

    def _record(self, parents) -> int:
        """parents: list of (input node_id, vjp function). Returns the node id."""
        self.nodes.append(parents)
        return len(self.nodes) - 1

    def leaf(self, data) -> "Tensor":
        """A tracked variable (gradient target)."""
        arr = np.ascontiguousarray(data, dtype=np.float64)
        return Tensor(arr, self, self._record([]))


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: Optional[Tape] = None, node_id: Optional[int] = None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        tag = f" node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def constant(data) -> Tensor:
    """An untracked tensor; receives no gradient."""
    return Tensor(np.asarray(data, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjps: Sequence[Optional[Callable]]) -> Tensor:
    """Wrap an op result, recording a tape node if any input is tracked."""
    tape = None
    for t in inputs:
        if t.tracked:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise InvalidInputError("operands belong to different tapes")
    if tape is None:
        return Tensor(data)
    parents = [
        (t.node_id, vjp)
        for t, vjp in zip(inputs, vjps)
        if t.tracked and vjp is not None
    ]
    return Tensor(data, tape, tape._record(parents))


def backward(tape: Tape, loss: Tensor, wanted: Optional[set[int]] = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss with respect to every tracked node.

    Returns a map node_id -> gradient array. If ``wanted`` is given,
    intermediate gradients are dropped once consumed and only the requested
    ids are kept (memory hygiene on large graphs).
    """
    if not loss.tracked or loss.tape is not tape:
        raise InvalidInputError("loss is not tracked on this tape")
    if loss.data.size != 1:
        raise InvalidInputError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        for pid, vjp in tape.nodes[nid]:
            contrib = vjp(g)
            prev = grads.get(pid)
            grads[pid] = contrib if prev is None else prev + contrib
        if wanted is not None and nid not in wanted:
            del grads[nid]
    return grads


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over broadcast leading axes back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(x, y) -> Tensor:
    """Elementwise add; also supports the (..., d) + (d,) bias pattern."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        if not (y.data.ndim == 1 and x.data.ndim >= 1 and x.shape[-1] == y.shape[0]):
            raise InvalidInputError(f"add: incompatible shapes {x.shape} and {y.shape}")
    out = x.data + y.data
    return _result(out, (x, y), (lambda g: g, lambda g: _sum_to_shape(g, y.shape)))


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise InvalidInputError(f"sub: shapes must match, got {x.shape} and {y.shape}")
    return _result(x.data - y.data, (x, y), (lambda g: g, lambda g: -g))


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise InvalidInputError(f"mul: shapes must match, got {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    return _result(xd * yd, (x, y), (lambda g: g * yd, lambda g: g * xd))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), (lambda g: g * c,))


def matmul(x, y) -> Tensor:
    """Matrix product: 2-D @ 2-D, N-D @ 2-D (shared weights), or N-D @ N-D."""
    x, y = _as_tensor(x), _as_tensor(y)
    xd, yd = x.data, y.data
    if xd.ndim < 2 or yd.ndim < 2:
        raise InvalidInputError("matmul expects at least 2-D operands")
    out = xd @ yd
    if yd.ndim == 2:
        k = xd.shape[-1]
        mcols = yd.shape[-1]

        def gx(g):
            return g @ yd.T

        def gy(g):
            return xd.reshape(-1, k).T @ g.reshape(-1, mcols)

    else:
        if xd.shape[:-2] != yd.shape[:-2]:
            raise InvalidInputError(f"matmul: batch dims differ: {xd.shape} vs {yd.shape}")

        def gx(g):
            return g @ yd.swapaxes(-1, -2)

        def gy(g):
            return xd.swapaxes(-1, -2) @ g

    return _result(out, (x, y), (gx, gy))


def linear(x, w, b) -> Tensor:
    """Fused affine map: x @ w + b with x (..., k), w (k, m), b (m,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or b.shape != (wd.shape[1],):
        raise InvalidInputError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = xd @ wd + b.data
    k, m = wd.shape

    def gx(g):
        return g @ wd.T

    def gw(g):
        return xd.reshape(-1, k).T @ g.reshape(-1, m)

    def gb(g):
        return g.reshape(-1, m).sum(axis=0)

    return _result(out, (x, w, b), (gx, gw, gb))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise InvalidInputError("transpose expects at least 2-D input")
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(int(k) for k in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _result(out, (x,), (lambda g: np.transpose(g, inverse),))


def transpose_last2(x) -> Tensor:
    """Swap the last two axes."""
    return transpose(x, None)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)
    return _result(out, (x,), (lambda g: g.reshape(old),))


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def gx(g):
        if axis is None:
            return np.broadcast_to(g, xd.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xd.shape)

    return _result(np.asarray(out), (x,), (gx,))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    count = xd.size if axis is None else xd.shape[axis]
    out = xd.mean(axis=axis, keepdims=keepdims)

    def gx(g):
        if axis is None:
            return np.broadcast_to(g, xd.shape) / count
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xd.shape) / count

    return _result(np.asarray(out), (x,), (gx,))


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis; tolerates -inf entries."""
    x = _as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def gx(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _result(s, (x,), (gx,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def gx(g):
        return g * out * (1.0 - out)

    return _result(out, (x,), (gx,))


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def log1p(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    if xd.min() <= -1.0:
        raise InvalidInputError("log1p requires inputs > -1")
    return _result(np.log1p(xd), (x,), (lambda g: g / (1.0 + xd),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise InvalidInputError("layer_norm gain/bias must match the last axis")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    out = y * gain.data + bias.data
    gd = gain.data

    def gx(g):
        dy = g * gd
        return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))

    def ggain(g):
        return (g * y).reshape(-1, d).sum(axis=0)

    def gbias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _result(out, (x, gain, bias), (gx, ggain, gbias))


def elementwise_min(x, y) -> Tensor:
    """Elementwise min; on exact ties the gradient routes to the first input."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise InvalidInputError(f"elementwise_min: shapes must match, got {x.shape} and {y.shape}")
    first = x.data <= y.data
    out = np.where(first, x.data, y.data)
    return _result(out, (x, y), (lambda g: g * first, lambda g: g * ~first))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InvalidInputError("concat needs at least one part")
    out = np.concatenate([p.data for p in parts], axis=axis)
    vjps = []
    offset = 0
    for p in parts:
        start, stop = offset, offset + p.data.shape[axis]
        offset = stop

        def make(start=start, stop=stop):
            def vjp(g):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                return g[tuple(sl)]

            return vjp

        vjps.append(make())
    return _result(out, parts, vjps)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    x = _as_tensor(x)
    xd = x.data
    sl = [slice(None)] * xd.ndim
    sl[axis] = slice(start, stop)
    out = xd[tuple(sl)].copy()

    def gx(g):
        full = np.zeros_like(xd)
        full[tuple(sl)] = g
        return full

    return _result(out, (x,), (gx,))


def take_axis(x, axis: int, indices) -> Tensor:
    """Select the given indices along one axis (gather)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    xd = x.data
    out = np.take(xd, idx, axis=axis)

    def gx(g):
        full = np.zeros_like(xd)
        sl: list = [slice(None)] * xd.ndim
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        return full

    return _result(out, (x,), (gx,))


def scatter_axis(x, axis: int, indices, size: int, fill: float = 0.0) -> Tensor:
    """Place slices of x at `indices` along a widened axis; rest is `fill`.

    Inverse of take_axis: gradient flows only through the placed entries.
    """
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    xd = x.data
    if xd.shape[axis] != idx.shape[0]:
        raise InvalidInputError("scatter_axis: indices must match the input extent on `axis`")
    shape = list(xd.shape)
    shape[axis] = size
    out = np.full(shape, fill, dtype=np.float64)
    sl: list = [slice(None)] * xd.ndim
    sl[axis] = idx
    out[tuple(sl)] = xd

    def gx(g):
        return np.take(g, idx, axis=axis)

    return _result(out, (x,), (gx,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic vs central-difference gradients."""

    max_rel_error: float
    rel_errors: np.ndarray
    excluded: np.ndarray
    passed: bool


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    tol: float = 1e-4,
    exclude=None,
) -> GradCheckReport:
    """Check df/dx against central finite differences, coordinate by coordinate.

    ``exclude`` is an optional boolean mask of coordinates to skip (e.g. relu
    kinks, where only a subgradient exists); skipped coordinates are reported,
    not checked.
    """
    x = np.asarray(x, dtype=np.float64)
    excluded = np.zeros(x.shape, dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)
    if excluded.shape != x.shape:
        raise InvalidInputError("exclude mask must match x's shape")

    tape = Tape()
    xt = tape.leaf(x)
    loss = f(xt)
    if loss.data.size != 1:
        raise InvalidInputError("grad_check target must return a scalar")
    analytic = backward(tape, loss).get(xt.node_id)
    if analytic is None:
        analytic = np.zeros_like(x)

    rel = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for k in range(flat.size):
        if excluded.reshape(-1)[k]:
            continue
        bump = np.zeros_like(flat)
        bump[k] = h
        up = float(f(constant((flat + bump).reshape(x.shape))).data)
        dn = float(f(constant((flat - bump).reshape(x.shape))).data)
        numeric = (up - dn) / (2.0 * h)
        a = float(analytic.reshape(-1)[k])
        denom = max(abs(a), abs(numeric))
        err = abs(a - numeric) if denom < 1e-6 else abs(a - numeric) / denom
        rel.reshape(-1)[k] = err

    max_err = float(rel[~excluded].max()) if (~excluded).any() else 0.0
    return GradCheckReport(
        max_rel_error=max_err,
        rel_errors=rel,
        excluded=excluded,
        passed=bool(max_err <= tol),
    )
