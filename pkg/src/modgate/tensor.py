"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a dynamic tape: every forward pass builds a fresh graph and
``backward`` walks it once in reverse topological order.  All values are
64-bit floats.  Elementwise binary ops accept equal shapes, a trailing-axis
bias vector, or a scalar operand; any other mismatch raises ``ShapeError``
so that operation counts stay exact.

Activation "taps" let callers snapshot an intermediate node's value and its
gradient after a backward pass, which is how saliency signals are harvested
without touching the forward computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "TapRecord",
    "TapSet",
    "ShapeError",
    "DomainError",
    "GraphError",
    "param",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "gather_rows",
    "gather_elements",
    "scatter_rows_fill",
    "scale_rows",
    "tile_to",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "sigmoid",
    "tanh",
    "mean",
    "tsum",
    "tabs",
    "mse",
    "cross_entropy",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values lie outside an operation's mathematical domain."""


class GraphError(RuntimeError):
    """Autodiff graph misuse: non-scalar loss, missing gradients, etc."""


class Tensor:
    """N-dimensional float64 array, optionally tracked on the autodiff tape.

    A graph node is recorded only when some input ``requires_grad``; constant
    subtrees stay plain data.  ``grad`` is populated (same shape as
    ``values``) for every node on the differentiable path after ``backward``.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def param(values, rng: np.random.Generator | None = None, scale_: float | None = None) -> Tensor:
    """Wrap an array (or draw one) as a trainable leaf tensor.

    With ``rng`` given, ``values`` is interpreted as a shape and entries are
    drawn N(0, scale^2) where ``scale_`` defaults to 1/sqrt(fan_in).
    """
    if rng is not None:
        shape = tuple(values)
        fan_in = shape[0] if len(shape) >= 2 else max(shape[0], 1)
        s = scale_ if scale_ is not None else 1.0 / np.sqrt(fan_in)
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)
    return Tensor(values, requires_grad=True)


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every node along the differentiable path,
    including registered taps and all ``requires_grad`` leaves.  Gradients
    accumulate, so callers zero leaf grads between steps.
    """
    if loss.values.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any differentiable input")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


@dataclass
class TapRecord:
    """Snapshot of a tapped activation and its loss gradient."""

    tap_id: str
    activation: np.ndarray
    activation_grad: np.ndarray


class TapSet:
    """Registry of graph nodes whose (value, grad) pairs are harvested.

    Taps never alter the forward computation; they only read back values
    after ``backward`` has run over the same graph.
    """

    def __init__(self):
        self._nodes: dict[str, Tensor] = {}

    def register_tap(self, node: Tensor, tap_id: str) -> None:
        if not isinstance(node, Tensor):
            raise TypeError("tap target must be a Tensor")
        if tap_id in self._nodes:
            raise ValueError(f"duplicate tap id {tap_id!r}")
        self._nodes[tap_id] = node

    def tap_ids(self) -> list[str]:
        return list(self._nodes)

    def collect_taps(self) -> list[TapRecord]:
        records = []
        for tap_id, node in self._nodes.items():
            if node.grad is None:
                raise GraphError(
                    f"tap {tap_id!r} has no gradient; run backward over the graph first"
                )
            records.append(
                TapRecord(tap_id, node.values.copy(), np.asarray(node.grad).copy())
            )
        return records


# ---------------------------------------------------------------------------
# shape plumbing


def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    """Classify a binary op as equal-shape, trailing-axis bias, or scalar."""
    if a.shape == b.shape:
        return "equal"
    if b.size == 1:
        return "scalar_b"
    if a.size == 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return "bias"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (trailing-axis or scalar broadcast only)."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    axes = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=axes)


# ---------------------------------------------------------------------------
# core operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or
    batched identically to ``a``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    values = np.matmul(a.values, b.values)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, np.matmul(g, b.values.swapaxes(-1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, m = b.shape
                _accum(b, a.values.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                _accum(b, np.matmul(a.values.swapaxes(-1, -2), g))

    return _node(values, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "add")
    values = a.values + b.values

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    del mode
    return _node(values, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_mode(a, b, "sub")
    values = a.values - b.values

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, -_reduce_to(g, b.shape))

    return _node(values, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_mode(a, b, "mul")
    values = a.values * b.values

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.values, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.values, b.shape))

    return _node(values, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    values = a.values * c

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * c)

    return _node(values, (a,), backward_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >=2-D input, got {a.shape}")
    values = a.values.swapaxes(-1, -2)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.swapaxes(-1, -2))

    return _node(values, (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    values = a.values.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _node(values, (a,), backward_fn)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        moved = np.moveaxis(g, axis, 0)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, np.moveaxis(moved[lo:hi], 0, axis))

    return _node(values, tuple(parts), backward_fn)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    values = a.values[idx]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[idx] = g
            _accum(a, full)

    return _node(values, (a,), backward_fn)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows: 1-D/2-D input with flat indices, or 3-D input with
    per-batch index matrix ``(B, k)`` selecting along axis 1."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim in (1, 2):
        if idx.ndim != 1:
            raise ShapeError(f"gather_rows: flat indices required for {a.ndim}-D input")
        values = a.values[idx]

        def backward_fn(g: np.ndarray) -> None:
            if a.requires_grad:
                full = np.zeros_like(a.values)
                np.add.at(full, idx, g)
                _accum(a, full)

    elif a.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
            raise ShapeError(
                f"gather_rows: need (B, k) indices for input {a.shape}, got {idx.shape}"
            )
        values = np.take_along_axis(a.values, idx[:, :, None], axis=1)
        batch = np.arange(a.shape[0])[:, None]

        def backward_fn(g: np.ndarray) -> None:
            if a.requires_grad:
                full = np.zeros_like(a.values)
                np.add.at(full, (batch, idx), g)
                _accum(a, full)

    else:
        raise ShapeError(f"gather_rows: unsupported input rank {a.ndim}")
    return _node(values, (a,), backward_fn)


def gather_elements(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row element selection along the last axis of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"gather_elements expects 2-D input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_elements: bad index shape {idx.shape} for {a.shape}")
    values = np.take_along_axis(a.values, idx, axis=1)
    rows = np.arange(a.shape[0])[:, None]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, (rows, idx), g)
            _accum(a, full)

    return _node(values, (a,), backward_fn)


def scatter_rows_fill(rows: Tensor, fill: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Assemble an output whose rows at ``idx`` come from ``rows`` and whose
    remaining rows are all ``fill``.

    2-D: rows ``(k, d)``, fill ``(d,)``, idx ``(k,)`` -> ``(n_rows, d)``.
    3-D: rows ``(B, k, d)``, fill ``(B, d)``, idx ``(B, k)`` -> ``(B, n_rows, d)``.
    Indices must be unique within each batch element.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if rows.ndim == 2:
        if fill.shape != rows.shape[-1:]:
            raise ShapeError(f"scatter_rows_fill: fill {fill.shape} vs rows {rows.shape}")
        out = np.broadcast_to(fill.values, (n_rows,) + fill.shape).copy()
        out[idx] = rows.values
        keep_mask = np.ones((n_rows, 1))
        keep_mask[idx] = 0.0

        def backward_fn(g: np.ndarray) -> None:
            if rows.requires_grad:
                _accum(rows, g[idx])
            if fill.requires_grad:
                _accum(fill, (g * keep_mask).sum(axis=0))

    elif rows.ndim == 3:
        b = rows.shape[0]
        if fill.shape != (b, rows.shape[-1]) or idx.shape != rows.shape[:2]:
            raise ShapeError(
                f"scatter_rows_fill: rows {rows.shape}, fill {fill.shape}, idx {idx.shape}"
            )
        out = np.broadcast_to(fill.values[:, None, :], (b, n_rows, rows.shape[-1])).copy()
        np.put_along_axis(out, idx[:, :, None], rows.values, axis=1)
        keep_mask = np.ones((b, n_rows, 1))
        np.put_along_axis(keep_mask, idx[:, :, None], 0.0, axis=1)

        def backward_fn(g: np.ndarray) -> None:
            if rows.requires_grad:
                _accum(rows, np.take_along_axis(g, idx[:, :, None], axis=1))
            if fill.requires_grad:
                _accum(fill, (g * keep_mask).sum(axis=1))

    else:
        raise ShapeError(f"scatter_rows_fill: unsupported rows rank {rows.ndim}")
    return _node(out, (rows, fill), backward_fn)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of a 2-D tensor by a per-row scalar."""
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: {a.shape} rows vs scales {s.shape}")
    values = a.values * s.values[:, None]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * s.values[:, None])
        if s.requires_grad:
            _accum(s, (g * a.values).sum(axis=-1))

    return _node(values, (a, s), backward_fn)


def tile_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicitly replicate a tensor across new leading axes."""
    shape = tuple(shape)
    if a.ndim > len(shape) or shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError(f"tile_to: cannot tile {a.shape} to {shape}")
    values = np.broadcast_to(a.values, shape).copy()
    lead = tuple(range(len(shape) - a.ndim))

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g.sum(axis=lead) if lead else g)

    return _node(values, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.values)):
        raise DomainError("softmax input must be finite")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            dot = (g * values).sum(axis=axis, keepdims=True)
            _accum(a, values * (g - dot))

    return _node(values, (a,), backward_fn)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    mu = a.values.mean(axis=axis, keepdims=True)
    var = a.values.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    values = (a.values - mu) * inv

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            gm = g.mean(axis=axis, keepdims=True)
            gy = (g * values).mean(axis=axis, keepdims=True)
            _accum(a, inv * (g - gm - values * gy))

    return _node(values, (a,), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.values / _SQRT2))
    values = a.values * cdf

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.values * a.values) * _INV_SQRT_2PI
            _accum(a, g * (cdf + a.values * pdf))

    return _node(values, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    values = np.maximum(a.values, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * (a.values > 0.0))

    return _node(values, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    values = expit(a.values)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * values * (1.0 - values))

    return _node(values, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    values = np.tanh(a.values)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * (1.0 - values * values))

    return _node(values, (a,), backward_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        values = np.asarray(a.values.mean())
        n = a.size

        def backward_fn(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, np.full(a.shape, float(g) / n))

    else:
        values = a.values.mean(axis=axis)
        n = a.shape[axis]

        def backward_fn(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _node(values, (a,), backward_fn)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        values = np.asarray(a.values.sum())

        def backward_fn(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, np.full(a.shape, float(g)))

    else:
        values = a.values.sum(axis=axis)
        n = a.shape[axis]

        def backward_fn(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, np.repeat(np.expand_dims(g, axis), n, axis=axis))

    return _node(values, (a,), backward_fn)


def tabs(a: Tensor) -> Tensor:
    values = np.abs(a.values)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * np.sign(a.values))

    return _node(values, (a,), backward_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.values - b.values
    values = np.asarray((diff * diff).mean())
    n = a.size

    def backward_fn(g: np.ndarray) -> None:
        d = (2.0 * float(g) / n) * diff
        if a.requires_grad:
            _accum(a, d)
        if b.requires_grad:
            _accum(b, -d)

    return _node(values, (a, b), backward_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Accepts ``(B, C)`` logits with ``(B,)`` labels or a single ``(C,)`` row
    with a scalar label.
    """
    if not np.all(np.isfinite(logits.values)):
        raise DomainError("cross_entropy logits must be finite")
    squeeze = logits.ndim == 1
    raw = logits.values[None, :] if squeeze else logits.values
    if raw.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if y.shape != (raw.shape[0],):
        raise ShapeError(f"cross_entropy: {raw.shape[0]} rows vs labels {y.shape}")
    if y.min() < 0 or y.max() >= raw.shape[1]:
        raise DomainError("cross_entropy labels out of range")
    shifted = raw - raw.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = raw.shape[0]
    values = np.asarray(-logp[np.arange(b), y].mean())

    def backward_fn(g: np.ndarray) -> None:
        if logits.requires_grad:
            d = np.exp(logp)
            d[np.arange(b), y] -= 1.0
            d *= float(g) / b
            _accum(logits, d[0] if squeeze else d)

    return _node(values, (logits,), backward_fn)
