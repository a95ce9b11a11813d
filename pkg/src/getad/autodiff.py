"""Reverse-mode automatic differentiation over dense numpy arrays.

Values are stored at whatever dtype they enter with (float32 for model
parameters); reductions accumulate in float64 before casting back.  The
graph is a plain DAG of :class:`Tensor` nodes, each holding a backward
closure; it is built eagerly and is confined to a single thread.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True

# Additive mask value for attention and vocabulary masking; large enough to
# zero out after softmax in float32 without producing inf arithmetic.
NEG_FILL = -1e9


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node through the recorded graph."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        order = _topological_order(self)
        self.accumulate_grad(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs can be deeper than the recursion limit.
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x))


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _fsum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    # 64-bit accumulator, cast back to the storage dtype.
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = np.sum(g, axis=tuple(range(extra)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = np.sum(g, axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record("matmul", out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.T)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.T))

    return _record("transpose", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _record("reshape", out, (a,), backward)


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record("add", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _record("neg", -a.data, (a,), backward)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_coerce(b, a)))


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = list(tensors)
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _record("concat", out, tuple(parts), backward)


def add_n(tensors) -> Tensor:
    parts = list(tensors)
    out = parts[0].data.copy()
    for t in parts[1:]:
        out += t.data

    def backward(g):
        for t in parts:
            if t.requires_grad:
                t.accumulate_grad(g)

    return _record("add_n", out, tuple(parts), backward)


def narrow(a: Tensor, key) -> Tensor:
    """Basic slicing; the backward pass zero-pads into the source shape."""
    out = a.data[key]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] += g
            a.accumulate_grad(buf)

    return _record("narrow", np.ascontiguousarray(out), (a,), backward)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup along axis 0 with arbitrary integer index shape."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table.accumulate_grad(buf)

    return _record("gather", out, (table,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), g)
            a.accumulate_grad(buf)

    return _record("gather_rows", out, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    out = np.where(a.data > 0, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(a.data > 0, 1.0, slope).astype(g.dtype))

    return _record("leaky_relu", out.astype(a.dtype), (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0).astype(g.dtype))

    return _record("relu", out, (a,), backward)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    out = np.where(a.data > 0, a.data, alpha * np.expm1(a.data)).astype(a.dtype)

    def backward(g):
        grad = np.where(a.data > 0, 1.0, out + alpha)
        if a.requires_grad:
            a.accumulate_grad(g * grad.astype(g.dtype))

    return _record("elu", out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return _record("sigmoid", out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64)).astype(a.dtype)

    def backward(g):
        if a.requires_grad:
            inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
            a.accumulate_grad(out * (g - inner))

    return _record("softmax", out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(a.dtype)
    soft = np.exp(out)

    def backward(g):
        if a.requires_grad:
            gsum = np.sum(g, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
            a.accumulate_grad(g - soft * gsum)

    return _record("log_softmax", out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable per-feature gain and bias."""
    xd = x.data.astype(np.float64)
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = (gain.data * xhat + bias.data).astype(x.dtype)

    def backward(g):
        gd = g.astype(np.float64)
        if gain.requires_grad:
            axes = tuple(range(gd.ndim - 1))
            gain.accumulate_grad(np.sum(gd * xhat, axis=axes).astype(gain.dtype))
        if bias.requires_grad:
            axes = tuple(range(gd.ndim - 1))
            bias.accumulate_grad(np.sum(gd, axis=axes).astype(bias.dtype))
        if x.requires_grad:
            gy = gd * gain.data.astype(np.float64)
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = (gy - m1 - xhat * m2) * inv
            x.accumulate_grad(gx.astype(x.dtype))

    return _record("layer_norm", out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout; identity when p == 0 or train is False."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    out = x.data * keep * np.asarray(scale, dtype=x.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep * np.asarray(scale, dtype=g.dtype))

    return _record("dropout", out, (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, 0.0, g).astype(g.dtype))

    return _record("masked_fill", out, (x,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _fsum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(g.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _record("sum", out, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def inner_product(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Row-wise inner product along an axis."""
    return sum_(mul(a, b), axis=axis)


def cross_entropy(logits: Tensor, targets, position_weights=None) -> Tensor:
    """Summed negative log-likelihood built from log_softmax plus a row gather."""
    lp = log_softmax(logits, axis=-1)
    picked = gather_rows(lp, targets)
    if position_weights is not None:
        picked = mul(picked, Tensor(np.asarray(position_weights, dtype=picked.dtype)))
    return neg(sum_(picked))


def bce_with_logits(scores: Tensor, labels) -> Tensor:
    """Per-element binary cross-entropy on raw scores, computed stably."""
    y = np.asarray(labels, dtype=scores.dtype)
    s = scores.data
    softplus = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
    out = (softplus - y * s).astype(scores.dtype)
    sig = np.empty_like(s)
    pos = s >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    ex = np.exp(s[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def backward(g):
        if scores.requires_grad:
            scores.accumulate_grad(g * (sig - y))

    return _record("bce_with_logits", out, (scores,), backward)


def segment_sum(values: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets given by seg_ids."""
    seg_ids = np.asarray(seg_ids)
    out_shape = (num_segments,) + values.data.shape[1:]
    out = np.zeros(out_shape, dtype=values.dtype)
    np.add.at(out, seg_ids, values.data)

    def backward(g):
        if values.requires_grad:
            values.accumulate_grad(g[seg_ids])

    return _record("segment_sum", out, (values,), backward)


def segment_softmax(scores: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Softmax over groups of entries sharing a segment id (1-D scores)."""
    seg_ids = np.asarray(seg_ids)
    s = scores.data
    if s.ndim != 1:
        raise ValueError("segment_softmax expects 1-D scores")
    gmax = np.full(num_segments, -np.inf, dtype=np.float64)
    np.maximum.at(gmax, seg_ids, s.astype(np.float64))
    if np.any(np.isinf(gmax[np.unique(seg_ids)])):
        raise ValueError("segment contains no entries")
    e = np.exp(s.astype(np.float64) - gmax[seg_ids])
    denom = np.zeros(num_segments, dtype=np.float64)
    np.add.at(denom, seg_ids, e)
    out = (e / denom[seg_ids]).astype(s.dtype)

    def backward(g):
        if scores.requires_grad:
            dot = np.zeros(num_segments, dtype=np.float64)
            np.add.at(dot, seg_ids, (g * out).astype(np.float64))
            scores.accumulate_grad((out * (g - dot[seg_ids].astype(g.dtype))).astype(g.dtype))

    return _record("segment_softmax", out, (scores,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    passed: bool
    per_input: list[float] = field(default_factory=list)


def gradcheck(fn, inputs, eps: float = 1e-3, tol: float = 1e-4, name: str = "fn") -> GradcheckReport:
    """Compare reverse-mode gradients against central finite differences.

    The function is re-evaluated on float64 shadow copies of the inputs so
    truncation error, not storage precision, dominates the comparison.  The
    reported error is max |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    shadows = [tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                      requires_grad=True) for x in inputs]
    out = fn(*shadows)
    if out.data.size != 1:
        raise ValueError("gradcheck requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise ValueError("gradcheck function produced a non-finite value")
    out.backward()
    analytic = [np.zeros_like(s.data) if s.grad is None else s.grad.copy() for s in shadows]

    per_input: list[float] = []
    for i, shadow in enumerate(shadows):
        base = shadow.data
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + eps
                hi = float(fn(*shadows).data)
                flat[j] = orig - eps
                lo = float(fn(*shadows).data)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic[i]), np.abs(numeric)))
        err = np.abs(analytic[i] - numeric) / denom
        per_input.append(float(err.max()) if err.size else 0.0)

    worst = max(per_input) if per_input else 0.0
    return GradcheckReport(name=name, max_rel_err=worst, passed=worst <= tol, per_input=per_input)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm
