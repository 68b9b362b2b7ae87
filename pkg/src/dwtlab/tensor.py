"""Dense tensors with reverse-mode automatic differentiation.

A Graph is a tape: differentiable ops append nodes while a graph is
active (``with Graph() as g: ...``), and ``backward`` replays the tape
in reverse insertion order. Gradient accumulation order is fixed by
node order, so replaying the same computation is bitwise deterministic.

Ops record a node only when some input requires a gradient AND a graph
is active. Tensors with ``requires_grad=False`` (e.g. a frozen teacher's
parameters) therefore never land on the tape and receive no gradients.

float32 is the training precision; float64 tensors exist for
finite-difference gradient checks.
"""

from __future__ import annotations

import os
import threading

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

LAYER_NORM_EPS = 1e-12
KL_CLAMP = 1e-12

# When enabled, every recorded op validates that its output is finite.
CHECK_FINITE = os.environ.get("DWTLAB_CHECK_FINITE", "0") == "1"

_ACTIVE = threading.local()


def _current_graph():
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense f32/f64 array, optionally tracked on a computation graph."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._tape_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._tape = None
        out._tape_id = -1
        return out

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "input_ids", "out", "bwd")

    def __init__(self, op, input_ids, out, bwd):
        self.op = op
        self.input_ids = input_ids
        self.out = out
        self.bwd = bwd


class Graph:
    """Append-only op tape; one per training step and per thread."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.stack.pop()
        return False

    def _leaf_id(self, t: Tensor) -> int:
        if t._tape is self:
            return t._tape_id
        t._tape = self
        t._tape_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), t, None))
        return t._tape_id

    def _record(self, op, inputs, out, bwd):
        ids = tuple(self._leaf_id(t) for t in inputs)
        out._tape = self
        out._tape_id = len(self.nodes)
        self.nodes.append(_Node(op, ids, out, bwd))


def _wrap(data, requires_grad):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    out._tape = None
    out._tape_id = -1
    return out


def _apply(op, out_data, inputs, bwd):
    """Wrap op output; record on the active graph when gradients are needed.

    ``bwd(grad_out) -> tuple`` must yield one gradient array (or None)
    per tensor input, in input order.
    """
    if CHECK_FINITE and not np.isfinite(out_data).all():
        raise NumericError(f"non-finite values in output of op '{op}'")
    g = _current_graph()
    track = g is not None and any(t.requires_grad for t in inputs)
    out = _wrap(out_data, track)
    if track:
        g._record(op, inputs, out, bwd)
    return out


def _check_same_dtype(op, *tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def backward(graph: Graph, loss: Tensor) -> dict:
    """Propagate d(loss)/d(node) through the tape in reverse order.

    Returns a map of requires_grad leaf tensors to their gradient arrays
    and accumulates the same arrays into each leaf's ``.grad``.
    """
    if loss._tape is not graph:
        raise ValueError("loss is not a node of this graph")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    grads: list = [None] * len(graph.nodes)
    grads[loss._tape_id] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        gout = grads[node.out._tape_id]
        if gout is None or node.bwd is None:
            continue
        contribs = node.bwd(gout)
        for iid, contrib in zip(node.input_ids, contribs):
            if contrib is None:
                continue
            if grads[iid] is None:
                grads[iid] = contrib
            else:
                grads[iid] = grads[iid] + contrib
    leaf_grads: dict = {}
    for node in graph.nodes:
        if node.bwd is None and node.op == "leaf" and node.out.requires_grad:
            g = grads[node.out._tape_id]
            if g is None:
                continue
            t = node.out
            t.grad = g if t.grad is None else t.grad + g
            leaf_grads[t] = t.grad
    return leaf_grads


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)

    def bwd(g):
        return (g * s,)

    return _apply("scale", a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, stacked ND x ND with equal
    leading dims, and ND x 2-D (shared weight applied to every row)."""
    _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul: leading dims disagree, {a.shape} @ {b.shape}")
        out = ad @ bd

        def bwd(g):
            da = g @ bd.swapaxes(-1, -2)
            db = ad.swapaxes(-1, -2) @ g
            return da, db

    elif bd.ndim == 2:
        out = ad @ bd

        def bwd(g):
            da = g @ bd.T
            k, n = bd.shape
            db = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return da, db

    else:
        raise ShapeError(f"matmul: unsupported operand ranks {a.shape} @ {b.shape}")
    return _apply("matmul", out, (a, b), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _apply("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply("reshape", np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _apply("sum", np.asarray(a.data.sum(dtype=a.dtype)), (a,), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    inv = a.dtype.type(1.0 / n)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * inv, a.shape).astype(a.dtype, copy=True),)
        ge = np.expand_dims(g, axis) * inv
        return (np.broadcast_to(ge, a.shape).astype(a.dtype, copy=True),)

    return _apply("mean", np.asarray(a.data.mean(axis=axis, dtype=a.dtype)), (a,), bwd)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D tensor; gradients scatter-add back, so
    repeated ids accumulate."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"id out of range [0, {table.data.shape[0]}) in embedding_lookup"
        )
    flat = ids.ravel()
    out = table.data[flat].reshape(ids.shape + (table.data.shape[1],))

    def bwd(g):
        dt = np.zeros_like(table.data)
        kernels.scatter_add_rows(dt, flat.astype(np.int64), g.reshape(flat.shape[0], -1))
        return (dt,)

    return _apply("embedding_lookup", out, (table,), bwd)


def gelu(a: Tensor) -> Tensor:
    def bwd(g):
        return (kernels.gelu_bwd(a.data, g),)

    return _apply("gelu", kernels.gelu(a.data), (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    gain and bias. A constant row normalizes to exact zeros."""
    _check_same_dtype("layer_norm", x, gain, bias)
    d = x.data.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    x2 = x.data.reshape(-1, d)
    out, mu, rstd = kernels.layer_norm_rows(x2, gain.data, bias.data, LAYER_NORM_EPS)

    def bwd(g):
        dx, dg, db = kernels.layer_norm_bwd_rows(x2, gain.data, mu, rstd, g.reshape(-1, d))
        return dx.reshape(x.shape), dg, db

    return _apply("layer_norm", out.reshape(x.shape), (x, gain, bias), bwd)


def softmax_temperature(logits: Tensor, tau: float) -> Tensor:
    """Temperature-softened softmax over the last axis, computed with
    max-subtraction. Rows sum to 1."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    c = logits.data.shape[-1]
    y = kernels.softmax_rows(logits.data.reshape(-1, c), tau)

    def bwd(g):
        dx = kernels.softmax_bwd_rows(y, g.reshape(-1, c), tau)
        return (dx.reshape(logits.shape),)

    return _apply("softmax", y.reshape(logits.shape), (logits,), bwd)


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    c = logits.data.shape[-1]
    out = kernels.log_softmax_rows(logits.data.reshape(-1, c), tau)

    def bwd(g):
        dx = kernels.log_softmax_bwd_rows(out, g.reshape(-1, c), tau)
        return (dx.reshape(logits.shape),)

    return _apply("log_softmax", out.reshape(logits.shape), (logits,), bwd)


def cross_entropy(log_probs: Tensor, target_ids) -> Tensor:
    """Mean over rows of -log p(target). Targets index one-hot ground
    truth, so this is the negative log-likelihood of the labels."""
    if log_probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C log-probs, got {log_probs.shape}")
    n, c = log_probs.data.shape
    ids = np.asarray(target_ids)
    if ids.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {ids.shape} targets")
    if n == 0:
        raise ValueError("cross_entropy on zero rows")
    if ids.min() < 0 or ids.max() >= c:
        raise IndexError(f"target id out of range [0, {c})")
    picked = log_probs.data[np.arange(n), ids]
    out = log_probs.dtype.type(-(picked.sum(dtype=np.float64) / n))

    def bwd(g):
        d = np.zeros_like(log_probs.data)
        d[np.arange(n), ids] = -(g / log_probs.dtype.type(n))
        return (d,)

    return _apply("cross_entropy", np.asarray(out), (log_probs,), bwd)


def kl_divergence(p_teacher: Tensor, p_student: Tensor) -> Tensor:
    """Mean over rows of KL(teacher || student).

    Gradient flows only into p_student. Student probabilities are
    clamped at 1e-12 before the log; the returned tensor's
    ``clamp_fired`` attribute records whether that rescue triggered.
    An exact-zero student probability under nonzero teacher mass is an
    error (the loss would be infinite).
    """
    if p_teacher.shape != p_student.shape or p_teacher.data.ndim != 2:
        raise ShapeError(
            f"kl_divergence expects matching N x C inputs, got {p_teacher.shape} and {p_student.shape}"
        )
    _check_same_dtype("kl_divergence", p_teacher, p_student)
    n, _ = p_teacher.data.shape
    for name, t in (("teacher", p_teacher), ("student", p_student)):
        sums = t.data.sum(axis=1, dtype=np.float64)
        if n and np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError(f"kl_divergence: {name} rows are not stochastic")
    pt, ps = p_teacher.data, p_student.data
    if bool(((ps == 0) & (pt > 0)).any()):
        raise NumericError("kl_divergence: zero student probability under teacher mass")
    clamped = np.maximum(ps, p_student.dtype.type(KL_CLAMP))
    fired = bool(((ps < KL_CLAMP) & (pt > 0)).any())
    ratio = np.where(pt > 0, pt / clamped, pt.dtype.type(1.0))
    val = pt.dtype.type((pt * np.log(ratio)).sum(dtype=np.float64) / max(n, 1))

    def bwd(g):
        ds = -(pt / clamped) * (g / pt.dtype.type(n))
        ds[ps < KL_CLAMP] = 0
        return None, ds

    out = _apply("kl_divergence", np.asarray(val), (p_teacher, p_student), bwd)
    out.clamp_fired = fired
    return out
