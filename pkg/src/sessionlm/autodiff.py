"""Dense tensors with reverse-mode automatic differentiation on a tape.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for gradient
checking). Primitives applied while a ``Tape`` is active record a backward
closure; ``tape.backward(loss)`` replays them in reverse and returns a
gradient map keyed by the node id of every gradient-tracked leaf.

Tapes are single-threaded; the active-tape stack is thread-local so
independent tapes can run on worker threads concurrently.
"""

import itertools
import os
import threading

import numpy as np
from scipy.special import erf

from .errors import ShapeError
from .kernels import scatter_add_rows

DEBUG_CHECKS = os.environ.get("SESSIONLM_DEBUG", "0") == "1"

_uid_counter = itertools.count(1)
_tls = threading.local()

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable-by-convention dense array plus gradient-tracking metadata."""

    __slots__ = ("data", "requires_grad", "node_id", "is_leaf")

    def __init__(self, data, dtype=np.float32, requires_grad=False):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.node_id = next(_uid_counter)
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        kind = "leaf" if self.is_leaf else "op"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {kind}, grad={self.requires_grad})"


def tensor(data, dtype=np.float32, requires_grad=False):
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def constant(data, dtype=None):
    """Wrap an existing array without gradient tracking (no copy if possible)."""
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    t.requires_grad = False
    t.node_id = next(_uid_counter)
    t.is_leaf = True
    return t


def _make_output(data, tracked):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = tracked
    out.node_id = next(_uid_counter)
    out.is_leaf = False
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in primitive output")
    return out


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    __slots__ = ("_entries", "_leaves")

    def __init__(self):
        self._entries = []
        self._leaves = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, out, inputs, backward_fn):
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                self._leaves[t.node_id] = t
        self._entries.append(
            (out.node_id, tuple(t.node_id for t in inputs), backward_fn)
        )

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Gradient map {leaf node_id: array} for all tracked leaves.

        Leaves not reachable from ``loss`` get zero gradients.
        """
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar-shaped, got {loss.data.shape}")
        grads = {loss.node_id: np.ones((), dtype=loss.data.dtype)}
        for out_id, in_ids, fn in reversed(self._entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for in_id, ig in zip(in_ids, fn(g)):
                if ig is None:
                    continue
                acc = grads.get(in_id)
                # out-of-place: op backward fns may return aliased arrays
                grads[in_id] = ig if acc is None else acc + ig
        result = {}
        for node_id, leaf in self._leaves.items():
            g = grads.get(node_id)
            if g is None:
                g = np.zeros_like(leaf.data)
            result[node_id] = np.asarray(g, dtype=leaf.data.dtype)
        return result


def backward(tape, loss):
    return tape.backward(loss)


def _maybe_record(out, inputs, backward_fn_builder):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward_fn_builder())
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shapes do not conform: {ad.shape} x {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul batch mismatch: {ad.shape} x {bd.shape}")
    if ad.ndim > 3 or bd.ndim > 3 or (ad.ndim == 2 and bd.ndim == 3):
        raise ShapeError(f"matmul supports 2d/3d with 3d@2d, got {ad.shape} x {bd.shape}")
    tracked = a.requires_grad or b.requires_grad
    out = _make_output(np.matmul(ad, bd), tracked)

    def build():
        need_a, need_b = a.requires_grad, b.requires_grad

        def fn(g):
            ga = gb = None
            if need_a:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            if need_b:
                if ad.ndim == 3 and bd.ndim == 2:
                    gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
                else:
                    gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            return (ga, gb)

        return fn

    return _maybe_record(out, (a, b), build)


def transpose(a):
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got {a.data.shape}")
    out = _make_output(np.swapaxes(a.data, -1, -2), a.requires_grad)

    def build():
        return lambda g: (np.swapaxes(g, -1, -2),)

    return _maybe_record(out, (a,), build)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}")
    old_shape = a.data.shape
    out = _make_output(a.data.reshape(shape), a.requires_grad)

    def build():
        return lambda g: (g.reshape(old_shape),)

    return _maybe_record(out, (a,), build)


def add(a, b):
    ad, bd = a.data, b.data
    bias_mode = bd.ndim == 1 and ad.ndim > 1 and ad.shape[-1] == bd.shape[0]
    if not bias_mode and ad.shape != bd.shape:
        raise ShapeError(f"add shapes do not conform: {ad.shape} + {bd.shape}")
    tracked = a.requires_grad or b.requires_grad
    out = _make_output(ad + bd, tracked)

    def build():
        need_a, need_b = a.requires_grad, b.requires_grad
        lead = tuple(range(ad.ndim - 1))

        def fn(g):
            ga = g if need_a else None
            gb = None
            if need_b:
                gb = g.sum(axis=lead) if bias_mode else g
            return (ga, gb)

        return fn

    return _maybe_record(out, (a, b), build)


def mul(a, b):
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul shapes do not conform: {ad.shape} * {bd.shape}")
    tracked = a.requires_grad or b.requires_grad
    out = _make_output(ad * bd, tracked)

    def build():
        need_a, need_b = a.requires_grad, b.requires_grad

        def fn(g):
            return (g * bd if need_a else None, g * ad if need_b else None)

        return fn

    return _maybe_record(out, (a, b), build)


def concat(tensors, axis):
    tensors = list(tensors)
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(first) or any(
            s[i] != first[i] for i in range(len(s)) if i != axis % len(s)
        ):
            raise ShapeError(f"concat shapes do not conform: {first} vs {s}")
    tracked = any(t.requires_grad for t in tensors)
    out = _make_output(np.concatenate([t.data for t in tensors], axis=axis), tracked)

    def build():
        needs = [t.requires_grad for t in tensors]
        sizes = [t.data.shape[axis] for t in tensors]
        bounds = np.cumsum([0] + sizes)

        def fn(g):
            pieces = np.split(g, bounds[1:-1], axis=axis)
            return tuple(p if need else None for p, need in zip(pieces, needs))

        return fn

    return _maybe_record(out, tensors, build)


def slice_(a, key):
    """Basic slicing with a tuple of ``slice`` objects (no steps)."""
    key = tuple(key)
    for k in key:
        if not isinstance(k, slice) or k.step not in (None, 1):
            raise ShapeError(f"slice supports contiguous slices only, got {key}")
    out = _make_output(np.ascontiguousarray(a.data[key]), a.requires_grad)

    def build():
        shape = a.data.shape

        def fn(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] = g
            return (full,)

        return fn

    return _maybe_record(out, (a,), build)


def embedding_lookup(table, indices):
    """Gather rows of a 2-d table; ``indices`` is a constant int array."""
    idx = np.asarray(indices)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding index out of range for table {table.data.shape}"
        )
    out = _make_output(table.data[idx], table.requires_grad)

    def build():
        shape = table.data.shape
        flat_idx = idx.reshape(-1)

        def fn(g):
            gt = np.zeros(shape, dtype=g.dtype)
            scatter_add_rows(gt, flat_idx, g.reshape(-1, shape[1]))
            return (gt,)

        return fn

    return _maybe_record(out, (table,), build)


def gather_rows(a, indices):
    """Per-batch row pick: out[b] = a[b, indices[b], :] for a of shape (B, S, d)."""
    idx = np.asarray(indices)
    if a.data.ndim != 3 or idx.shape != (a.data.shape[0],):
        raise ShapeError(
            f"gather_rows needs (B, S, d) and (B,) indices, got {a.data.shape}, {idx.shape}"
        )
    batch = np.arange(a.data.shape[0])
    out = _make_output(a.data[batch, idx], a.requires_grad)

    def build():
        shape = a.data.shape

        def fn(g):
            ga = np.zeros(shape, dtype=g.dtype)
            ga[batch, idx] = g
            return (ga,)

        return fn

    return _maybe_record(out, (a,), build)


def softmax(a):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make_output(y, a.requires_grad)

    def build():
        def fn(g):
            dot = np.sum(g * y, axis=-1, keepdims=True)
            return (y * (g - dot),)

        return fn

    return _maybe_record(out, (a,), build)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _make_output(y, a.requires_grad)

    def build():
        return lambda g: (g * y * (1.0 - y),)

    return _maybe_record(out, (a,), build)


def tanh(a):
    y = np.tanh(a.data)
    out = _make_output(y, a.requires_grad)

    def build():
        return lambda g: (g * (1.0 - y * y),)

    return _maybe_record(out, (a,), build)


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _make_output(x * cdf, a.requires_grad)

    def build():
        def fn(g):
            pdf = np.exp(-0.5 * x * x).astype(x.dtype) * x.dtype.type(_INV_SQRT2PI)
            return (g * (cdf + x * pdf),)

        return fn

    return _maybe_record(out, (a,), build)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    d = x.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm scale/offset must be ({d},), got {gamma.data.shape}, {beta.data.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    tracked = a.requires_grad or gamma.requires_grad or beta.requires_grad
    out = _make_output(xhat * gamma.data + beta.data, tracked)

    def build():
        need_x = a.requires_grad
        need_g = gamma.requires_grad
        need_b = beta.requires_grad
        gd = gamma.data
        lead = tuple(range(x.ndim - 1))

        def fn(g):
            gx = gg = gb = None
            if need_g:
                gg = np.sum(g * xhat, axis=lead)
            if need_b:
                gb = np.sum(g, axis=lead)
            if need_x:
                dxhat = g * gd
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                gx = inv_std * (dxhat - m1 - xhat * m2)
            return (gx, gg, gb)

        return fn

    return _maybe_record(out, (a, gamma, beta), build)


def dropout(a, rate, rng):
    """Inverted-scaling dropout; rate 0 is the exact identity path."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        out = _make_output(a.data, a.requires_grad)

        def build_id():
            return lambda g: (g,)

        return _maybe_record(out, (a,), build_id)
    keep = (rng.random(size=a.data.shape) >= rate).astype(a.data.dtype)
    keep /= a.data.dtype.type(1.0 - rate)
    out = _make_output(a.data * keep, a.requires_grad)

    def build():
        return lambda g: (g * keep,)

    return _maybe_record(out, (a,), build)


def mean(a):
    out = _make_output(np.asarray(a.data.mean(), dtype=a.data.dtype), a.requires_grad)

    def build():
        shape, n = a.data.shape, a.data.size

        def fn(g):
            return (np.full(shape, g / n, dtype=g.dtype),)

        return fn

    return _maybe_record(out, (a,), build)


def sum_(a):
    out = _make_output(np.asarray(a.data.sum(), dtype=a.data.dtype), a.requires_grad)

    def build():
        shape = a.data.shape

        def fn(g):
            return (np.full(shape, g, dtype=g.dtype),)

        return fn

    return _maybe_record(out, (a,), build)


def scale(a, factor):
    factor = float(factor)
    out = _make_output(a.data * a.data.dtype.type(factor), a.requires_grad)

    def build():
        return lambda g: (g * g.dtype.type(factor),)

    return _maybe_record(out, (a,), build)


def log(a, floor=0.0):
    """Natural log of max(x, floor); clamped entries get zero gradient."""
    x = a.data
    clamped = np.maximum(x, x.dtype.type(floor)) if floor > 0.0 else x
    out = _make_output(np.log(clamped), a.requires_grad)

    def build():
        def fn(g):
            above = x > floor
            return (np.where(above, g / np.where(above, x, 1.0), 0.0).astype(g.dtype),)

        return fn

    return _maybe_record(out, (a,), build)


PRIMITIVES = {
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "add": add,
    "elementwise-multiply": mul,
    "concat": concat,
    "slice": slice_,
    "embedding-lookup": embedding_lookup,
    "gather-rows": gather_rows,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "layer-normalization": layer_norm,
    "dropout": dropout,
    "mean": mean,
    "sum": sum_,
    "scalar-scale": scale,
    "log": log,
}


def apply_primitive(kind, *inputs, **kwargs):
    """Dispatch by primitive name; unknown kinds are rejected."""
    op = PRIMITIVES.get(kind)
    if op is None:
        raise ShapeError(f"unknown primitive kind: {kind!r}")
    return op(*inputs, **kwargs)
