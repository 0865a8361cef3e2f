"""Dense tensors with a recorded tape for reverse-mode differentiation.

All values are numpy arrays in the active precision (float32 by default,
float64 for gradient checking).  When an operand belongs to a GradRecord the
operation is appended to that record, so backward() can later walk the list
in reverse and accumulate exact gradients for every registered parameter.
Tensors are immutable by convention: no op writes to an input buffer.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "Tensor", "GradRecord", "ShapeError", "NumericError",
    "constant", "default_dtype", "set_default_dtype", "using_dtype",
    "matmul", "add", "sub", "mul", "scale", "relu", "softmax", "layernorm",
    "reduce_sum", "reshape", "transpose", "concat", "gather_rows",
    "embedding_gather", "dropout", "masked_fill", "where", "exp", "log",
    "tanh", "sigmoid", "softplus", "clamp_min", "logsumexp",
    "backward", "finite_diff_check",
]

MASK_FILL_VALUE = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite values appeared where finite ones are required."""


_DTYPES = {np.dtype(np.float32), np.dtype(np.float64)}
_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default precision (e.g. float64 for checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Immutable n-d value, optionally attached to a GradRecord node."""

    __slots__ = ("data", "record", "node")

    def __init__(self, data: np.ndarray, record: "GradRecord | None" = None,
                 node: int | None = None):
        self.data = data
        self.record = record
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.record is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, dtype=None) -> Tensor:
    """Tensor with no record attachment; gradients never flow into it."""
    arr = np.asarray(value, dtype=np.dtype(dtype) if dtype else _default_dtype)
    return Tensor(arr)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


class _OpEntry:
    __slots__ = ("name", "inputs", "output", "backward", "replay")

    def __init__(self, name, inputs, output, backward, replay):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.replay = replay


class GradRecord:
    """Ordered list of recorded primitive operations.

    Node ids index the value table in creation order, so the list is
    topologically sorted by construction.  replay() recomputes every node
    from the current leaf values; at fixed precision the result is
    bit-identical to the recorded forward pass (dropout masks are part of
    the record).
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._entries: list[_OpEntry] = []
        self._leaves: list[int] = []
        self._params: dict[str, int] = {}

    def _new_node(self, data: np.ndarray) -> int:
        self._values.append(data)
        return len(self._values) - 1

    @property
    def num_nodes(self) -> int:
        return len(self._values)

    @property
    def num_ops(self) -> int:
        return len(self._entries)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """(name, value) pairs for every registered parameter, in
        registration order."""
        return [(name, self._values[node]) for name, node in self._params.items()]

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    def leaf(self, array, name: str | None = None, dtype=None) -> Tensor:
        arr = np.asarray(array, dtype=np.dtype(dtype) if dtype else _default_dtype)
        node = self._new_node(arr)
        self._leaves.append(node)
        if name is not None:
            if name in self._params:
                raise ValueError(f"parameter {name!r} registered twice")
            self._params[name] = node
        return Tensor(arr, self, node)

    def parameter(self, array, name: str, dtype=None) -> Tensor:
        """Leaf registered under a unique name; backward() reports its gradient."""
        if name is None:
            raise ValueError("parameter needs a name")
        return self.leaf(array, name=name, dtype=dtype)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every registered parameter.

        Parameters the loss never touched get zero gradients of the right
        shape.  One reverse sweep; calling it again re-runs the sweep.
        """
        if loss.record is not self:
            raise ValueError("loss does not belong to this record")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[loss.node] = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            g = grads[entry.output]
            if g is None:
                continue
            entry.backward(g, grads)
        out = {}
        for name, node in self._params.items():
            g = grads[node]
            out[name] = np.zeros_like(self._values[node]) if g is None else g
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute all node values from the leaves, in recorded order."""
        values: list[np.ndarray | None] = [None] * len(self._values)
        for node in self._leaves:
            values[node] = self._values[node]
        for entry in self._entries:
            values[entry.output] = entry.replay(values)
        return [self._values[i] if v is None else v for i, v in enumerate(values)]


def _acc(grads: list, node: int | None, contrib: np.ndarray) -> None:
    if node is None:
        return
    if grads[node] is None:
        grads[node] = contrib
    else:
        grads[node] = grads[node] + contrib


def _val(values: list, tensor: Tensor, captured: np.ndarray) -> np.ndarray:
    """Replay-time lookup: recorded node value if taped, else the constant."""
    if tensor.record is None or tensor.node is None:
        return captured
    got = values[tensor.node]
    return captured if got is None else got


def _result(name: str, out: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable, replay_fn: Callable) -> Tensor:
    record = None
    for t in inputs:
        if t.record is not None:
            if record is None:
                record = t.record
            elif record is not t.record:
                raise ValueError(f"{name}: operands belong to different records")
    if record is None:
        return Tensor(out)
    node = record._new_node(out)
    record._entries.append(
        _OpEntry(name, tuple(t.node for t in inputs), node, backward_fn, replay_fn))
    return Tensor(out, record, node)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to a broadcast operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """Matrix product; leading dims are batch dims and must match (or one
    side is 2-d and is shared across the batch)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    la, lb = ad.shape[:-2], bd.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward_fn(g, grads):
        ga = g @ _swap(bd)
        gb = _swap(ad) @ g
        _acc(grads, a.node, _sum_to(ga, ad.shape))
        _acc(grads, b.node, _sum_to(gb, bd.shape))

    def replay_fn(values):
        return _val(values, a, ad) @ _val(values, b, bd)

    return _result("matmul", out, (a, b), backward_fn, replay_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad + bd
    except ValueError as e:
        raise ShapeError(f"add shapes incompatible: {ad.shape} + {bd.shape}") from e

    def backward_fn(g, grads):
        _acc(grads, a.node, _sum_to(g, ad.shape))
        _acc(grads, b.node, _sum_to(g, bd.shape))

    def replay_fn(values):
        return _val(values, a, ad) + _val(values, b, bd)

    return _result("add", out, (a, b), backward_fn, replay_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad - bd
    except ValueError as e:
        raise ShapeError(f"sub shapes incompatible: {ad.shape} - {bd.shape}") from e

    def backward_fn(g, grads):
        _acc(grads, a.node, _sum_to(g, ad.shape))
        _acc(grads, b.node, _sum_to(-g, bd.shape))

    def replay_fn(values):
        return _val(values, a, ad) - _val(values, b, bd)

    return _result("sub", out, (a, b), backward_fn, replay_fn)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with leading-dim broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError as e:
        raise ShapeError(f"mul shapes incompatible: {ad.shape} * {bd.shape}") from e

    def backward_fn(g, grads):
        _acc(grads, a.node, _sum_to(g * bd, ad.shape))
        _acc(grads, b.node, _sum_to(g * ad, bd.shape))

    def replay_fn(values):
        return _val(values, a, ad) * _val(values, b, bd)

    return _result("mul", out, (a, b), backward_fn, replay_fn)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    cc = xd.dtype.type(c)
    out = xd * cc

    def backward_fn(g, grads):
        _acc(grads, x.node, g * cc)

    def replay_fn(values):
        return _val(values, x, xd) * cc

    return _result("scale", out, (x,), backward_fn, replay_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * (xd > 0))

    def replay_fn(values):
        return np.maximum(_val(values, x, xd), 0)

    return _result("relu", out, (x,), backward_fn, replay_fn)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis; rejects non-finite input."""
    x = _as_tensor(x)
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax input contains non-finite values")
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g, grads):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _acc(grads, x.node, out * (g - inner))

    def replay_fn(values):
        v = _val(values, x, xd)
        mm = v.max(axis=axis, keepdims=True)
        ee = np.exp(v - mm)
        return ee / ee.sum(axis=axis, keepdims=True)

    return _result("softmax", out, (x,), backward_fn, replay_fn)


def layernorm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd, gd, bd = x.data, gain.data, bias.data
    d = xd.shape[-1]
    if gd.shape != (d,) or bd.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias must be ({d},), got {gd.shape} and {bd.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gd + bd

    def backward_fn(g, grads):
        lead = tuple(range(g.ndim - 1))
        _acc(grads, gain.node, (g * xhat).sum(axis=lead))
        _acc(grads, bias.node, g.sum(axis=lead))
        gh = g * gd
        term = gh.mean(axis=-1, keepdims=True)
        term2 = (gh * xhat).mean(axis=-1, keepdims=True)
        _acc(grads, x.node, inv * (gh - term - xhat * term2))

    def replay_fn(values):
        v = _val(values, x, xd)
        gg = _val(values, gain, gd)
        bb = _val(values, bias, bd)
        m2 = v.mean(axis=-1, keepdims=True)
        c2 = v - m2
        vv = (c2 * c2).mean(axis=-1, keepdims=True)
        return c2 / np.sqrt(vv + v.dtype.type(eps)) * gg + bb

    return _result("layernorm", out, (x, gain, bias), backward_fn, replay_fn)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=xd.dtype)

    def backward_fn(g, grads):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(grads, x.node, np.broadcast_to(gg, xd.shape).copy())

    def replay_fn(values):
        return np.asarray(_val(values, x, xd).sum(axis=axis, keepdims=keepdims), dtype=xd.dtype)

    return _result("reduce_sum", out, (x,), backward_fn, replay_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    try:
        out = xd.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {xd.shape} to {shape}") from e

    def backward_fn(g, grads):
        _acc(grads, x.node, g.reshape(xd.shape))

    def replay_fn(values):
        return _val(values, x, xd).reshape(shape)

    return _result("reshape", out, (x,), backward_fn, replay_fn)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.transpose(xd, axes)
    if axes is None:
        inv = None
    else:
        inv = list(np.argsort(axes))

    def backward_fn(g, grads):
        _acc(grads, x.node, np.transpose(g, inv))

    def replay_fn(values):
        return np.transpose(_val(values, x, xd), axes)

    return _result("transpose", out, (x,), backward_fn, replay_fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes incompatible: {[d.shape for d in datas]}") from e
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g, grads):
        pieces = np.split(g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            _acc(grads, p.node, piece)

    def replay_fn(values):
        return np.concatenate(
            [_val(values, p, d) for p, d in zip(parts, datas)], axis=axis)

    return _result("concat", out, tuple(parts), backward_fn, replay_fn)


def gather_rows(x, indices) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate gradient."""
    x = _as_tensor(x)
    xd = x.data
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= xd.shape[0]):
        raise IndexError(
            f"gather index out of range [0, {xd.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}")
    out = xd[idx]

    def backward_fn(g, grads):
        buf = np.zeros_like(xd)
        np.add.at(buf, idx, g)
        _acc(grads, x.node, buf)

    def replay_fn(values):
        return _val(values, x, xd)[idx]

    return _result("gather_rows", out, (x,), backward_fn, replay_fn)


def embedding_gather(table, ids) -> Tensor:
    """Look up embedding rows by id; ids outside the table raise."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}")
    return gather_rows(table, ids.reshape(-1))


def dropout(x, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    xd = x.data
    u = rng.uniform(xd.shape)
    keep = (u >= rate).astype(xd.dtype) / xd.dtype.type(1.0 - rate)
    out = xd * keep

    def backward_fn(g, grads):
        _acc(grads, x.node, g * keep)

    def replay_fn(values):
        return _val(values, x, xd) * keep

    return _result("dropout", out, (x,), backward_fn, replay_fn)


def masked_fill(x, mask, value: float = MASK_FILL_VALUE) -> Tensor:
    """Replace entries where mask is True; no gradient flows through them."""
    x = _as_tensor(x)
    xd = x.data
    m = np.asarray(mask, dtype=bool)
    try:
        mb = np.broadcast_to(m, xd.shape)
    except ValueError as e:
        raise ShapeError(f"mask shape {m.shape} does not broadcast to {xd.shape}") from e
    out = np.where(mb, xd.dtype.type(value), xd)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * ~mb)

    def replay_fn(values):
        return np.where(mb, xd.dtype.type(value), _val(values, x, xd))

    return _result("masked_fill", out, (x,), backward_fn, replay_fn)


def where(cond, a, b) -> Tensor:
    """Select a where cond else b; cond is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    c = np.asarray(cond, dtype=bool)
    out = np.where(c, ad, bd)
    cb = np.broadcast_to(c, out.shape)

    def backward_fn(g, grads):
        _acc(grads, a.node, _sum_to(g * cb, ad.shape))
        _acc(grads, b.node, _sum_to(g * ~cb, bd.shape))

    def replay_fn(values):
        return np.where(c, _val(values, a, ad), _val(values, b, bd))

    return _result("where", out, (a, b), backward_fn, replay_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.exp(xd)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * out)

    def replay_fn(values):
        return np.exp(_val(values, x, xd))

    return _result("exp", out, (x,), backward_fn, replay_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)

    def backward_fn(g, grads):
        _acc(grads, x.node, g / xd)

    def replay_fn(values):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(_val(values, x, xd))

    return _result("log", out, (x,), backward_fn, replay_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.tanh(xd)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * (1.0 - out * out))

    def replay_fn(values):
        return np.tanh(_val(values, x, xd))

    return _result("tanh", out, (x,), backward_fn, replay_fn)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = _sigmoid(xd)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * out * (1.0 - out))

    def replay_fn(values):
        return _sigmoid(_val(values, x, xd))

    return _result("sigmoid", out, (x,), backward_fn, replay_fn)


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))


def softplus(x) -> Tensor:
    """log(1 + e^x), computed without overflow for large |x|."""
    x = _as_tensor(x)
    xd = x.data
    out = _softplus(xd)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * _sigmoid(xd))

    def replay_fn(values):
        return _softplus(_val(values, x, xd))

    return _result("softplus", out, (x,), backward_fn, replay_fn)


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _as_tensor(x)
    xd = x.data
    f = xd.dtype.type(floor)
    out = np.maximum(xd, f)

    def backward_fn(g, grads):
        _acc(grads, x.node, g * (xd > f))

    def replay_fn(values):
        return np.maximum(_val(values, x, xd), f)

    return _result("clamp_min", out, (x,), backward_fn, replay_fn)


def logsumexp(x, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along one axis, stabilized by the detached max."""
    x = _as_tensor(x)
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def backward_fn(g, grads):
        _acc(grads, x.node, np.expand_dims(g, axis) * soft)

    def replay_fn(values):
        v = _val(values, x, xd)
        mm = v.max(axis=axis, keepdims=True)
        ee = np.exp(v - mm)
        return np.squeeze(mm + np.log(ee.sum(axis=axis, keepdims=True)), axis=axis)

    return _result("logsumexp", out, (x,), backward_fn, replay_fn)


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for all parameters on its record."""
    if loss.record is None:
        raise ValueError("loss is not attached to a GradRecord")
    return loss.record.backward(loss)


def finite_diff_check(f: Callable[[dict[str, Tensor]], Tensor],
                      params: dict[str, np.ndarray],
                      *,
                      step: float = 1e-5,
                      max_samples: int = 200,
                      rng: Rng | None = None,
                      kink_margin: float = 10.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a dict of named tensors to a scalar Tensor and must be
    deterministic (no dropout).  Evaluation runs in float64 regardless of
    the active default.  Sampled coordinates cover every parameter; values
    within kink_margin * step of zero are skipped so that relu-style kinks
    do not poison the comparison.
    """
    rng = rng or Rng(0)
    p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    with using_dtype(np.float64):
        record = GradRecord()
        tensors = {k: record.parameter(v, k) for k, v in p64.items()}
        loss = f(tensors)
        analytic = record.backward(loss)

        def eval_at(pp: dict[str, np.ndarray]) -> float:
            out = f({k: Tensor(v) for k, v in pp.items()})
            return float(out.data)

        total = sum(v.size for v in p64.values())
        worst = 0.0
        for name, arr in p64.items():
            n_here = max(1, round(max_samples * arr.size / max(total, 1)))
            n_here = min(n_here, arr.size)
            flat = arr.reshape(-1)
            candidates = np.nonzero(np.abs(flat) > kink_margin * step)[0]
            if candidates.size == 0:
                candidates = np.arange(flat.size)
            pick = candidates[rng.integers(0, candidates.size, (n_here,))]
            for i in np.unique(pick):
                bumped = dict(p64)
                plus = flat.copy()
                plus[i] += step
                bumped[name] = plus.reshape(arr.shape)
                f_plus = eval_at(bumped)
                minus = flat.copy()
                minus[i] -= step
                bumped[name] = minus.reshape(arr.shape)
                f_minus = eval_at(bumped)
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic[name].reshape(-1)[i])
                rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                worst = max(worst, rel)
    return worst
