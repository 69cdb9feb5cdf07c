"""Reverse-mode automatic differentiation over float64 numpy arrays.

Only the primitives needed by the port-sequence network are provided.  Every
operation builds a node holding its parents and a closure that maps the
output gradient to parent gradients.  Gradients accumulate into ``.grad``.

Checkpoint layout (version 1, all integers little-endian)::

    bytes 0..7     magic  b"PSQCKPT\\0"
    bytes 8..11    uint32 format version
    bytes 12..19   uint64 header length n
    bytes 20..     n bytes of UTF-8 JSON:
                   {"hyper": {...}, "tensors": [{"name", "shape", "offset"}]}
    then           concatenated float64 little-endian tensor values;
                   "offset" counts float64 elements from the start of this block
"""

from __future__ import annotations

import json
import math
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MASK_FILL = -1e9
CHECKPOINT_MAGIC = b"PSQCKPT\x00"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class MaskError(ValueError):
    """Raised when a masked normalisation has no admissible entry."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A named leaf tensor that the optimiser updates."""

    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Skip graph construction in this thread (inference)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents or not grad_enabled():
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def matmul(a, b):
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), backward)


def affine(x, weight, bias):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"affine: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = (flat @ weight.data + bias.data).reshape(lead + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(flat.T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _node(out, (x, weight, bias), backward)


# ---------------------------------------------------------------- pointwise


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        x._accumulate(g * pos)

    return _node(np.where(pos, x.data, 0.0), (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _node(out, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return _node(out, (x,), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return _node(out, (x,), backward)


def log(x):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g / x.data)

    return _node(np.log(x.data), (x,), backward)


def where(cond, a, b):
    """Select from ``a`` where ``cond`` holds, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), backward)


def straight_through(hard, soft):
    """Forward value of ``hard`` with the gradient routed entirely to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")

    def backward(g):
        soft._accumulate(g)

    return _node(hard.copy(), (soft,), backward)


# ---------------------------------------------------------------- reductions and shape


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(out, (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _node(np.transpose(x.data, axes), (x,), backward)


def swapaxes(x, a1=-1, a2=-2):
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def take(x, index):
    """Numpy-style indexing (basic or advanced) with scatter-add gradient."""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _node(np.array(out, copy=True), (x,), backward)


def embedding_lookup(table, indices):
    """Rows of ``table`` selected by an integer array of any shape."""
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("embedding_lookup needs integer indices")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"{indices.min()}..{indices.max()}"
        )
    return take(table, indices)


def concat(tensors: Sequence, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors: Sequence, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- normalisation


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply optional scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        if gamma.shape != (d,) or beta is None or beta.shape != (d,):
            raise ShapeError("layer_norm: gamma/beta must have shape (d,)")
        out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)
        if gamma is not None:
            lead = tuple(range(g.ndim - 1))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=lead))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=lead))

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _node(out, parents, backward)


def _prepare_mask(logits, mask):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise MaskError("masked normalisation with an all-false mask row")
    return mask


def softmax_masked(logits, mask):
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked-out logits are replaced by a large negative constant before
    normalisation and the corresponding outputs are set to exactly zero.
    """
    logits = as_tensor(logits)
    mask = _prepare_mask(logits, mask)
    z = np.where(mask, logits.data, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (logits,), backward)


def log_softmax_masked(logits, mask):
    """Log-probabilities of :func:`softmax_masked`.

    Entries outside the mask hold 0.0 (not ``-inf``) and receive no gradient;
    callers must only read admissible positions.
    """
    logits = as_tensor(logits)
    mask = _prepare_mask(logits, mask)
    z = np.where(mask, logits.data, MASK_FILL)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.where(mask, np.exp(z - zmax), 0.0).sum(axis=-1, keepdims=True))
    out = np.where(mask, logits.data - lse, 0.0)
    p = np.where(mask, np.exp(out), 0.0)

    def backward(g):
        g = np.where(mask, g, 0.0)
        logits._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (logits,), backward)


def mean_masked(x, mask):
    """Average the rows of ``x`` (axis -2) where ``mask`` (shape x.shape[:-1]) is true."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mean_masked: mask {m.shape} vs rows {x.shape[:-1]}")
    count = m.sum(axis=-1, keepdims=True)
    if (count == 0).any():
        raise MaskError("mean_masked over a sequence with no valid row")
    w = (m / count)[..., None]
    # zero rows out with where() so non-finite padding cannot leak through 0 * x
    out = np.where(w > 0, x.data, 0.0)
    out = (out * w).sum(axis=-2)

    def backward(g):
        x._accumulate(g[..., None, :] * w)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------- model building blocks


def sinusoidal_positions(length, d):
    """Fixed positional table: sin on even channels, cos on odd channels."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / d)
    return np.where(np.arange(d) % 2 == 0, np.sin(angle), np.cos(angle))


def lstm_cell_step(x, h, c, w_x, w_h, bias):
    """One LSTM step with gate order (input, forget, cell, output)."""
    gates = affine(x, w_x, bias) + matmul(h, w_h)
    d = h.shape[-1]
    i = sigmoid(gates[..., 0:d])
    f = sigmoid(gates[..., d:2 * d])
    g = tanh(gates[..., 2 * d:3 * d])
    o = sigmoid(gates[..., 3 * d:4 * d])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def dropout_keep_mask(shape, p, key: Iterable[int]):
    """Deterministic keep-mask drawn from a counter-based generator.

    ``key`` is ``(seed, layer_id, step, call)``; the first two form the Philox
    key and the last two its counter, so masks are reproducible per call site.
    """
    seed, layer_id, step, call = (int(k) for k in key)
    bitgen = np.random.Philox(key=[seed & (2**64 - 1), layer_id], counter=[step, call, 0, 0])
    return np.random.Generator(bitgen).random(shape) >= p


def dropout(x, p, train, key=(0, 0, 0, 0)):
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    scale = dropout_keep_mask(x.shape, p, key) / (1.0 - p)
    return mul(x, scale)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, hyper):
    """Write ``params`` (name -> array-like) and ``hyper`` (JSON-able) to ``path``."""
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value, dtype="<f8"
        )
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"hyper": hyper, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    values = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    params = {}
    for e in header["tensors"]:
        n = math.prod(e["shape"])
        params[e["name"]] = values[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return params, header["hyper"]
