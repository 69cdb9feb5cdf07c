"""Layers assembled from :mod:`portseq.autodiff` primitives.

Layers register their parameters in a shared :class:`ParameterStore` under
dotted names, which doubles as the checkpoint namespace.  Dropout call sites
receive a stable integer id at construction time so their masks can be keyed
deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


class ParameterStore:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Parameter] = {}
        self._dropout_ids = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self.params[name] = p
        return p

    def glorot(self, name, d_in, d_out):
        limit = math.sqrt(6.0 / (d_in + d_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=(d_in, d_out)))

    def zeros(self, name, *shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, *shape):
        return self.add(name, np.ones(shape))

    def normal(self, name, *shape, scale=0.1):
        return self.add(name, self.rng.normal(0.0, scale, size=shape))

    def dropout_id(self):
        self._dropout_ids += 1
        return self._dropout_ids

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64, copy=True)


@dataclass
class DropoutContext:
    """Training flag plus the counters that key dropout masks."""

    train: bool = False
    p: float = 0.0
    seed: int = 0
    step: int = 0
    calls: dict = field(default_factory=dict)

    def apply(self, x, layer_id):
        if not self.train or self.p == 0.0:
            return x
        call = self.calls.get(layer_id, 0)
        self.calls[layer_id] = call + 1
        return ad.dropout(x, self.p, True, key=(self.seed, layer_id, self.step, call))


EVAL = DropoutContext()


class Linear:
    def __init__(self, store, name, d_in, d_out):
        self.weight = store.glorot(f"{name}.weight", d_in, d_out)
        self.bias = store.zeros(f"{name}.bias", d_out)

    def __call__(self, x):
        return ad.affine(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store, name, d):
        self.gamma = store.ones(f"{name}.gamma", d)
        self.beta = store.zeros(f"{name}.beta", d)

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class Embedding:
    def __init__(self, store, name, n, d):
        self.table = store.normal(f"{name}.table", n, d)

    def __call__(self, indices):
        return ad.embedding_lookup(self.table, indices)


class FeedForward:
    def __init__(self, store, name, d, d_ff):
        self.lin1 = Linear(store, f"{name}.lin1", d, d_ff)
        self.lin2 = Linear(store, f"{name}.lin2", d_ff, d)

    def __call__(self, x):
        return self.lin2(ad.relu(self.lin1(x)))


def scaled_dot_attention(q, k, v, mask):
    """softmax(q k^T / sqrt(d)) v with a boolean admissibility mask."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.matmul(q, ad.swapaxes(k)) * scale
    return ad.matmul(ad.softmax_masked(scores, mask), v)


class MultiHeadAttention:
    def __init__(self, store, name, d, heads):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)

    def _split(self, x):
        b, length, d = x.shape
        x = ad.reshape(x, (b, length, self.heads, d // self.heads))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, query, memory, mask):
        """``mask`` has shape (B, Lq, Lk) and marks admissible keys."""
        b, lq, d = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        out = scaled_dot_attention(q, k, v, np.asarray(mask, dtype=bool)[:, None, :, :])
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, lq, d))
        return self.o(out)


class EncoderLayer:
    """Post-norm Transformer encoder layer with key-padding mask."""

    def __init__(self, store, name, d, heads, d_ff):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads)
        self.ff = FeedForward(store, f"{name}.ff", d, d_ff)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.drop1 = store.dropout_id()
        self.drop2 = store.dropout_id()

    def __call__(self, x, valid, ctx):
        mask = np.broadcast_to(valid[:, None, :], (x.shape[0], x.shape[1], x.shape[1]))
        x = self.ln1(x + ctx.apply(self.attn(x, x, mask), self.drop1))
        return self.ln2(x + ctx.apply(self.ff(x), self.drop2))


class DecoderLayer:
    """Post-norm decoder layer: causal self-attention, cross-attention, FFN."""

    def __init__(self, store, name, d, heads, d_ff):
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", d, heads)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", d, heads)
        self.ff = FeedForward(store, f"{name}.ff", d, d_ff)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ln3 = LayerNorm(store, f"{name}.ln3", d)
        self.drops = [store.dropout_id() for _ in range(3)]

    def __call__(self, x, memory, ctx):
        b, length, _ = x.shape
        causal = np.broadcast_to(np.tril(np.ones((length, length), dtype=bool)), (b, length, length))
        x = self.ln1(x + ctx.apply(self.self_attn(x, x, causal), self.drops[0]))
        cross = np.ones((b, length, memory.shape[1]), dtype=bool)
        x = self.ln2(x + ctx.apply(self.cross_attn(x, memory, cross), self.drops[1]))
        return self.ln3(x + ctx.apply(self.ff(x), self.drops[2]))


class LSTM:
    """Single-direction LSTM returning the final hidden state."""

    def __init__(self, store, name, d_in, d_hidden):
        self.d = d_hidden
        self.w_x = store.glorot(f"{name}.w_x", d_in, 4 * d_hidden)
        self.w_h = store.glorot(f"{name}.w_h", d_hidden, 4 * d_hidden)
        bias = np.zeros(4 * d_hidden)
        bias[d_hidden:2 * d_hidden] = 1.0  # forget-gate bias
        self.bias = store.add(f"{name}.bias", bias)

    def final_state(self, steps):
        batch = steps[0].shape[0]
        h = ad.Tensor(np.zeros((batch, self.d)))
        c = ad.Tensor(np.zeros((batch, self.d)))
        for x in steps:
            h, c = ad.lstm_cell_step(x, h, c, self.w_x, self.w_h, self.bias)
        return h


class BiLSTM:
    """Concatenation of the forward final state and the backward final state."""

    def __init__(self, store, name, d_in, d_hidden):
        self.fwd = LSTM(store, f"{name}.fwd", d_in, d_hidden)
        self.bwd = LSTM(store, f"{name}.bwd", d_in, d_hidden)

    def __call__(self, x):
        """``x`` has shape (B, T, d_in); returns (B, 2 * d_hidden)."""
        steps = [x[:, t, :] for t in range(x.shape[1])]
        return ad.concat([self.fwd.final_state(steps), self.bwd.final_state(steps[::-1])], axis=-1)
