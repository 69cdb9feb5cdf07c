"""The retrieval-enhanced, connectivity-constrained port-sequence network.

Four blocks, each usable on its own:

* a Transformer trajectory encoder pooling AIS features into one vector,
* a BiLSTM encoder for the continuations of retrieved scenarios,
* a single-query cross-attention fusion of the two,
* an autoregressive decoder whose logits are masked to the ports reachable
  in exactly ``h`` legs from the origin.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import DYN_CONTINUOUS, KIN_CONTINUOUS, STAT_CONTINUOUS, Batch
from .graph import AdjacencyGraph, ReachabilityMask, reachable_set
from .nn import (EVAL, BiLSTM, DecoderLayer, DropoutContext, Embedding, EncoderLayer,
                 FeedForward, LayerNorm, Linear, ParameterStore, scaled_dot_attention)
from .retrieval import QueryContext, RetrievalCache, ScoredScenario


@dataclass
class ModelConfig:
    n_ports: int
    K: int = 3
    H: int = 3
    d_enc: int = 64
    d_r: int = 64
    d_fuse: int = 64
    d_ff: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    top_n: int = 3
    alpha: float = 0.5
    tau_r: float = 1.0
    tau: float = 1.0
    dropout: float = 0.1
    n_imo: int = 1
    n_carrier: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_ports", "K", "H", "d_enc", "d_r", "d_fuse", "d_ff", "heads",
                     "encoder_layers", "decoder_layers", "top_n", "n_imo", "n_carrier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau <= 0 or self.tau_r <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def sentinel(self):
        return self.n_ports + 1

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass
class StepDistribution:
    probs: np.ndarray  # (n_ports,), exactly zero outside the mask
    mask: ReachabilityMask


@dataclass
class Candidates:
    """Retrieved continuations for a batch, padded to a common count."""

    tokens: np.ndarray  # (B, N, H) port indices
    valid: np.ndarray  # (B, N) bool; slot 0 is always valid
    null: np.ndarray  # (B,) bool, True where the bucket was empty
    results: list  # per-sample list[ScoredScenario]


def gumbel_sample(logits, mask, tau=1.0, rng=None, noise=None):
    """Straight-through Gumbel-Softmax over the admissible entries.

    Returns the relaxed sample (hard one-hot in the forward pass, soft
    gradient in the backward pass) and the hard indices.
    """
    if tau <= 0:
        raise ValueError(f"Gumbel temperature must be positive, got {tau}")
    logits = ad.as_tensor(logits)
    if noise is None:
        noise = rng.gumbel(size=logits.shape)
    soft = ad.softmax_masked((logits + noise) * (1.0 / tau), mask)
    idx = np.argmax(soft.data, axis=-1)
    hard = np.zeros_like(soft.data)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return ad.straight_through(hard, soft), idx


def reach_masks(graph: AdjacencyGraph, origins: Sequence[int], h: int):
    """Stacked boolean masks (B, n_ports) plus the mask objects."""
    masks = [reachable_set(graph, int(o), h) for o in origins]
    return np.stack([m.bits for m in masks]), masks


class PortSequenceModel:
    def __init__(self, config: ModelConfig):
        self.config = c = config
        self.store = s = ParameterStore(np.random.default_rng(c.seed))
        # trajectory encoder
        self.proj_kin = Linear(s, "traj.kin", KIN_CONTINUOUS, c.d_enc)
        self.proj_dyn = Linear(s, "traj.dyn", DYN_CONTINUOUS, c.d_enc)
        self.proj_stat = Linear(s, "traj.stat", STAT_CONTINUOUS, c.d_enc)
        self.emb_kin_imo = Embedding(s, "traj.kin_imo", c.n_imo, c.d_enc)
        self.emb_carrier = Embedding(s, "traj.carrier", c.n_carrier, c.d_enc)
        self.emb_stat_imo = Embedding(s, "traj.stat_imo", c.n_imo, c.d_enc)
        self.ln_in = LayerNorm(s, "traj.ln_in", c.d_enc)
        self.encoder = [EncoderLayer(s, f"traj.layer{i}", c.d_enc, c.heads, c.d_ff)
                        for i in range(c.encoder_layers)]
        # historical candidate encoder
        self.emb_hist = Embedding(s, "hist.tokens", c.n_ports + 1, c.d_r)
        self.bilstm = BiLSTM(s, "hist.bilstm", c.d_r, c.d_r)
        self.proj_r = Linear(s, "hist.proj", 2 * c.d_r, c.d_r)
        self.null_candidate = s.normal("hist.null", c.d_r)
        # fusion
        self.fuse_q = Linear(s, "fuse.q", c.d_enc, c.d_fuse)
        self.fuse_k = Linear(s, "fuse.k", c.d_r, c.d_fuse)
        self.fuse_v = Linear(s, "fuse.v", c.d_r, c.d_fuse)
        self.fuse_ln1 = LayerNorm(s, "fuse.ln1", c.d_fuse)
        self.fuse_ln2 = LayerNorm(s, "fuse.ln2", c.d_fuse)
        self.fuse_ff = FeedForward(s, "fuse.ff", c.d_fuse, c.d_ff)
        self.fuse_drop = (s.dropout_id(), s.dropout_id())
        # decoder
        self.emb_dec = Embedding(s, "dec.tokens", c.n_ports + 1, c.d_fuse)
        self.bos = s.normal("dec.bos", c.d_fuse)
        self.mem_proj = Linear(s, "dec.memory", c.d_fuse, c.d_fuse)
        self.decoder = [DecoderLayer(s, f"dec.layer{i}", c.d_fuse, c.heads, c.d_ff)
                        for i in range(c.decoder_layers)]
        self.out = Linear(s, "dec.out", c.d_fuse, c.n_ports)
        self._positions = ad.sinusoidal_positions(max(512, c.H + 1), c.d_enc)
        self._dec_positions = ad.sinusoidal_positions(c.H + 1, c.d_fuse)

    @property
    def params(self):
        return self.store.params

    def context(self, train=False, step=0):
        return DropoutContext(train=train, p=self.config.dropout, seed=self.config.seed, step=step)

    # ------------------------------------------------------------ trajectory

    def encode_trajectory(self, batch: Batch, ctx: DropoutContext = EVAL) -> Tensor:
        """Masked-mean-pooled Transformer summary of each trajectory, (B, d_enc)."""
        mask = batch.mask
        if not mask.any(axis=1).all():
            raise ad.MaskError("trajectory with no valid observation")
        z_kin = self.proj_kin(batch.kin) + self.emb_kin_imo(batch.kin_imo)
        z_dyn = self.proj_dyn(batch.dyn)
        z_stat = self.proj_stat(batch.stat) + self.emb_carrier(batch.carrier) + self.emb_stat_imo(batch.imo)
        b, length = mask.shape
        u = self.ln_in(z_kin + z_dyn + ad.reshape(z_stat, (b, 1, self.config.d_enc)))
        if length > len(self._positions):
            self._positions = ad.sinusoidal_positions(length, self.config.d_enc)
        u = u + self._positions[:length]
        for layer in self.encoder:
            u = layer(u, mask, ctx)
        return ad.mean_masked(u, mask)

    # ------------------------------------------------------------ history

    def gather_candidates(self, queries: Sequence[QueryContext], retrieve: RetrievalCache,
                          exclude: Sequence[int | None] | None = None) -> Candidates:
        c = self.config
        exclude = exclude if exclude is not None else [None] * len(queries)
        results = [retrieve(q, ex) for q, ex in zip(queries, exclude)]
        n = max(1, max(len(r) for r in results))
        tokens = np.full((len(queries), n, c.H), c.sentinel, dtype=np.int64)
        valid = np.zeros((len(queries), n), dtype=bool)
        null = np.zeros(len(queries), dtype=bool)
        for i, res in enumerate(results):
            if not res:
                null[i] = True
                valid[i, 0] = True
            for j, r in enumerate(res):
                tokens[i, j] = r.scenario.continuation
                valid[i, j] = True
        return Candidates(tokens, valid, null, results)

    def encode_history(self, cands: Candidates) -> Tensor:
        """BiLSTM summaries of candidate continuations, (B, N, d_r).

        Samples with an empty bucket get the learned null row in slot 0.
        """
        b, n, h = cands.tokens.shape
        emb = self.emb_hist(cands.tokens.reshape(b * n, h) - 1)
        z = self.proj_r(self.bilstm(emb))
        z = ad.reshape(z, (b, n, self.config.d_r))
        if cands.null.any():
            slot = np.zeros((b, n, 1), dtype=bool)
            slot[cands.null, 0] = True
            z = ad.where(slot, ad.reshape(self.null_candidate, (1, 1, -1)), z)
        return z

    # ------------------------------------------------------------ fusion

    def fuse(self, z_traj: Tensor, z_hist: Tensor, valid: np.ndarray,
             ctx: DropoutContext = EVAL) -> Tensor:
        """Cross-attention of the trajectory query over the candidates, (B, d_fuse)."""
        b = z_traj.shape[0]
        d = self.config.d_fuse
        q = ad.reshape(self.fuse_q(z_traj), (b, 1, d))
        k = self.fuse_k(z_hist)
        v = self.fuse_v(z_hist)
        attended = scaled_dot_attention(q, k, v, np.asarray(valid, dtype=bool)[:, None, :])
        z = self.fuse_ln1(q + ctx.apply(attended, self.fuse_drop[0]))
        z = self.fuse_ln2(z + ctx.apply(self.fuse_ff(z), self.fuse_drop[1]))
        return ad.reshape(z, (b, d))

    # ------------------------------------------------------------ decoder

    def embed_tokens(self, tokens) -> Tensor:
        """Decoder embeddings of 1-based port indices (sentinel allowed)."""
        return self.emb_dec(np.asarray(tokens, dtype=np.int64) - 1)

    def embed_relaxed(self, relaxed: Tensor) -> Tensor:
        """Embedding of a (B, n_ports) relaxed one-hot over real ports."""
        table = ad.take(self.emb_dec.table, slice(0, self.config.n_ports))
        return ad.matmul(relaxed, table)

    def decoder_states(self, z_fuse: Tensor, prefix: Sequence[Tensor],
                       ctx: DropoutContext = EVAL) -> Tensor:
        """Decoder outputs for BOS followed by ``prefix`` embeddings, (B, 1 + len(prefix), d)."""
        b = z_fuse.shape[0]
        d = self.config.d_fuse
        bos = ad.mul(ad.reshape(self.bos, (1, 1, d)), np.ones((b, 1, 1)))
        x = ad.concat([bos] + [ad.reshape(p, (b, 1, d)) for p in prefix], axis=1)
        length = x.shape[1]
        if length > len(self._dec_positions):
            self._dec_positions = ad.sinusoidal_positions(length, d)
        x = x + self._dec_positions[:length]
        memory = ad.reshape(self.mem_proj(z_fuse), (b, 1, d))
        for layer in self.decoder:
            x = layer(x, memory, ctx)
        return x

    def step_logits(self, z_fuse: Tensor, prefix: Sequence[Tensor],
                    ctx: DropoutContext = EVAL) -> Tensor:
        states = self.decoder_states(z_fuse, prefix, ctx)
        last = ad.take(states, (slice(None), -1, slice(None)))
        return self.out(last)

    def decode_step(self, z_fuse: Tensor, prefix_tokens, masks: np.ndarray) -> Tensor:
        """Probabilities over ports for the next step, zero outside ``masks``."""
        prefix_tokens = np.asarray(prefix_tokens, dtype=np.int64).reshape(z_fuse.shape[0], -1)
        prefix = [self.embed_tokens(prefix_tokens[:, j]) for j in range(prefix_tokens.shape[1])]
        return ad.softmax_masked(self.step_logits(z_fuse, prefix), masks)

    # ------------------------------------------------------------ inference

    def greedy_decode(self, batch: Batch, graph: AdjacencyGraph, retrieve: RetrievalCache,
                      return_details: bool = False):
        """Constrained greedy decoding; ties go to the lowest port index.

        Returns an (B, H) array of port indices, plus per-step probabilities,
        masks and retrieval results when ``return_details`` is set.
        """
        c = self.config
        b = len(batch)
        preds = np.zeros((b, c.H), dtype=np.int64)
        details = {"probs": [], "masks": [], "retrieved": [], "queries": []}
        with ad.no_grad():
            z_traj = self.encode_trajectory(batch)
            prefix = []
            for h in range(1, c.H + 1):
                queries = [QueryContext.build(batch.hist[i], preds[i, :h - 1]) for i in range(b)]
                cands = self.gather_candidates(queries, retrieve)
                z_fuse = self.fuse(z_traj, self.encode_history(cands), cands.valid)
                bits, masks = reach_masks(graph, batch.origins, h)
                probs = ad.softmax_masked(self.step_logits(z_fuse, prefix), bits).data
                preds[:, h - 1] = np.argmax(probs, axis=1) + 1
                prefix.append(self.embed_tokens(preds[:, h - 1]))
                if return_details:
                    details["probs"].append(probs)
                    details["masks"].append(masks)
                    details["retrieved"].append(cands.results)
                    details["queries"].append(queries)
        return (preds, details) if return_details else preds

    def sequence_probability(self, batch: Batch, sequences: np.ndarray, graph: AdjacencyGraph,
                             retrieve: RetrievalCache) -> np.ndarray:
        """Per-step probabilities p(y_h | y_<h) of given sequences, (B, H)."""
        c = self.config
        b = len(batch)
        out = np.zeros((b, c.H))
        with ad.no_grad():
            z_traj = self.encode_trajectory(batch)
            prefix = []
            for h in range(1, c.H + 1):
                queries = [QueryContext.build(batch.hist[i], sequences[i, :h - 1]) for i in range(b)]
                cands = self.gather_candidates(queries, retrieve)
                z_fuse = self.fuse(z_traj, self.encode_history(cands), cands.valid)
                bits, _ = reach_masks(graph, batch.origins, h)
                probs = ad.softmax_masked(self.step_logits(z_fuse, prefix), bits).data
                out[:, h - 1] = probs[np.arange(b), sequences[:, h - 1] - 1]
                prefix.append(self.embed_tokens(sequences[:, h - 1]))
        return out

    # ------------------------------------------------------------ persistence

    def save(self, path, extra: dict | None = None):
        hyper = {"model": self.config.as_dict(), **(extra or {})}
        ad.save_checkpoint(path, self.params, hyper)

    @classmethod
    def load(cls, path):
        values, hyper = ad.load_checkpoint(path)
        model = cls(ModelConfig(**hyper["model"]))
        model.store.load_state(values)
        return model, hyper


def make_retriever(model: PortSequenceModel, db) -> RetrievalCache:
    c = model.config
    return RetrievalCache(db, c.top_n, c.alpha, c.sentinel, c.tau_r)


def top_k(probs: np.ndarray, k: int = 5) -> list[tuple[int, float]]:
    """Highest-probability ports (1-based) of one step distribution."""
    order = np.lexsort((np.arange(len(probs)), -probs))[:k]
    return [(int(i) + 1, float(probs[i])) for i in order if probs[i] > 0]


__all__ = ["ModelConfig", "PortSequenceModel", "StepDistribution", "Candidates",
           "gumbel_sample", "reach_masks", "make_retriever", "top_k", "ScoredScenario"]
