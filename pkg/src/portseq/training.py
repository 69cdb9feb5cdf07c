"""Connectivity-constrained label-smoothed training with scheduled sampling."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import Batch, VoyageSegment, make_batch
from .graph import AdjacencyGraph
from .metrics import MetricReport, evaluate_predictions
from .model import PortSequenceModel, StepDistribution, gumbel_sample, reach_masks
from .retrieval import QueryContext, RetrievalCache

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epsilon: float = 0.1
    plateau_factor: float = 0.5
    patience: int = 3
    seed: int = 0
    exclude_self: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochReport:
    epoch: int
    ratio: float
    loss: float
    val_acc: list = field(default_factory=list)
    val_avg_acc: float | None = None
    val_seq_acc: float | None = None
    lr: float = 0.0
    valid_pairs: int = 0
    infeasible: int = 0
    seconds: float = 0.0


# ---------------------------------------------------------------- objective


def smoothed_loss(dist: StepDistribution, target: int, epsilon: float) -> float:
    """Label-smoothed negative log-likelihood of one step, smoothing over the feasible set.

    Ports are 1-based; the sentinel target and targets outside the feasible
    set return 0.0.
    """
    bits = dist.mask.bits
    if target < 1 or target > len(bits) or not bits[target - 1]:
        return 0.0
    with np.errstate(divide="ignore"):
        logp = np.log(dist.probs[bits])
    nll = -math.log(dist.probs[target - 1])
    return float((1.0 - epsilon) * nll - epsilon * logp.mean())


def smoothing_weights(targets: np.ndarray, bits: np.ndarray, epsilon: float):
    """Per-row weights so that ``-sum(w * log p)`` is the smoothed loss.

    Returns the weight matrix plus the valid and infeasible row flags.
    Rows whose target is the sentinel or lies outside ``bits`` get zero
    weight.
    """
    b, n = bits.shape
    targets = np.asarray(targets, dtype=np.int64)
    real = (targets >= 1) & (targets <= n)
    idx = np.clip(targets - 1, 0, n - 1)
    feasible = real & bits[np.arange(b), idx]
    infeasible = real & ~feasible
    w = epsilon * bits / bits.sum(axis=1, keepdims=True)
    w[np.arange(b), idx] += 1.0 - epsilon
    w[~feasible] = 0.0
    return w, feasible, infeasible


def teacher_forcing_ratio(epoch: int, total_epochs: int) -> float:
    """Linear decay from 1 at the first epoch to 0 at the last."""
    if total_epochs < 2:
        return 0.0
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{total_epochs - 1}")
    return 1.0 - epoch / (total_epochs - 1)


# ---------------------------------------------------------------- optimisation


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict, lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * p.grad * p.grad
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class PlateauScheduler:
    """Scale the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: AdamW, factor=0.5, patience=3):
        self.optimizer, self.factor, self.patience = optimizer, factor, patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, metric: float | None):
        if metric is not None and metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0
            logger.info("plateau: learning rate now %.3g", self.optimizer.lr)


# ---------------------------------------------------------------- one batch


def self_ids(db, segments: Sequence[VoyageSegment]) -> dict:
    """Map (imo, start_time) of each training segment to its scenario id.

    Relies on build_history_db inserting segments in the given order.
    """
    if len(db) != len(segments):
        raise ValueError("history database and training split differ in size")
    return {(s.imo, s.start_time): i for i, s in enumerate(segments)}


def batch_loss(model: PortSequenceModel, batch: Batch, graph: AdjacencyGraph,
               retrieve: RetrievalCache, epsilon: float, ratio: float,
               rng: np.random.Generator, ctx=None, exclude=None):
    """Summed smoothed loss of a batch under scheduled sampling.

    Returns ``(loss, valid_pairs, infeasible_pairs)``; ``loss`` is a scalar
    Tensor.
    """
    c = model.config
    ctx = ctx if ctx is not None else model.context(train=False)
    b = len(batch)
    z_traj = model.encode_trajectory(batch, ctx)
    decoded = np.zeros((b, c.H), dtype=np.int64)
    prefix = []
    total = None
    valid = infeasible = 0
    for h in range(1, c.H + 1):
        queries = [QueryContext.build(batch.hist[i], decoded[i, :h - 1]) for i in range(b)]
        cands = model.gather_candidates(queries, retrieve, exclude)
        z_fuse = model.fuse(z_traj, model.encode_history(cands), cands.valid, ctx)
        logits = model.step_logits(z_fuse, prefix, ctx)
        bits, _ = reach_masks(graph, batch.origins, h)
        logp = ad.log_softmax_masked(logits, bits)
        targets = batch.targets[:, h - 1]
        w, ok, bad = smoothing_weights(targets, bits, epsilon)
        valid += int(ok.sum())
        infeasible += int(bad.sum())
        step = -ad.sum(logp * w)
        total = step if total is None else total + step
        if h == c.H:
            break
        coin = rng.random(b) < ratio
        truth = model.embed_tokens(targets)
        if coin.all():
            nxt, tokens = truth, targets
        else:
            relaxed, idx = gumbel_sample(logits, bits, c.tau, rng)
            sampled = model.embed_relaxed(relaxed)
            nxt = ad.where(coin[:, None], truth, sampled)
            tokens = np.where(coin, targets, idx + 1)
        prefix.append(nxt)
        decoded[:, h - 1] = tokens
    return total, valid, infeasible


# ---------------------------------------------------------------- epochs


def batches(segments: Sequence[VoyageSegment], size: int, order=None):
    order = np.arange(len(segments)) if order is None else order
    for lo in range(0, len(order), size):
        yield make_batch([segments[i] for i in order[lo:lo + size]])


def predict(model: PortSequenceModel, segments: Sequence[VoyageSegment], graph: AdjacencyGraph,
            retrieve: RetrievalCache, batch_size: int = 256) -> np.ndarray:
    if not segments:
        return np.zeros((0, model.config.H), dtype=np.int64)
    return np.concatenate([model.greedy_decode(b, graph, retrieve)
                           for b in batches(segments, batch_size)])


def evaluate_model(model, segments, graph, retrieve, strata=None, batch_size=256) -> MetricReport:
    preds = predict(model, segments, graph, retrieve, batch_size)
    targets = np.stack([s.future_ports for s in segments]) if segments else preds
    return evaluate_predictions(preds, targets, model.config.sentinel, strata)


def train_epoch(model: PortSequenceModel, optimizer: AdamW, train: Sequence[VoyageSegment],
                graph: AdjacencyGraph, retrieve: RetrievalCache, cfg: TrainConfig, epoch: int,
                ids: dict | None = None) -> EpochReport:
    rng = np.random.default_rng([cfg.seed, epoch])
    ratio = teacher_forcing_ratio(epoch, cfg.epochs)
    order = rng.permutation(len(train))
    started = time.perf_counter()
    loss_sum = 0.0
    valid = infeasible = 0
    for step, batch in enumerate(batches(train, cfg.batch_size, order)):
        ctx = model.context(train=True, step=optimizer.t)
        exclude = [ids.get((s.imo, s.start_time)) for s in batch.segments] if ids else None
        model.store.zero_grad()
        loss, v, bad = batch_loss(model, batch, graph, retrieve, cfg.epsilon, ratio, rng, ctx, exclude)
        if not np.isfinite(loss.data):
            raise NumericalError(
                f"non-finite loss at epoch {epoch}, batch {step}: {float(loss.data)}; "
                f"first IMOs {[s.imo for s in batch.segments[:5]]}")
        valid += v
        infeasible += bad
        if v:
            loss.backward()
            optimizer.step()
        loss_sum += float(loss.data)
    if infeasible:
        logger.warning("epoch %d: %d label-infeasible position(s) skipped", epoch, infeasible)
    return EpochReport(epoch=epoch, ratio=ratio, loss=loss_sum / max(1, valid), lr=optimizer.lr,
                       valid_pairs=valid, infeasible=infeasible,
                       seconds=time.perf_counter() - started)


LOG_FIELDS = ("epoch", "ratio", "loss", "val_acc", "val_avg_acc", "val_seq_acc", "lr")


def fit(model: PortSequenceModel, train: Sequence[VoyageSegment], val: Sequence[VoyageSegment],
        graph: AdjacencyGraph, db, cfg: TrainConfig, log_path=None, checkpoint_path=None,
        on_epoch: Callable[[EpochReport], None] | None = None) -> list[EpochReport]:
    """Run ``cfg.epochs`` epochs; keep the checkpoint with the best validation AvgAcc."""
    c = model.config
    retrieve = RetrievalCache(db, c.top_n, c.alpha, c.sentinel, c.tau_r)
    ids = self_ids(db, train) if cfg.exclude_self else None
    optimizer = AdamW(model.params, cfg.lr, cfg.weight_decay)
    scheduler = PlateauScheduler(optimizer, cfg.plateau_factor, cfg.patience)
    reports = []
    best = -math.inf
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
        for epoch in range(cfg.epochs):
            rep = train_epoch(model, optimizer, train, graph, retrieve, cfg, epoch, ids)
            if val:
                m = evaluate_model(model, val, graph, retrieve)
                rep.val_acc, rep.val_avg_acc, rep.val_seq_acc = m.acc, m.avg_acc, m.seq_acc
            scheduler.step(rep.val_avg_acc)
            reports.append(rep)
            score = rep.val_avg_acc if rep.val_avg_acc is not None else -rep.loss
            if checkpoint_path and score > best:
                best = score
                model.save(checkpoint_path, {"train": asdict(cfg), "epoch": epoch})
            if writer:
                row = asdict(rep)
                writer.writerow([row[k] for k in LOG_FIELDS])
                fh.flush()
            logger.info("epoch %d ratio %.3f loss %.4f val AvgAcc %s SeqAcc %s (%.1fs)", epoch,
                        rep.ratio, rep.loss, rep.val_avg_acc, rep.val_seq_acc, rep.seconds)
            if on_epoch:
                on_epoch(rep)
    finally:
        if fh:
            fh.close()
    return reports


__all__ = ["TrainConfig", "EpochReport", "NumericalError", "smoothed_loss", "smoothing_weights",
           "teacher_forcing_ratio", "AdamW", "PlateauScheduler", "batch_loss", "train_epoch",
           "fit", "predict", "evaluate_model", "batches", "self_ids"]
