"""Similarity retrieval of historical port-call scenarios.

A scenario pairs the port chain that led to an origin with the ``H`` ports
that followed.  Queries are scored against every scenario sharing the query
origin by a blend of set overlap (Jaccard) and positional agreement (PMR).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class HistoricalScenario:
    prefix: tuple
    continuation: tuple
    origin: int


@dataclass(frozen=True)
class QueryContext:
    tokens: tuple
    origin: int
    step: int

    @classmethod
    def build(cls, hist: Sequence[int], decoded: Sequence[int]):
        """Concatenate the observed history with the ports decoded so far."""
        tokens = tuple(int(p) for p in hist) + tuple(int(p) for p in decoded)
        return cls(tokens, int(hist[-1]), len(decoded) + 1)


@dataclass(frozen=True)
class ScoredScenario:
    id: int
    scenario: HistoricalScenario
    jac: float
    pmr: float
    score: float
    weight: float = float("nan")


class HistoryDB:
    """Write-once store of scenarios bucketed by origin port."""

    def __init__(self, horizon: int, sentinel: int | None = None):
        self.horizon = horizon
        self.sentinel = sentinel
        self.scenarios: list[HistoricalScenario] = []
        self.buckets: dict[int, list[int]] = {}
        self.frozen = False

    def __len__(self):
        return len(self.scenarios)

    def add(self, scenario: HistoricalScenario) -> int:
        if self.frozen:
            raise RuntimeError("history database is frozen")
        if len(scenario.continuation) != self.horizon:
            raise ValueError(f"continuation length {len(scenario.continuation)} != H={self.horizon}")
        sid = len(self.scenarios)
        self.scenarios.append(scenario)
        self.buckets.setdefault(scenario.origin, []).append(sid)
        return sid

    def freeze(self):
        self.frozen = True
        return self

    def bucket(self, origin: int) -> list[int]:
        return self.buckets.get(origin, [])

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"horizon": self.horizon, "sentinel": self.sentinel}) + "\n")
            for i, s in enumerate(self.scenarios):
                fh.write(json.dumps({"id": i, "origin": s.origin, "prefix": list(s.prefix),
                                     "continuation": list(s.continuation)}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline())
            db = cls(header["horizon"], header.get("sentinel"))
            for line in fh:
                if line.strip():
                    r = json.loads(line)
                    db.add(HistoricalScenario(tuple(r["prefix"]), tuple(r["continuation"]), r["origin"]))
        return db.freeze()


def _valid(tokens, sentinel):
    return {t for t in tokens if t != sentinel}


def jaccard(p: Sequence[int], c: Sequence[int], sentinel: int) -> float:
    """Intersection over union of the distinct non-sentinel ports."""
    u, v = _valid(p, sentinel), _valid(c, sentinel)
    union = len(u | v)
    return len(u & v) / union if union else 0.0


def pmr(p: Sequence[int], c: Sequence[int], sentinel: int) -> float:
    """Share of aligned positions (both non-sentinel) holding the same port."""
    if len(p) != len(c):
        raise ValueError(f"PMR needs equal lengths, got {len(p)} and {len(c)}")
    both = matched = 0
    for a, b in zip(p, c):
        if a != sentinel and b != sentinel:
            both += 1
            matched += a == b
    return matched / max(1, both)


def align_prefix(prefix: Sequence[int], u: int, sentinel: int) -> tuple:
    """Keep the ``u`` most recent entries, left-padding with the sentinel."""
    prefix = tuple(prefix)[-u:] if u > 0 else ()
    return (sentinel,) * (u - len(prefix)) + prefix


def retrieval_weights(scores: Sequence[float], tau_r: float = 1.0) -> np.ndarray:
    if tau_r <= 0:
        raise ValueError(f"retrieval temperature must be positive, got {tau_r}")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("retrieval_weights needs at least one score")
    z = s / tau_r
    e = np.exp(z - z.max())
    return e / e.sum()


def retrieve_top_n(db: HistoryDB, query: QueryContext, n: int = 3, alpha: float = 0.5,
                   sentinel: int | None = None, tau_r: float = 1.0) -> list[ScoredScenario]:
    """Top-``n`` scenarios of the query origin's bucket, best first.

    Ties are broken by ascending insertion id.  An empty bucket yields an
    empty list.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    sentinel = db.sentinel if sentinel is None else sentinel
    if sentinel is None:
        raise ValueError("sentinel index unknown; pass sentinel= or set db.sentinel")
    u = len(query.tokens)
    scored = []
    for sid in db.bucket(query.origin):
        sc = db.scenarios[sid]
        aligned = align_prefix(sc.prefix, u, sentinel)
        j = jaccard(aligned, query.tokens, sentinel)
        m = pmr(aligned, query.tokens, sentinel)
        scored.append((-(alpha * j + (1.0 - alpha) * m), sid, j, m))
    scored.sort()
    top = scored[:n]
    if not top:
        return []
    w = retrieval_weights([-t[0] for t in top], tau_r)
    return [ScoredScenario(sid, db.scenarios[sid], j, m, -neg, float(wi))
            for (neg, sid, j, m), wi in zip(top, w)]


class RetrievalCache:
    """Memoises retrieve_top_n per (origin, query tokens); the database is frozen.

    ``exclude`` drops one scenario id from the ranking, which keeps a training
    segment from retrieving its own continuation.
    """

    def __init__(self, db: HistoryDB, n: int, alpha: float, sentinel: int, tau_r: float = 1.0):
        self.db, self.n, self.alpha, self.sentinel, self.tau_r = db, n, alpha, sentinel, tau_r
        self._memo: dict[tuple, list[ScoredScenario]] = {}

    def _ranked(self, query):
        key = (query.origin, query.tokens)
        hit = self._memo.get(key)
        if hit is None:
            hit = retrieve_top_n(self.db, query, self.n + 1, self.alpha, self.sentinel, self.tau_r)
            self._memo[key] = hit
        return hit

    def __call__(self, query: QueryContext, exclude: int | None = None) -> list[ScoredScenario]:
        top = [r for r in self._ranked(query) if r.id != exclude][:self.n]
        if not top:
            return []
        w = retrieval_weights([r.score for r in top], self.tau_r)
        return [replace(r, weight=float(wi)) for r, wi in zip(top, w)]


def diagnostics_record(query: QueryContext, results: Sequence[ScoredScenario]) -> dict:
    return {
        "origin": query.origin,
        "step": query.step,
        "query": list(query.tokens),
        "ids": [r.id for r in results],
        "jac": [r.jac for r in results],
        "pmr": [r.pmr for r in results],
        "score": [r.score for r in results],
        "weight": [r.weight for r in results],
    }


__all__ = [
    "HistoricalScenario", "QueryContext", "ScoredScenario", "HistoryDB", "RetrievalCache",
    "jaccard", "pmr", "align_prefix", "retrieve_top_n", "retrieval_weights", "diagnostics_record",
]
