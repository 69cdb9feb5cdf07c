"""Stepwise and whole-sequence accuracy with sentinel-aware filtering.

A metric with no valid sample is reported as ``None`` rather than 0 so tiny
strata never masquerade as failures.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

STRATA = (("head", 0.2), ("body", 0.5), ("tail", 0.3))


def _as_arrays(preds, targets):
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(targets, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    return p, t


def step_accuracy(preds, targets, h: int, sentinel: int) -> float | None:
    """Share of samples with a real port at step ``h`` (1-based) predicted exactly."""
    p, t = _as_arrays(preds, targets)
    if not 1 <= h <= t.shape[1]:
        raise ValueError(f"step {h} outside 1..{t.shape[1]}")
    valid = t[:, h - 1] != sentinel
    n = int(valid.sum())
    if n == 0:
        return None
    return float((p[valid, h - 1] == t[valid, h - 1]).sum() / n)


def avg_accuracy(acc: Sequence[float | None]) -> float | None:
    """Unweighted mean of stepwise accuracies; undefined if any step is."""
    acc = list(acc)
    if not acc or any(a is None for a in acc):
        return None
    return float(np.mean(acc))


def seq_accuracy(preds, targets, sentinel: int) -> float | None:
    """Exact-route accuracy over samples whose every target is a real port."""
    p, t = _as_arrays(preds, targets)
    complete = (t != sentinel).all(axis=1)
    n = int(complete.sum())
    if n == 0:
        return None
    return float((p[complete] == t[complete]).all(axis=1).sum() / n)


@dataclass
class MetricReport:
    acc: list
    avg_acc: float | None
    seq_acc: float | None
    valid_counts: list
    seq_count: int
    strata: dict = field(default_factory=dict)

    def as_dict(self):
        out = {f"acc_{h + 1}": a for h, a in enumerate(self.acc)}
        out.update(avg_acc=self.avg_acc, seq_acc=self.seq_acc,
                   valid_counts=self.valid_counts, seq_count=self.seq_count)
        if self.strata:
            out["strata"] = self.strata
        return out

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        rows = [(f"Acc_{h + 1}", fmt(a), str(n)) for h, (a, n) in enumerate(zip(self.acc, self.valid_counts))]
        rows.append(("AvgAcc", fmt(self.avg_acc), ""))
        rows.append(("SeqAcc", fmt(self.seq_acc), str(self.seq_count)))
        for name, accs in self.strata.items():
            for h, a in enumerate(accs["acc"]):
                rows.append((f"{name} Acc_{h + 1}", fmt(a), str(accs["valid_counts"][h])))
        width = max(len(r[0]) for r in rows)
        lines = [f"{'metric'.ljust(width)}  value      n", "-" * (width + 18)]
        lines += [f"{a.ljust(width)}  {b.ljust(9)}  {c}" for a, b, c in rows]
        return "\n".join(lines)


def frequency_strata(train_targets, sentinel: int) -> dict[int, str]:
    """Assign each port seen in training to head/body/tail by call frequency.

    Ports are ranked by descending count (ties by index); the first 20% of the
    ranked ports are head, the next 50% body and the rest tail.
    """
    counts = Counter(int(x) for x in np.asarray(train_targets).ravel() if x != sentinel)
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    n = len(ranked)
    bounds, acc = [], 0.0
    for _, share in STRATA:
        acc += share
        bounds.append(int(round(acc * n)))
    out, lo = {}, 0
    for (name, _), hi in zip(STRATA, bounds):
        for p in ranked[lo:hi]:
            out[p] = name
        lo = hi
    return out


def evaluate_predictions(preds, targets, sentinel: int, strata: dict[int, str] | None = None) -> MetricReport:
    p, t = _as_arrays(preds, targets)
    horizon = t.shape[1]
    acc = [step_accuracy(p, t, h, sentinel) for h in range(1, horizon + 1)]
    report = MetricReport(
        acc=acc,
        avg_acc=avg_accuracy(acc),
        seq_acc=seq_accuracy(p, t, sentinel),
        valid_counts=[int((t[:, h] != sentinel).sum()) for h in range(horizon)],
        seq_count=int((t != sentinel).all(axis=1).sum()),
    )
    if strata is not None:
        labels = np.vectorize(lambda x: strata.get(int(x), "unseen"), otypes=[object])(t) if t.size else t
        for name in [s for s, _ in STRATA] + ["unseen"]:
            member = (labels == name) & (t != sentinel)
            accs, counts = [], []
            for h in range(horizon):
                n = int(member[:, h].sum())
                counts.append(n)
                accs.append(float((p[member[:, h], h] == t[member[:, h], h]).mean()) if n else None)
            if any(counts):
                report.strata[name] = {"acc": accs, "valid_counts": counts}
    return report


__all__ = ["step_accuracy", "avg_accuracy", "seq_accuracy", "MetricReport",
           "frequency_strata", "evaluate_predictions", "STRATA"]
