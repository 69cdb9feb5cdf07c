"""Independent oracles and small fixtures shared by the tests."""

from __future__ import annotations

import numpy as np

from portseq import autodiff as ad
from portseq.dataset import VoyageSegment, make_batch
from portseq.graph import AdjacencyGraph
from portseq.model import ModelConfig, PortSequenceModel
from portseq.retrieval import HistoricalScenario, HistoryDB, RetrievalCache


# ---------------------------------------------------------------- finite differences


def numeric_grad(f, x: np.ndarray, step=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    big = np.maximum(np.abs(a), np.abs(n))
    sel = big >= floor
    if not sel.any():
        return 0.0
    return float((np.abs(a - n)[sel] / big[sel]).max())


def check_op_grad(build, arrays, seed=0, step=1e-5):
    """Compare reverse-mode and finite-difference gradients of ``sum(out * probe)``."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    probe = np.random.default_rng(seed).normal(size=out.shape)
    ad.sum(out * probe).backward()
    worst = 0.0
    for t in tensors:
        def f():
            with ad.no_grad():
                return float((build(*[ad.Tensor(u.data) for u in tensors]).data * probe).sum())
        num = numeric_grad(f, t.data, step)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_error(ana, num))
    return worst


# ---------------------------------------------------------------- graph oracle


def walk_endpoints(n, edges, origin, h):
    """Endpoints of every walk of exactly ``h`` edges, by explicit enumeration."""
    succ = {i: [] for i in range(1, n + 1)}
    for i, j in edges:
        succ[i].append(j)
    ends = set()
    stack = [(origin, 0)]
    seen = set()
    while stack:
        node, depth = stack.pop()
        if depth == h:
            ends.add(node)
            continue
        # a (node, depth) state expands to the same endpoints every time
        if (node, depth) in seen:
            continue
        seen.add((node, depth))
        for nxt in succ[node]:
            stack.append((nxt, depth + 1))
    return ends


def random_digraph(rng, n, p):
    edges = {(i, j) for i in range(1, n + 1) for j in range(1, n + 1) if rng.random() < p}
    return sorted(edges)


# ---------------------------------------------------------------- retrieval oracle


def oracle_top_n(db: HistoryDB, tokens, origin, n, alpha, sentinel):
    """Score every scenario of the bucket with plain set/loop code and stable-sort."""
    u = len(tokens)
    rows = []
    for sid, sc in enumerate(db.scenarios):
        if sc.origin != origin:
            continue
        pre = list(sc.prefix)
        aligned = pre[len(pre) - u:] if len(pre) >= u else [sentinel] * (u - len(pre)) + pre
        a = set(aligned) - {sentinel}
        b = set(tokens) - {sentinel}
        jac = len(a & b) / len(a | b) if a | b else 0.0
        both = [(x, y) for x, y in zip(aligned, tokens) if x != sentinel and y != sentinel]
        pm = sum(x == y for x, y in both) / max(1, len(both))
        rows.append((sid, alpha * jac + (1 - alpha) * pm))
    rows.sort(key=lambda r: -r[1])  # stable: equal scores keep insertion order
    return [sid for sid, _ in rows[:n]]


# ---------------------------------------------------------------- tiny model fixtures


def make_segment(rng, hist, future, length=4, imo="1000001", start=0.0, n_imo=3, n_carrier=2):
    kin = np.column_stack([rng.normal(size=(length, 5)), np.full(length, 1 + int(rng.integers(n_imo - 1)))])
    stat = np.concatenate([rng.normal(size=3), [1 + int(rng.integers(n_carrier - 1)), 1]])
    return VoyageSegment(
        imo=imo, start_time=start, end_time=start + 3600.0 * length,
        x_kin=kin, x_dyn=rng.normal(size=(length, 5)), x_stat=stat,
        mask=np.ones(length, dtype=bool),
        hist_ports=np.array(hist, dtype=np.int64), future_ports=np.array(future, dtype=np.int64),
        port_chain=tuple(p for p in hist if p != 0), split="train")


def tiny_config(n_ports=6, d=8, N=2, H=3, K=3, dropout=0.0, seed=0, **kw):
    return ModelConfig(n_ports=n_ports, K=K, H=H, d_enc=d, d_r=d, d_fuse=d, d_ff=2 * d, heads=2,
                       encoder_layers=1, decoder_layers=1, top_n=N, dropout=dropout, n_imo=3,
                       n_carrier=2, seed=seed, **kw)


def ring_graph(n):
    """Each port links to its two ring neighbours, so every mask has two ports."""
    edges = [(i, i % n + 1) for i in range(1, n + 1)] + [(i % n + 1, i) for i in range(1, n + 1)]
    return AdjacencyGraph(n, edges)


def tiny_world(seed=0, n_ports=6, batch=4, lengths=(3, 5, 2, 4), N=2, H=3, K=3, with_db=True):
    """Model, batch, graph and retriever on a ring of ``n_ports`` ports."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(n_ports=n_ports, N=N, H=H, K=K, seed=seed)
    model = PortSequenceModel(cfg)
    graph = ring_graph(n_ports)
    omega = cfg.sentinel
    segs = []
    for i in range(batch):
        o = 1 + i % n_ports
        hist = [omega] * (K - 2) + [(o - 2) % n_ports + 1, o]
        fut, cur = [], o
        for _ in range(H):
            cur = cur % n_ports + 1
            fut.append(cur)
        segs.append(make_segment(rng, hist, fut, length=lengths[i % len(lengths)], imo=f"{i}",
                                 start=float(i)))
    db = HistoryDB(H, omega)
    if with_db:
        for s in segs:
            db.add(HistoricalScenario(tuple(int(p) for p in s.hist_ports), tuple(int(p) for p in s.future_ports),
                                      s.origin))
            db.add(HistoricalScenario((s.origin,), tuple(int(p) for p in s.future_ports[::-1]), s.origin))
    db.freeze()
    retrieve = RetrievalCache(db, N, 0.5, omega, 1.0)
    return model, make_batch(segs), graph, retrieve, segs
