"""Exact-length reachability and what it does to decoding.

Run: python3 demos/01_reachability_masks.py
"""
import numpy as np

from portseq.dataset import make_batch, VoyageSegment
from portseq.graph import AdjacencyGraph, build_vocabulary, reachable_set
from portseq.model import ModelConfig, PortSequenceModel
from portseq.retrieval import HistoryDB, RetrievalCache

# Four ports on a one-way loop plus a spur: Antwerp -> Busan -> Colombo -> Durban -> Antwerp,
# and Busan -> Durban as a shortcut.
vocab = build_vocabulary(["Antwerp", "Busan", "Colombo", "Durban"])
A, B, C, D = (vocab.index_of[n] for n in vocab.names)
graph = AdjacencyGraph(len(vocab), [(A, B), (B, C), (C, D), (D, A), (B, D)])
print(graph.dense().astype(int))

# R_h(o) is every port at the end of a walk of exactly h legs.
for h in (1, 2, 3):
    mask = reachable_set(graph, A, h)
    print(f"from Antwerp in {h} leg(s):", sorted(vocab.name(p) for p in mask.ports()))

# A port with no outgoing edge has an empty set; the mask falls back to every
# port and says so.
dead_end = AdjacencyGraph(3, [(1, 2)])
m = reachable_set(dead_end, 2, 1)
print("dead end fallback:", m.fallback, sorted(m.ports()))

# Decoding can only ever put mass on the mask. An untrained model on a
# two-port shuttle therefore has no choice at all.
shuttle = AdjacencyGraph(2, [(1, 2), (2, 1)])
rng = np.random.default_rng(0)
seg = VoyageSegment(
    imo="9000001", start_time=0.0, end_time=3600.0,
    x_kin=np.column_stack([rng.normal(size=(4, 5)), np.ones(4)]), x_dyn=rng.normal(size=(4, 5)),
    x_stat=np.array([0.1, -0.2, 0.3, 1, 1]), mask=np.ones(4, bool),
    hist_ports=np.array([3, 2, 1]), future_ports=np.array([2, 1, 2]), port_chain=(2, 1), split="test")
retrieve = RetrievalCache(HistoryDB(3, 3).freeze(), 3, 0.5, 3)
for seed in range(3):
    model = PortSequenceModel(ModelConfig(n_ports=2, n_imo=2, n_carrier=2, seed=seed))
    preds, det = model.greedy_decode(make_batch([seg]), shuttle, retrieve, return_details=True)
    print(f"seed {seed}: route {preds[0].tolist()}, step probs",
          [np.round(p[0], 3).tolist() for p in det["probs"]])
