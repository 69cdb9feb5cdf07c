"""Synthetic fleet to trained forecaster, end to end.

Run: python3 demos/03_cyclic_fleet.py [epochs]

Twenty vessels sail fixed loops for a year. With the default model the test
routes are recovered almost perfectly after a few epochs; 50 epochs take a
few minutes on one core.
"""
import logging
import sys
import tempfile

import numpy as np

from portseq.dataset import make_batch
from portseq.model import ModelConfig, PortSequenceModel, make_retriever, top_k
from portseq.pipeline import prepare
from portseq.synth import cyclic_fleet, generate
from portseq.training import TrainConfig, evaluate_model, fit

logging.basicConfig(level=logging.INFO, format="%(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

out = tempfile.mkdtemp(prefix="fleet-")
fleet = generate(cyclic_fleet(), out)
print("planted edges:", sorted(fleet.edges))

data = prepare(fleet.ais_dir, fleet.geofences, fleet.static, fleet.ports)
print("segments train/val/test:", len(data.split.train), len(data.split.val), len(data.split.test))
print("assembly:", data.report.as_dict())

model = PortSequenceModel(ModelConfig(n_ports=len(data.vocab), n_imo=data.codes.n_imo,
                                      n_carrier=data.codes.n_carrier))
fit(model, data.split.train, data.split.val, data.graph, data.db, TrainConfig(epochs=epochs))

retrieve = make_retriever(model, data.db)
print(evaluate_model(model, data.split.test, data.graph, retrieve).table())

# one forecast in detail
seg = data.split.test[0]
preds, det = model.greedy_decode(make_batch([seg]), data.graph, retrieve, return_details=True)
name = data.vocab.name
print("vessel", seg.imo, "at", name(seg.origin))
print("  actual   ", [name(int(p)) for p in seg.future_ports])
print("  predicted", [name(int(p)) for p in preds[0]])
for h, probs in enumerate(det["probs"], start=1):
    print(f"  step {h} top-3:", [(name(p), round(q, 3)) for p, q in top_k(probs[0], 3)])
print("mean trajectory length", np.mean([s.length for s in data.split.train]).round(1))
