"""Scoring historical port-call scenarios against a partial route.

Run: python3 demos/02_retrieval.py
"""
from portseq.retrieval import (HistoricalScenario, HistoryDB, QueryContext, jaccard, pmr,
                               retrieve_top_n)

W = 0  # sentinel for "no port"
names = {1: "SGSIN", 2: "CNSHA", 3: "KRPUS", 4: "JPTYO", 5: "USLAX"}

db = HistoryDB(horizon=2, sentinel=W)
db.add(HistoricalScenario((1, 2, 3), (4, 5), origin=3))
db.add(HistoricalScenario((2, 3), (5, 1), origin=3))
db.add(HistoricalScenario((4, 1, 3), (2, 2), origin=3))
db.add(HistoricalScenario((1, 2, 3, 4), (5, 1), origin=4))
db.freeze()

# set overlap ignores order; positional match rate ignores everything else
print(jaccard((1, 2, 3), (4, 1, 3), W), pmr((1, 2, 3), (4, 1, 3), W))

# Only the bucket of the current origin is searched. Prefixes are aligned on
# their last u ports before scoring.
query = QueryContext.build(hist=[1, 2, 3], decoded=[])
for alpha in (1.0, 0.5, 0.0):
    hits = retrieve_top_n(db, query, n=3, alpha=alpha)
    print(f"alpha={alpha}")
    for r in hits:
        sc = db.scenarios[r.id]
        print(f"   #{r.id} {[names[p] for p in sc.prefix]} -> {[names[p] for p in sc.continuation]}"
              f"  jac={r.jac:.2f} pmr={r.pmr:.2f} score={r.score:.2f} weight={r.weight:.3f}")

# After one decoded step the query grows and the origin bucket moves.
query = QueryContext.build(hist=[1, 2, 3], decoded=[4])
print([(r.id, round(r.score, 2)) for r in retrieve_top_n(db, query, n=3)])
