"""
Finding attention sinks
=======================

A key is a sink when it soaks up more than 0.1 of the attention of the
queries that can see it while its value vector is unusually short:
norm below median - 2*IQR of all value norms.
"""
import numpy as np

from vnsa.analysis import attention_maps, compute_alphas, detect_sinks, seeded_batch, sink_report
from vnsa.branches import SparseConfig
from vnsa.dense import HeadLayout, QkvBatch

# a toy population: nine ordinary tokens and one short, popular one
rep = detect_sinks([0.2] * 10, [10.0] * 9 + [0.1])
print(f"median {rep.median}, IQR {rep.iqr}, cut {rep.threshold}: sinks at {np.flatnonzero(rep.is_sink) + 1}")

# alpha averages only over the queries that can see the key
uniform = np.tril(np.ones((3, 3))) / np.arange(1, 4)[:, None]
print("alphas under uniform causal attention:", np.round(compute_alphas(uniform), 4))

# build a sequence whose first key attracts every query but carries almost nothing
L, d = 32, 4
layout = HeadLayout(1, 1, d)
base = seeded_batch(layout, L, seed=3)
Q = base.Q.copy()
K = base.K.copy()
V = base.V.copy()
Q[0, :, 0] = 4.0
K[0, 0] = [5.0, 0, 0, 0]
V[0, 0] *= 0.01
maps = attention_maps(QkvBatch(Q, K, V), layout, SparseConfig(4, 2, 4))
for source, amap in maps.items():
    r = sink_report(amap)
    print(f"{source:>6}: {r.count} sink(s) among {len(r.is_sink)} keys, flagged {np.flatnonzero(r.is_sink) + 1}")
# the window branch never sees token 1 after position 4, so its alpha is an average over 4 queries only
