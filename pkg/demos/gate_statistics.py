"""
Summarising branch gates
========================

Gates are (tokens, heads, 3) arrays in (0, 1). Per branch we report the
mean and IQR over every (token, head) value, and how similarly heads move
over time (mean pairwise Pearson correlation).
"""
import numpy as np

from vnsa.analysis import gate_statistics, inter_head_similarity, seeded_batch
from vnsa.dense import HeadLayout
from vnsa.gating import BRANCHES, GateParams, gates_from_queries
from vnsa.tensor import Rng64

layout = HeadLayout(4, 2, 8)
batch = seeded_batch(layout, 48, seed=1)
width = layout.h * layout.d_k
params = GateParams.seeded(Rng64(2), width, width, layout.h, scale=20 / np.sqrt(width))
gates = gates_from_queries(batch.Q, params)
print("gate tensor:", gates.shape)

stats = gate_statistics([gates])
for b, name in enumerate(BRANCHES):
    print(f"{name}: mean {stats.mean[0, b]:.3f}  IQR {stats.iqr[0, b]:.3f}  inter-head corr {stats.corr[0, b]:+.3f}")

# heads that share a gate column correlate perfectly
same = np.repeat(gates[:, :1], layout.h, axis=1)
print("identical heads:", inter_head_similarity(same, 0, "slc"))

# a frozen head counts as uncorrelated with everyone
frozen = gates.copy()
frozen[:, 0] = 0.5
print("with head 1 frozen:", round(inter_head_similarity(frozen, 0, "cmp"), 4))
