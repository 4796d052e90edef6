"""
Three sparse branches against dense attention
=============================================

With a full budget (every block selected, window as long as the
sequence) the selection branch reproduces dense causal attention at block
ends and the window branch everywhere. The compression branch attends over
block means, so it only matches when blocks are a single token.
"""
import numpy as np

from vnsa.analysis import seeded_batch
from vnsa.branches import SparseConfig
from vnsa.dense import HeadLayout, dense_causal_attention
from vnsa.gating import ModalitySpans, hybrid_layer_attention, nsa_forward

layout = HeadLayout(h=4, g=2, d_k=8)
L, s = 64, 4
batch = seeded_batch(layout, L, seed=0)
dense = dense_causal_attention(batch, layout).astype(np.float64)

full = SparseConfig(s=s, n=L // s, w=L)
_, trace = nsa_forward(batch, layout, full, np.full((L, layout.h, 3), 0.5))
ends = np.arange(s, L + 1, s) - 1
for i, name in enumerate(("compression", "selection", "window")):
    dev = np.abs(trace.branch_out[i][:, ends] - dense[:, ends]).max()
    print(f"{name:>12} vs dense at block ends: {dev:.2e}")

# with one-token blocks compression is just dense attention too
_, trace1 = nsa_forward(batch, layout, SparseConfig(1, L, L), np.full((L, layout.h, 3), 0.5))
print(f"compression with s=1: {np.abs(trace1.branch_out[0] - dense).max():.2e}")

# a realistic budget: 2 blocks and an 8-token window
tight = SparseConfig(s=4, n=2, w=8)
_, trace2 = nsa_forward(batch, layout, tight, np.full((L, layout.h, 3), 0.5))
print("per-head key counts with n=2, w=8:", trace2.counts[0].as_dict())
print("blocks picked by group 1 for the last query:", (trace2.selections[0][-1] + 1).tolist())

# hybrid layer: tokens 1..40 are vision (sparse), the rest text (dense)
spans = ModalitySpans.from_vision(L, [(1, 40)])
rows = hybrid_layer_attention(batch, layout, tight, np.full((L, layout.h, 3), 0.5), spans)
dense_rows = np.concatenate(list(dense), axis=1)
print("text rows identical to dense:", np.array_equal(rows[40:], dense_rows[40:].astype(np.float32)))
print(f"vision rows differ from dense by up to {np.abs(rows[:40] - dense_rows[:40]).max():.3f}")
