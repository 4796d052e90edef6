"""
How much of the causal attention matrix does the sparse layer look at?
=====================================================================

Each query sees ``b`` selected blocks of ``s`` tokens plus a window of
``w`` recent tokens, so K_attn = b*s + w keys. Dense causal attention over
L tokens touches L(L-1)/2 edges, i.e. (L-1)/2 keys per query on average.
"""
from vnsa.analysis import attention_budget, attention_fraction, info_context_length, local_ratio

b, s, w = 32, 64, 256
K = attention_budget(b, s, w)
print(f"K_attn = {b}*{s} + {w} = {K}")
print(f"window share of the budget: {local_ratio(b, s, w):.4f}")

# the fraction shrinks like 1/L; above 100% the budget is longer than the average causal prefix
for L in (4096, 36000, 128000, 1_000_000):
    print(f"L = {L:>9}: gamma = {100 * attention_fraction(b, s, w, L):.3f}%")

# a video context is frames x tokens per frame
for tpf, frames in ((64, 512), (128, 512), (256, 128)):
    L = info_context_length(tpf, frames)
    print(f"{frames} frames x {tpf} tokens = {L} tokens -> gamma {100 * attention_fraction(b, s, w, L):.2f}%")

# trading selected blocks for window width at a fixed budget
for b_, w_ in ((32, 256), (20, 1024), (4, 2048)):
    print(f"b={b_:>2}, w={w_:>4}: K_attn={attention_budget(b_, s, w_)}, local share {local_ratio(b_, s, w_):.3f}")
