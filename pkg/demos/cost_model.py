"""
Counting the work in each branch
================================

Every kernel counts the (query, key) scores it computes. The counts are
checked against closed forms, so growth rates can be read off without
trusting a stopwatch:

    scoring    sum_t floor(t/s)            ~ L^2 / (2s)
    selection  sum_t s*min(n, floor(t/s))  ~ L * n * s
    window     sum_t min(w, t)             ~ L * w
"""
from vnsa.analysis import profile_branches
from vnsa.branches import SparseConfig, branch_op_counts
from vnsa.dense import HeadLayout

sparse = SparseConfig(s=64, n=32, w=256)
Ls = [1024, 2048, 4096]
report = profile_branches(Ls, sparse, HeadLayout(1, 1, 4), runs=1)
print(f"{'L':>6} {'branch':>13} {'count':>10} {'ms':>8}")
for r in report.rows:
    print(f"{r.L:>6} {r.branch:>13} {r.measured_count:>10} {r.wall_ns / 1e6:>8.1f}")

# doubling L: scoring roughly x4, window roughly x2
for branch in ("slc_scores", "slc_attended", "win_attended"):
    c = report.counts(branch)
    print(branch, [round(c[b] / c[a], 3) for a, b in zip(Ls, Ls[1:])])

# the closed forms reach lengths we would not want to run
for L in (8192, 65536, 262144, 1 << 20):
    c = branch_op_counts(L, sparse)
    print(f"L={L:>8}: scoring {c.slc_scores:>13}  selected keys {c.slc_attended:>14}  window {c.win_attended:>12}")
# selected-key work is linear in L, scoring is quadratic; the two cross near L = 2*n*s*s = 262144
