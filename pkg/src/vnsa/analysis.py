"""Attention-budget arithmetic, sink detection, gate statistics and the
per-branch cost profiler, plus CSV emitters for their reports."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .branches import (
    BRANCH_COUNTERS,
    SparseConfig,
    branch_op_counts,
    compress_blocks,
    compression_rows,
    group_scores,
    selection_rows,
    top_blocks_rows,
    window_rows,
)
from .dense import HeadLayout, QkvBatch, dense_rows
from .errors import ConfigError, DomainError, ShapeError
from .gating import BRANCHES
from .tensor import Rng64, lr_sum, seeded_uniform, write_bytes_atomic

SINK_ALPHA = 0.1
SINK_IQR_MULT = 2.0


# -- budget arithmetic --------------------------------------------------------

def attention_budget(b: int, s: int, w: int) -> int:
    """Key-value pairs visible per query: b selected blocks of s tokens plus a w-token window."""
    if min(b, s, w) < 0:
        raise DomainError(f"budget inputs must be nonnegative: b={b}, s={s}, w={w}")
    return b * s + w


def attention_fraction(b: int, s: int, w: int, L: int) -> float:
    """Budget relative to the L(L-1)/2 edges of dense causal attention: 2*K/(L-1)."""
    if L < 2:
        raise DomainError(f"attention fraction needs L >= 2, got {L}")
    return float(Fraction(2 * attention_budget(b, s, w), L - 1))


def local_ratio(b: int, s: int, w: int) -> float:
    k = attention_budget(b, s, w)
    if k == 0:
        raise DomainError("local ratio undefined for a zero budget")
    return w / k


def info_context_length(T: int, F: int) -> int:
    """Vision context length from tokens per frame and frame count."""
    if T < 1 or F < 1:
        raise DomainError(f"tokens per frame and frames must be >= 1, got T={T}, F={F}")
    return T * F


# -- quantiles ------------------------------------------------------------------

def quantile(values, q: float) -> float:
    """Linear interpolation between order statistics at position q*(N-1)."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


def iqr(values) -> float:
    return quantile(values, 0.75) - quantile(values, 0.25)


def _exact_quantile(xs: np.ndarray, q: Fraction) -> Fraction:
    # xs sorted float64; same interpolation as quantile(), without rounding
    pos = q * (len(xs) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(xs) - 1)
    a, b = Fraction(float(xs[lo])), Fraction(float(xs[hi]))
    return a + (pos - lo) * (b - a)


def sink_threshold(vnorms) -> tuple[Fraction, Fraction, Fraction]:
    """Exact (median, IQR, median - 2*IQR) of the norms as rationals."""
    xs = np.sort(np.asarray(vnorms, dtype=np.float64))
    med = _exact_quantile(xs, Fraction(1, 2))
    spread = _exact_quantile(xs, Fraction(3, 4)) - _exact_quantile(xs, Fraction(1, 4))
    return med, spread, med - Fraction(SINK_IQR_MULT) * spread


# -- attention sinks ----------------------------------------------------------

@dataclass
class SinkReport:
    alpha: np.ndarray
    vnorm: np.ndarray
    is_sink: np.ndarray
    median: float
    iqr: float
    threshold: float

    @property
    def count(self) -> int:
        return int(self.is_sink.sum())

    @property
    def ratio(self) -> float:
        return self.count / len(self.is_sink)

    def positional_histogram(self, bins: int = 10) -> np.ndarray:
        """Sink counts by relative position (token index / N) in ``bins`` equal bins."""
        n = len(self.is_sink)
        rel = np.arange(n) / n
        hist, _ = np.histogram(rel[self.is_sink], bins=bins, range=(0.0, 1.0))
        return hist

    def rows(self):
        for i in range(len(self.alpha)):
            yield i + 1, float(self.alpha[i]), float(self.vnorm[i]), bool(self.is_sink[i])


def detect_sinks(alphas, vnorms) -> SinkReport:
    """Flag tokens with mean received attention > 0.1 whose value norm falls
    strictly below median - 2 * IQR of the population."""
    alphas = np.asarray(alphas, dtype=np.float64)
    vnorms = np.asarray(vnorms, dtype=np.float64)
    if alphas.shape != vnorms.shape or alphas.ndim != 1:
        raise ShapeError(f"alphas {alphas.shape} and vnorms {vnorms.shape} must be equal-length vectors")
    if alphas.size == 0:
        raise ShapeError("sink detection needs at least one token")
    if not (np.all(np.isfinite(alphas)) and np.all(np.isfinite(vnorms))):
        raise ValueError("alphas and value norms must be finite")
    med, spread, exact = sink_threshold(vnorms)
    # compare against the exact cut: a norm equal to the rounded cut is below it
    # only when rounding went up
    thresh = float(exact)
    below = (vnorms < thresh) | ((vnorms == thresh) & (Fraction(thresh) < exact))
    flags = (alphas > SINK_ALPHA) & below
    return SinkReport(alphas, vnorms, flags, float(med), float(spread), thresh)


def layer_sink_ratios(reports: Sequence[SinkReport]) -> np.ndarray:
    return np.array([r.ratio for r in reports])


def compute_alphas(probs, support=None, tol: float = 1e-4) -> np.ndarray:
    """Mean attention each key receives over the queries that can see it.

    ``probs`` is (queries, keys). ``support`` marks which keys each query can
    attend to; by default the causal lower triangle of a square matrix.
    Queries with an empty support are skipped.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"probs must be 2-D, got {probs.shape}")
    if support is None:
        if probs.shape[0] != probs.shape[1]:
            raise ShapeError("a default causal support needs a square matrix")
        support = np.tril(np.ones(probs.shape, dtype=bool))
    support = np.asarray(support, dtype=bool)
    if support.shape != probs.shape:
        raise ShapeError(f"support {support.shape} != probs {probs.shape}")
    live = support.any(axis=1)
    mass = lr_sum(np.where(support, probs, 0.0), axis=1)
    bad = live & (np.abs(mass - 1.0) > tol)
    if bad.any():
        t = int(np.flatnonzero(bad)[0])
        raise ValueError(f"row {t + 1} sums to {mass[t]!r}, not 1")
    if np.any(probs[~support] != 0.0):
        raise ValueError("probability mass on keys outside the support")
    seen = support & live[:, None]
    n_seen = seen.sum(axis=0)
    total = lr_sum(np.where(seen, probs, 0.0), axis=0)
    return np.divide(total, n_seen, out=np.zeros(total.shape), where=n_seen > 0)


@dataclass
class AttentionMap:
    probs: np.ndarray    # (h, L, keys)
    support: np.ndarray  # (h, L, keys) bool
    vnorm: np.ndarray    # (keys,)


def attention_maps(batch: QkvBatch, layout: HeadLayout, sparse: SparseConfig) -> dict:
    """Full (query x key) probability maps for dense attention and each sparse branch.

    Compression keys are blocks; the other sources use token keys. Value norms
    are averaged over KV groups.
    """
    batch.check(layout)
    L = batch.L
    pos = np.arange(1, L + 1)
    ckv = compress_blocks(batch.K, batch.V, sparse.s)
    B = ckv.B
    maps = {name: (np.zeros((layout.h, L, n)), np.zeros((layout.h, L, n), dtype=bool))
            for name, n in (("dense", L), ("cmp", B), ("slc", L), ("win", L))}
    rows = np.arange(L)[:, None]
    for gi in range(layout.g):
        heads = layout.heads_in_group(gi)
        k, v = batch.K[gi], batch.V[gi]
        cmp = {i: compression_rows(batch.Q[i], ckv.Kc[gi], ckv.Vc[gi], ckv.block_end, pos) for i in heads}
        sel, _ = top_blocks_rows(group_scores([cmp[i].probs for i in heads]), cmp[heads[0]].support, sparse.n)
        for i in heads:
            d = dense_rows(batch.Q[i], k, v, pos, keep_probs=True)
            maps["dense"][0][i] = d.probs
            maps["dense"][1][i] = np.tril(np.ones((L, L), dtype=bool))
            maps["cmp"][0][i] = cmp[i].probs
            maps["cmp"][1][i] = cmp[i].support
            for name, r in (("slc", selection_rows(batch.Q[i], k, v, sel, sparse.s)),
                            ("win", window_rows(batch.Q[i], k, v, sparse.w, pos))):
                idx = np.maximum(r.keys, 0)
                np.add.at(maps[name][0][i], (np.broadcast_to(rows, idx.shape)[r.support], idx[r.support]),
                          r.probs[r.support])
                maps[name][1][i][np.broadcast_to(rows, idx.shape)[r.support], idx[r.support]] = True
    tok_norm = np.linalg.norm(batch.V.astype(np.float64), axis=2).mean(axis=0)
    blk_norm = np.linalg.norm(ckv.Vc.astype(np.float64), axis=2).mean(axis=0) if B else np.zeros(0)
    return {
        name: AttentionMap(p, s, blk_norm if name == "cmp" else tok_norm)
        for name, (p, s) in maps.items()
    }


def sink_report(amap: AttentionMap) -> SinkReport:
    """Head-averaged alphas for one attention source, run through :func:`detect_sinks`."""
    alphas = np.mean([compute_alphas(amap.probs[i], amap.support[i]) for i in range(amap.probs.shape[0])], axis=0)
    return detect_sinks(alphas, amap.vnorm)


# -- gate statistics -----------------------------------------------------------

@dataclass
class GateStats:
    mean: np.ndarray  # (layers, 3)
    iqr: np.ndarray   # (layers, 3)
    corr: np.ndarray  # (layers, 3); NaN where fewer than 2 heads or tokens

    def rows(self):
        for layer in range(self.mean.shape[0]):
            for b, name in enumerate(BRANCHES):
                yield layer, name, float(self.mean[layer, b]), float(self.iqr[layer, b]), float(self.corr[layer, b])


def _as_layers(gates) -> list[np.ndarray]:
    if isinstance(gates, np.ndarray) and gates.ndim == 3:
        gates = [gates]
    layers = [np.asarray(g, dtype=np.float64) for g in gates]
    for g in layers:
        if g.ndim != 3 or g.shape[2] != 3:
            raise ShapeError(f"gate layer must be (L, h, 3), got {g.shape}")
    return layers


def _branch_index(branch) -> int:
    if isinstance(branch, str):
        return BRANCHES.index(branch)
    return int(branch)


def inter_head_similarity(gates, layer: int, branch) -> float:
    """Mean Pearson correlation over all unordered head pairs of one layer's
    gate series; a constant head correlates 0 with every partner."""
    g = _as_layers(gates)[layer][:, :, _branch_index(branch)]
    L, h = g.shape
    if h < 2 or L < 2:
        raise DomainError(f"inter-head similarity needs >= 2 heads and tokens, got h={h}, L={L}")
    centered = g - g.mean(axis=0)
    flat = np.ptp(g, axis=0) == 0
    norms = np.sqrt((centered ** 2).sum(axis=0))
    total, pairs = 0.0, 0
    for a in range(h):
        for b in range(a + 1, h):
            pairs += 1
            if flat[a] or flat[b]:
                continue
            r = float((centered[:, a] * centered[:, b]).sum() / (norms[a] * norms[b]))
            total += min(1.0, max(-1.0, r))
    return total / pairs


def gate_statistics(gates) -> GateStats:
    """Per layer and branch: mean and IQR over the (token x head) population,
    and mean inter-head correlation."""
    layers = _as_layers(gates)
    if not layers:
        raise DomainError("need at least one gate layer")
    mean = np.zeros((len(layers), 3))
    spread = np.zeros((len(layers), 3))
    corr = np.full((len(layers), 3), np.nan)
    for li, g in enumerate(layers):
        if g.shape[0] == 0 or g.shape[1] == 0:
            raise DomainError(f"layer {li} has an empty gate population")
        for b in range(3):
            pop = g[:, :, b].ravel()
            mean[li, b] = pop.mean()
            spread[li, b] = iqr(pop)
            if g.shape[0] >= 2 and g.shape[1] >= 2:
                corr[li, b] = inter_head_similarity(layers, li, b)
    return GateStats(mean, spread, corr)


# -- cost profiler ----------------------------------------------------------

@dataclass
class CostRow:
    L: int
    branch: str
    analytic_count: int
    measured_count: int
    wall_ns: int


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    selected_tokens: int = 0  # n * s

    def mismatches(self) -> list:
        return [r for r in self.rows if r.analytic_count != r.measured_count]

    def counts(self, branch: str) -> dict:
        return {r.L: r.measured_count for r in self.rows if r.branch == branch}

    def dominant_branch(self) -> str:
        """Branch with the largest analytic count at the largest profiled L."""
        top = max(r.L for r in self.rows)
        return max((r for r in self.rows if r.L == top), key=lambda r: r.analytic_count).branch

    def slowest_branch(self) -> str:
        top = max(r.L for r in self.rows)
        return max((r for r in self.rows if r.L == top), key=lambda r: r.wall_ns).branch


def seeded_batch(layout: HeadLayout, L: int, seed: int, scale: float = 20.0) -> QkvBatch:
    """Q, K, V drawn in that order from splitmix64(seed), scaled into [-1, 1) by default."""
    rng = Rng64(seed)
    f = np.float32(scale)
    Q = seeded_uniform(rng, (layout.h, L, layout.d_k)) * f
    K = seeded_uniform(rng, (layout.g, L, layout.d_k)) * f
    V = seeded_uniform(rng, (layout.g, L, layout.d_k)) * f
    return QkvBatch(Q, K, V)


def _timed(fn, runs: int):
    times, result = [], None
    for _ in range(runs):
        t0 = time.perf_counter_ns()
        result = fn()
        times.append(time.perf_counter_ns() - t0)
    return result, int(statistics.median(times))


def profile_branches(Ls, sparse: SparseConfig, layout: HeadLayout = HeadLayout(1, 1, 8), *,
                     runs: int = 5, seed: int = 0, timing: bool = True, strict: bool = True) -> CostReport:
    """Run each branch stage on seeded inputs for every L and record per-head
    operation counts next to the closed-form model.

    Stages: compression scoring (cmp_scores), selection scoring + top-n
    (slc_scores), selection attention (slc_attended), window (win_attended).
    Wall time is the median over ``runs``; with ``timing=False`` each stage
    runs once and wall_ns is reported as 0 so the report is reproducible.
    """
    Ls = [int(L) for L in Ls]
    if not Ls:
        raise ConfigError("no context lengths given")
    for L in Ls:
        if L < sparse.s:
            raise ConfigError(f"context length {L} is shorter than block size {sparse.s}")
    runs = max(1, runs) if timing else 1
    report = CostReport(selected_tokens=sparse.selected_tokens)
    for L in Ls:
        batch = seeded_batch(layout, L, seed)
        pos = np.arange(1, L + 1)
        ckv = compress_blocks(batch.K, batch.V, sparse.s)
        measured = {name: [] for name in BRANCH_COUNTERS}
        walls = dict.fromkeys(BRANCH_COUNTERS, 0)
        for gi in range(layout.g):
            heads = layout.heads_in_group(gi)
            k, v = batch.K[gi], batch.V[gi]

            cmp, ns = _timed(lambda: [compression_rows(batch.Q[i], ckv.Kc[gi], ckv.Vc[gi], ckv.block_end, pos)
                                      for i in heads], runs)
            walls["cmp_scores"] += ns
            measured["cmp_scores"] += [r.count for r in cmp]

            (sel, ranked), ns = _timed(
                lambda: top_blocks_rows(group_scores([r.probs for r in cmp]), cmp[0].support, sparse.n), runs)
            walls["slc_scores"] += ns
            measured["slc_scores"].append(ranked)

            slc, ns = _timed(lambda: [selection_rows(batch.Q[i], k, v, sel, sparse.s, keep_probs=False)
                                      for i in heads], runs)
            walls["slc_attended"] += ns
            measured["slc_attended"] += [r.count for r in slc]

            win, ns = _timed(lambda: [window_rows(batch.Q[i], k, v, sparse.w, pos, keep_probs=False)
                                      for i in heads], runs)
            walls["win_attended"] += ns
            measured["win_attended"] += [r.count for r in win]

        analytic = branch_op_counts(L, sparse).as_dict()
        for name in BRANCH_COUNTERS:
            # every head/group stream must agree with the model; report the first that does not
            vals = measured[name]
            m = next((x for x in vals if x != analytic[name]), vals[0])
            report.rows.append(CostRow(L, name, analytic[name], m, walls[name] if timing else 0))
    if strict and report.mismatches():
        bad = report.mismatches()[0]
        raise RuntimeError(f"measured {bad.branch} count {bad.measured_count} != analytic "
                           f"{bad.analytic_count} at L={bad.L}")
    return report


# -- CSV -------------------------------------------------------------------------

SINK_COLUMNS = ("token_index", "alpha", "vnorm", "is_sink")
COST_COLUMNS = ("L", "branch", "analytic_count", "measured_count", "wall_ns")
GATE_COLUMNS = ("layer", "branch", "mean", "iqr", "inter_head_corr")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def to_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def write_csv(path, columns, rows) -> None:
    write_bytes_atomic(Path(path), to_csv(columns, rows).encode("utf-8"))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sink_csv(report: SinkReport) -> str:
    return to_csv(SINK_COLUMNS, report.rows())


def cost_csv(report: CostReport) -> str:
    return to_csv(COST_COLUMNS, ((r.L, r.branch, r.analytic_count, r.measured_count, r.wall_ns)
                                 for r in report.rows))


def gate_csv(stats: GateStats) -> str:
    return to_csv(GATE_COLUMNS, stats.rows())
