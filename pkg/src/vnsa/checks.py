"""Built-in invariant suite behind ``vnsa check``.

Each check builds its own small seeded fixture, compares against naive
loop oracles or exact structural properties, and reports (name, ok, detail).
Tolerances are multiplied by ``tolerance_scale``; a negative scale makes
every tolerance comparison fail, which is how the failure path is tested.
"""
from __future__ import annotations

import csv
import io
import math
import traceback
from typing import Callable

import numpy as np

from . import analysis
from .branches import (
    SparseConfig,
    branch_op_counts,
    compress_blocks,
    compression_rows,
    group_scores,
    select_top_blocks,
    top_blocks_rows,
)
from .dense import HeadLayout, QkvBatch, dense_causal_attention, gqa_group_of_head
from .errors import EmptySupportError
from .gating import (
    GateParams,
    ModalitySpans,
    gate_backward,
    gate_forward,
    gates_from_queries,
    hybrid_forward,
    hybrid_layer_attention,
    nsa_attention,
    nsa_forward,
)
from .tensor import Rng64, decode_tensor, encode_tensor, matmul, seeded_uniform, stable_softmax

FD_STEP = 1e-3
FD_RTOL = 1e-3
FD_ATOL = 1e-6
KINK_MARGIN = 1e-2


class _Ctx:
    def __init__(self, scale: float):
        self.scale = scale

    def close(self, err: float, tol: float, what: str):
        if not err <= tol * self.scale:
            raise AssertionError(f"{what}: error {err:.3e} exceeds {tol:.1e}")

    @staticmethod
    def exact(a, b, what: str):
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            raise AssertionError(f"{what}: not bit-identical")

    @staticmethod
    def true(cond, what: str):
        if not cond:
            raise AssertionError(what)


# -- naive oracles --------------------------------------------------------

def naive_attention(q, K, V, key_positions) -> np.ndarray:
    """Softmax attention of one query over listed key rows, scalar loops in float64."""
    d = len(q)
    keys = list(key_positions)
    if not keys:
        return np.zeros(d)
    logits = [sum(float(q[j]) * float(K[p][j]) for j in range(d)) / math.sqrt(d) for p in keys]
    mx = max(logits)
    e = [math.exp(x - mx) for x in logits]
    z = math.fsum(e)
    return np.array([math.fsum(e[i] / z * float(V[p][j]) for i, p in enumerate(keys)) for j in range(d)])


def naive_dense(batch: QkvBatch, layout: HeadLayout) -> np.ndarray:
    out = np.zeros(batch.Q.shape)
    for s in range(1, layout.h + 1):
        gi = gqa_group_of_head(s, layout) - 1
        for t in range(batch.L):
            out[s - 1, t] = naive_attention(batch.Q[s - 1, t], batch.K[gi], batch.V[gi], range(t + 1))
    return out


def seeded_gates(rng: Rng64, L: int, h: int) -> np.ndarray:
    """Gate values in [0.05, 0.95) from the generator."""
    return seeded_uniform(rng, (L, h, 3)).astype(np.float64) * 9.0 + 0.5


def gradient_instance(rng: Rng64, d_in: int = 6, d_hidden: int = 6, heads: int = 2):
    """Draw (x, params, upstream) with every hidden pre-activation at least
    KINK_MARGIN away from the relu kink, redrawing from the same stream."""
    while True:
        x = seeded_uniform(rng, (d_in,)) * np.float32(20)
        params = GateParams.seeded(rng, d_in, d_hidden, heads, scale=20.0)
        up = seeded_uniform(rng, (heads, 3)) * np.float32(20)
        pre1 = x.astype(np.float64) @ params.W1.astype(np.float64) + params.b1
        if np.all(np.abs(pre1) >= KINK_MARGIN):
            return x, params, up


def finite_difference_grads(x, params: GateParams, up) -> dict:
    """Central differences of sum(up * gate_forward) for every input and parameter entry."""
    base = {"x": np.asarray(x, dtype=np.float64)}
    for name in ("W1", "b1", "W2", "b2"):
        base[name] = getattr(params, name).astype(np.float64)
    up = np.asarray(up, dtype=np.float64)

    def f(vals):
        x_ = vals["x"]
        pre1 = x_ @ vals["W1"] + vals["b1"]
        hid = np.maximum(pre1, 0.0)
        pre2 = hid @ vals["W2"] + vals["b2"]
        return float(np.sum(up.ravel() / (1.0 + np.exp(-pre2))))

    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][idx] += FD_STEP
            minus[name][idx] -= FD_STEP
            g[idx] = (f(plus) - f(minus)) / (2 * FD_STEP)
        grads[name] = g
    return grads


def gradient_mismatches(analytic: dict, numeric: dict) -> int:
    bad = 0
    for name, num in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(num.shape)
        err = np.abs(a - num)
        bad += int(np.sum((err > FD_ATOL) & (err > FD_RTOL * np.abs(num))))
    return bad


# -- suites ----------------------------------------------------------------

def _tensor_core(c: _Ctx):
    rng = Rng64(3)
    for _ in range(20):
        logits = seeded_uniform(rng, (9,)).astype(np.float64) * 100
        p = stable_softmax(logits)
        c.true(np.all(p >= 0), "softmax negative")
        c.close(abs(p.sum() - 1), 1e-6, "softmax sum")
        c.close(np.abs(stable_softmax(logits + 7.5) - p).max(), 1e-6, "softmax shift invariance")
        mask = np.arange(9) % 3 != 0
        pm = stable_softmax(logits, mask)
        c.true(np.all(pm[~mask] == 0.0), "masked entries not exactly 0")
    try:
        stable_softmax([1.0, 2.0], [False, False])
        raise AssertionError("all-masked softmax did not raise")
    except EmptySupportError:
        pass
    A = seeded_uniform(rng, (4, 5))
    B = seeded_uniform(rng, (5, 3))
    ref = A.astype(np.longdouble) @ B.astype(np.longdouble)
    got = matmul(A, B)
    c.close(float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-30))), 1e-6, "matmul vs extended")
    c.exact(got, matmul(A, B), "matmul reproducibility")
    c.exact(matmul(np.eye(3, dtype=np.float32), B[:3]), B[:3], "identity matmul")
    s1 = seeded_uniform(Rng64(42), (1000,))
    c.exact(s1, seeded_uniform(Rng64(42), (1000,)), "rng stream seed 42")
    c.true(np.all((s1 >= -0.05) & (s1 < 0.05)), "uniform range")
    c.exact(seeded_uniform(Rng64(0), (1,)), np.array([0.03833108082136427], dtype=np.float32), "splitmix64(0) golden value")
    t = seeded_uniform(rng, (2, 3, 4))
    buf = encode_tensor(t)
    c.true(buf[:5] == b"VNSA\x01", "fixture magic/version")
    c.exact(decode_tensor(buf), t, "fixture round trip")


def _dense(c: _Ctx):
    layout = HeadLayout(2, 1, 3)
    b = analysis.seeded_batch(layout, 4, seed=11)
    c.close(float(np.abs(dense_causal_attention(b, layout) - naive_dense(b, layout)).max()), 1e-5,
            "dense vs naive loop (h=2, g=1, L=4)")
    layout = HeadLayout(4, 2, 5)
    b = analysis.seeded_batch(layout, 12, seed=12)
    c.close(float(np.abs(dense_causal_attention(b, layout) - naive_dense(b, layout)).max()), 1e-5,
            "dense vs naive loop (h=4, g=2, L=12)")
    _, probs = dense_causal_attention(b, layout, return_probs=True)
    c.close(float(np.abs(probs.sum(axis=2) - 1).max()), 1e-6, "attention rows sum to 1")


def _gqa(c: _Ctx):
    layout = HeadLayout(3, 3, 4)
    b = analysis.seeded_batch(layout, 10, seed=13)
    out = dense_causal_attention(b, layout)
    for i in range(3):
        one = HeadLayout(1, 1, 4)
        solo = dense_causal_attention(QkvBatch(b.Q[i:i + 1], b.K[i:i + 1], b.V[i:i + 1]), one)
        c.close(float(np.abs(out[i] - solo[0]).max()), 1e-6, "g = h equals per-head MHA")
    layout = HeadLayout(3, 1, 4)
    b = analysis.seeded_batch(layout, 10, seed=14)
    Q = b.Q.copy()
    Q[2] = Q[0]
    out = dense_causal_attention(QkvBatch(Q, b.K, b.V), layout)
    c.exact(out[0], out[2], "g = 1: identical queries give identical heads")
    big = HeadLayout(28, 4, 1)
    c.true([gqa_group_of_head(s, big) for s in range(1, 29)] == [-(-s * 4 // 28) for s in range(1, 29)],
           "group map ceil(s*g/h)")


def _perturbed(batch: QkvBatch, p: int, rng: Rng64) -> QkvBatch:
    K, V = batch.K.copy(), batch.V.copy()
    K[:, p:] += seeded_uniform(rng, K[:, p:].shape) * np.float32(40)
    V[:, p:] += seeded_uniform(rng, V[:, p:].shape) * np.float32(40)
    return QkvBatch(batch.Q, K, V)


def causality_trials(kernel: Callable, batch: QkvBatch, trials: int, seed: int) -> int:
    """Count trials where output before a perturbed position changed; ``kernel`` returns (h, L, d)."""
    rng = Rng64(seed)
    base = kernel(batch)
    fails = 0
    for _ in range(trials):
        p = 1 + int(rng.next_u64(1)[0] % np.uint64(batch.L - 1))
        out = kernel(_perturbed(batch, p, rng))
        if not np.array_equal(out[:, :p], base[:, :p]):
            fails += 1
    return fails


def branch_kernels(layout: HeadLayout, sparse: SparseConfig) -> dict:
    """Kernels returning (h, L, d) per source, for causality and oracle checks."""
    def nsa_branch(i):
        def run(batch):
            L = batch.L
            gates = np.full((L, layout.h, 3), 0.5)
            _, trace = nsa_forward(batch, layout, sparse, gates)
            return trace.branch_out[i]
        return run

    def hybrid(batch):
        L = batch.L
        spans = ModalitySpans.from_vision(L, [(1, L // 2)])
        rows = hybrid_layer_attention(batch, layout, sparse, np.full((L, layout.h, 3), 0.4), spans)
        return rows.reshape(L, layout.h, layout.d_k).transpose(1, 0, 2)

    return {
        "dense": lambda batch: dense_causal_attention(batch, layout),
        "cmp": nsa_branch(0),
        "slc": nsa_branch(1),
        "win": nsa_branch(2),
        "hybrid": hybrid,
    }


def _branches(c: _Ctx):
    for L, s in ((64, 4), (64, 16), (256, 16)):
        layout = HeadLayout(2, 1, 4)
        b = analysis.seeded_batch(layout, L, seed=L + s)
        sparse = SparseConfig(s, L // s, L)
        ref = dense_causal_attention(b, layout).astype(np.float64)
        kern = branch_kernels(layout, sparse)
        ends = np.arange(s, L + 1, s) - 1
        c.close(float(np.abs(kern["slc"](b)[:, ends] - ref[:, ends]).max()), 1e-5,
                f"selection = dense at block ends (L={L}, s={s})")
        c.close(float(np.abs(kern["win"](b) - ref).max()), 1e-5, f"window = dense (L={L}, s={s})")
        gates = np.zeros((L, layout.h, 3))
        gates[..., 2] = 1.0
        c.close(float(np.abs(nsa_attention(b, layout, sparse, gates) - ref).max()), 1e-5,
                f"gated (0,0,1) = dense (L={L}, s={s})")
    for L in (8, 64, 257, 1024):
        for cfg in (SparseConfig(4, 2, 8), SparseConfig(64, 32, 256)):
            layout = HeadLayout(2, 1, 2)
            b = analysis.seeded_batch(layout, L, seed=L)
            _, trace = nsa_forward(b, layout, cfg, np.full((L, 2, 3), 0.5))
            want = branch_op_counts(L, cfg)
            for counts in trace.counts:
                c.true(counts == want, f"measured counts {counts} != analytic {want} (L={L}, {cfg})")
    # selection structure
    layout = HeadLayout(2, 1, 3)
    b = analysis.seeded_batch(layout, 40, seed=5)
    cfg = SparseConfig(4, 3, 4)
    ckv = compress_blocks(b.K, b.V, cfg.s)
    pos = np.arange(1, 41)
    rows = [compression_rows(b.Q[i], ckv.Kc[0], ckv.Vc[0], ckv.block_end, pos) for i in range(2)]
    sel, _ = top_blocks_rows(group_scores([r.probs for r in rows]), rows[0].support, cfg.n)
    for t in pos:
        chosen = sel[t - 1][sel[t - 1] >= 0]
        c.true(np.all((chosen + 1) * cfg.s <= t), "selected block not causally visible")
        c.true(len(chosen) == min(cfg.n, t // cfg.s), "|I_t| != min(n, visible)")
        c.true(np.all(np.diff(chosen) > 0), "selection not ascending")
    c.true(select_top_blocks([0.1, 0.5, 0.4], 2).tolist() == [2, 3], "top-2 of [0.1, 0.5, 0.4]")
    # constant blocks compress exactly
    rng = Rng64(9)
    rowsK = np.repeat(seeded_uniform(rng, (1, 5, 3)), 4, axis=1)
    ck = compress_blocks(rowsK, rowsK, 4)
    c.exact(ck.Kc, rowsK[:, ::4], "constant-block compression")


def _causality(c: _Ctx):
    layout = HeadLayout(2, 1, 3)
    sparse = SparseConfig(4, 2, 6)
    b = analysis.seeded_batch(layout, 24, seed=21)
    for k, (name, kern) in enumerate(branch_kernels(layout, sparse).items()):
        fails = causality_trials(kern, b, trials=10, seed=100 + k)
        c.true(fails == 0, f"{name}: {fails} causality violations")


def _gating(c: _Ctx):
    layout = HeadLayout(2, 1, 3)
    sparse = SparseConfig(4, 2, 5)
    L = 20
    b = analysis.seeded_batch(layout, L, seed=31)
    rng = Rng64(32)
    params = GateParams.seeded(rng, 6, 6, 2, scale=20.0)
    g = gates_from_queries(b.Q, params)
    c.true(np.all((g > 0) & (g < 1)), "gate values outside (0, 1)")
    G = seeded_gates(rng, L, 2)
    base = nsa_attention(b, layout, sparse, G).astype(np.float64)
    scaled = nsa_attention(b, layout, sparse, 0.5 * G).astype(np.float64)
    c.close(float(np.abs(scaled - 0.5 * base).max()), 1e-6, "fusion linear in gates")
    spans = ModalitySpans.from_vision(L, [(1, 8), (13, 16)])
    rows, per_head, _ = hybrid_forward(b, layout, sparse, G, spans)
    dense = dense_causal_attention(b, layout)
    vis = spans.positions0("vision")
    nsa_vis = nsa_attention(b.subsequence(vis), layout, sparse, G[vis])
    expected = dense.copy()
    expected[:, vis] = nsa_vis
    c.exact(per_head, expected, "hybrid rows are exactly the vision and text path rows")
    c.exact(rows, np.concatenate(list(expected), axis=1), "hybrid head concatenation")
    # gradient checks
    grng = Rng64(1234)
    bad = 0
    for _ in range(100):
        x, params, up = gradient_instance(grng)
        bad += gradient_mismatches(gate_backward(x, params, up), finite_difference_grads(x, params, up))
    c.true(bad == 0, f"{bad} gradient entries failed the finite-difference check")
    zero = GateParams.zeros(4, 4, 2)
    c.exact(gate_forward(np.ones(4), zero), np.full((2, 3), 0.5), "zero gate params give 0.5")


def _analysis(c: _Ctx):
    rng = Rng64(41)
    for b_, s_, w_, L_ in ((32, 64, 256, 128000), (20, 64, 1024, 36000), (0, 64, 256, 1000), (3, 5, 7, 11)):
        k = analysis.attention_budget(b_, s_, w_)
        c.close(abs(analysis.attention_fraction(b_, s_, w_, L_) * (L_ - 1) / 2 - k) / k, 1e-12,
                "fraction * (L-1)/2 = budget")
    for _ in range(5):
        n = 30
        alphas = seeded_uniform(rng, (n,)).astype(np.float64) * 6 + 0.1
        vn = np.abs(seeded_uniform(rng, (n,)).astype(np.float64)) * 20 + 1
        vn[:3] = 0.01
        rep = analysis.detect_sinks(alphas, vn)
        c.exact(rep.is_sink, analysis.detect_sinks(alphas, vn).is_sink, "sink detection idempotent")
        perm = np.argsort(seeded_uniform(rng, (n,)))
        c.exact(analysis.detect_sinks(alphas[perm], vn[perm]).is_sink, rep.is_sink[perm],
                "sink detection permutation-equivariant")
        cond = (alphas > 0.1) & (vn < rep.threshold)
        c.exact(rep.is_sink, cond, "sink flags follow both conjuncts")
    layout = HeadLayout(1, 1, 3)
    b = analysis.seeded_batch(layout, 16, seed=42)
    maps = analysis.attention_maps(b, layout, SparseConfig(4, 2, 5))
    for name, amap in maps.items():
        a = analysis.compute_alphas(amap.probs[0], amap.support[0])
        c.true(np.all((a >= 0) & (a <= 1 + 1e-12)), f"{name}: alphas outside [0, 1]")
    g = seeded_gates(rng, 12, 4)
    for br in range(3):
        sim = analysis.inter_head_similarity(g, 0, br)
        c.close(abs(analysis.inter_head_similarity(g[:, ::-1], 0, br) - sim), 1e-12, "similarity head symmetry")
        c.close(abs(analysis.inter_head_similarity(g + 0.01, 0, br) - sim), 1e-9, "similarity shift invariance")
        c.true(-1 <= sim <= 1, "similarity outside [-1, 1]")
    st = analysis.gate_statistics([g])
    c.true(np.all(st.iqr >= 0), "negative IQR")


def _cli(c: _Ctx):
    from .cli import generate_fixtures
    from .config import parse_config

    cfg = parse_config("heads = 2\nkv_heads = 1\nhead_dim = 3\nseq_len = 8\nblock_size = 2\n"
                       "select_blocks = 2\nwindow = 3\nseed = 5\n")
    f1, f2 = generate_fixtures(cfg), generate_fixtures(cfg)
    c.exact(encode_tensor(f1.batch.Q), encode_tensor(f2.batch.Q), "fixture generation deterministic")
    rep = analysis.profile_branches([8, 16], cfg.sparse, HeadLayout(1, 1, 2), timing=False)
    text = analysis.cost_csv(rep)
    parsed = list(csv.DictReader(io.StringIO(text)))
    c.true([int(r["measured_count"]) for r in parsed] == [r.measured_count for r in rep.rows], "cost CSV round trip")
    c.true(analysis.cost_csv(analysis.profile_branches([8, 16], cfg.sparse, HeadLayout(1, 1, 2), timing=False)) == text,
           "bench output deterministic")


SUITES = (
    ("tensor-core: softmax, matmul, rng, fixture format", _tensor_core),
    ("attention-dense: naive oracle and row sums", _dense),
    ("attention-dense: GQA degeneracy and group map", _gqa),
    ("nsa-branches: full-budget oracle, counts, selection, compression", _branches),
    ("causality: dense, branches, hybrid", _causality),
    ("gating: range, linearity, hybrid, gradients", _gating),
    ("analysis: budget, sinks, alphas, gate similarity", _analysis),
    ("cli: determinism and CSV round trip", _cli),
)


def run_checks(tolerance_scale: float = 1.0) -> list[tuple[str, bool, str]]:
    ctx = _Ctx(tolerance_scale)
    results = []
    for name, fn in SUITES:
        try:
            fn(ctx)
            results.append((name, True, ""))
        except AssertionError as exc:
            results.append((name, False, str(exc)))
        except Exception as exc:  # a crash is a failed suite, not an aborted run
            results.append((name, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"))
    return results
