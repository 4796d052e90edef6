"""Learnable branch gate, gated three-branch fusion and the hybrid
vision/text attention layer.

Gate values are arrays of shape (L, h, 3) with branch order
(compression, selection, window). The MLP produces entries strictly
inside (0, 1); the fusion kernel also accepts hand-set 0/1 corners.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .branches import (
    CompressedKv,
    OpCounts,
    SparseConfig,
    compress_blocks,
    compression_rows,
    group_scores,
    selection_rows,
    top_blocks_rows,
    window_rows,
)
from .dense import HeadLayout, QkvBatch, concat_heads, dense_causal_attention, parallel_map
from .errors import ConfigError, ShapeError
from .tensor import Rng64, as_tensor, load_tensor, lr_sum, matmul64, save_tensor, seeded_uniform

BRANCHES = ("cmp", "slc", "win")
GATE_PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class GateParams:
    W1: np.ndarray  # (d_in, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    W2: np.ndarray  # (d_hidden, 3h)
    b2: np.ndarray  # (3h,)

    def __post_init__(self):
        for name in GATE_PARAM_NAMES:
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        d_in, d_hid = self.W1.shape
        if self.b1.shape != (d_hid,) or self.W2.shape[0] != d_hid:
            raise ShapeError(f"gate hidden dims disagree: W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape}")
        if self.W2.shape[1] % 3 or self.b2.shape != (self.W2.shape[1],):
            raise ShapeError(f"gate output must be 3*h wide: W2{self.W2.shape} b2{self.b2.shape}")

    @property
    def heads(self) -> int:
        return self.W2.shape[1] // 3

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, heads: int) -> "GateParams":
        return cls(np.zeros((d_in, d_hidden)), np.zeros(d_hidden),
                   np.zeros((d_hidden, 3 * heads)), np.zeros(3 * heads))

    @classmethod
    def seeded(cls, rng: Rng64, d_in: int, d_hidden: int, heads: int, scale: float = 1.0) -> "GateParams":
        """Draw W1, b1, W2, b2 in that order from ``rng``, multiplied by ``scale``."""
        arrs = [seeded_uniform(rng, shp) * np.float32(scale)
                for shp in ((d_in, d_hidden), (d_hidden,), (d_hidden, 3 * heads), (3 * heads,))]
        return cls(*arrs)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in GATE_PARAM_NAMES:
            save_tensor(directory / f"{name}.vnsa", getattr(self, name))

    @classmethod
    def load(cls, directory) -> "GateParams":
        directory = Path(directory)
        return cls(*(load_tensor(directory / f"{name}.vnsa") for name in GATE_PARAM_NAMES))


def _forward_parts(x, params: GateParams):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.d_in:
        raise ShapeError(f"gate input width {x.shape[1]} != W1 rows {params.d_in}")
    pre1 = matmul64(x, params.W1) + params.b1.astype(np.float64)
    hidden = np.maximum(pre1, 0.0)
    pre2 = matmul64(hidden, params.W2) + params.b2.astype(np.float64)
    out = _sigmoid(pre2)
    return x, pre1, hidden, pre2, out


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gate_forward(x, params: GateParams) -> np.ndarray:
    """sigmoid(relu(x W1 + b1) W2 + b2) reshaped to (h, 3), or (L, h, 3) for a matrix ``x``."""
    single = np.asarray(x).ndim == 1
    *_, out = _forward_parts(x, params)
    gates = out.reshape(out.shape[0], params.heads, 3)
    return gates[0] if single else gates


def gate_backward(x, params: GateParams, upstream) -> dict:
    """Gradients of ``sum(upstream * gate_forward(x))`` w.r.t. x, W1, b1, W2, b2.

    The relu subgradient at exactly zero is taken as 0.
    """
    single = np.asarray(x).ndim == 1
    x2, pre1, hidden, _, out = _forward_parts(x, params)
    up = np.asarray(upstream, dtype=np.float64).reshape(out.shape)
    d_pre2 = up * out * (1.0 - out)
    dW2 = matmul64(hidden.T, d_pre2)
    db2 = lr_sum(d_pre2, axis=0)
    d_hidden = matmul64(d_pre2, params.W2.T)
    d_pre1 = d_hidden * (pre1 > 0)
    dW1 = matmul64(x2.T, d_pre1)
    db1 = lr_sum(d_pre1, axis=0)
    dx = matmul64(d_pre1, params.W1.T)
    return {"x": dx[0] if single else dx, "W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def gate_inputs(Q: np.ndarray) -> np.ndarray:
    """Per-token gate input: the token's query vectors of all heads, concatenated."""
    return concat_heads(list(np.asarray(Q)))


def gates_from_queries(Q: np.ndarray, params: GateParams) -> np.ndarray:
    return gate_forward(gate_inputs(Q), params)


def check_gates(gates, L: int, h: int) -> np.ndarray:
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (L, h, 3):
        raise ShapeError(f"gates shape {gates.shape}, expected {(L, h, 3)}")
    # learned gates are strictly inside (0, 1); the kernel also takes the 0/1 corners
    if not np.all(np.isfinite(gates)) or not np.all((gates >= 0) & (gates <= 1)):
        raise ValueError("gate values must lie in [0, 1]")
    return gates


# -- gated fusion -------------------------------------------------------------

@dataclass
class NsaTrace:
    """Branch outputs and bookkeeping from one gated forward pass."""

    compressed: CompressedKv
    branch_out: np.ndarray            # (3, h, L, d_k) float64
    selections: list                  # per group: (L, n) 0-based blocks, -1 padded
    counts: list = field(default_factory=list)  # per head OpCounts


def nsa_forward(batch: QkvBatch, layout: HeadLayout, sparse: SparseConfig, gates) -> tuple[np.ndarray, NsaTrace]:
    batch.check(layout)
    L = batch.L
    gates = check_gates(gates, L, layout.h)
    ckv = compress_blocks(batch.K, batch.V, sparse.s)
    positions = np.arange(1, L + 1)

    def one_group(gi):
        heads = layout.heads_in_group(gi)
        k, v = batch.K[gi], batch.V[gi]
        cmp = {i: compression_rows(batch.Q[i], ckv.Kc[gi], ckv.Vc[gi], ckv.block_end, positions) for i in heads}
        if heads:
            scores = group_scores([cmp[i].probs for i in heads])
            sel, ranked = top_blocks_rows(scores, cmp[heads[0]].support, sparse.n)
        else:
            sel, ranked = np.full((L, sparse.n), -1, dtype=np.int64), 0
        per_head = {}
        for i in heads:
            slc = selection_rows(batch.Q[i], k, v, sel, sparse.s, keep_probs=False)
            win = window_rows(batch.Q[i], k, v, sparse.w, positions, keep_probs=False)
            counts = OpCounts(cmp[i].count, ranked, slc.count, win.count)
            per_head[i] = (cmp[i].out, slc.out, win.out, counts)
        return sel, per_head

    results = parallel_map(one_group, range(layout.g))
    branch_out = np.zeros((3, layout.h, L, layout.d_k), dtype=np.float64)
    counts = [None] * layout.h
    selections = []
    for sel, per_head in results:
        selections.append(sel)
        for i, (o_c, o_s, o_w, c) in per_head.items():
            branch_out[0, i], branch_out[1, i], branch_out[2, i] = o_c, o_s, o_w
            counts[i] = c
    # (L, h, 3) -> (3, h, L, 1)
    g = gates.transpose(2, 1, 0)[..., None]
    fused = g[0] * branch_out[0] + g[1] * branch_out[1] + g[2] * branch_out[2]
    return fused.astype(np.float32), NsaTrace(ckv, branch_out, selections, counts)


def nsa_attention(batch: QkvBatch, layout: HeadLayout, sparse: SparseConfig, gates) -> np.ndarray:
    """Gate-weighted sum of compression, selection and window attention, (h, L, d_k)."""
    out, _ = nsa_forward(batch, layout, sparse, gates)
    return out


# -- hybrid vision/text layer -----------------------------------------------

@dataclass(frozen=True)
class ModalitySpans:
    """Ordered, disjoint 1-based inclusive spans tagged "vision" or "text"."""

    spans: tuple

    def __post_init__(self):
        spans = tuple((int(a), int(b), str(kind)) for a, b, kind in self.spans)
        object.__setattr__(self, "spans", spans)
        expect = 1
        for a, b, kind in spans:
            if kind not in ("vision", "text"):
                raise ConfigError(f"unknown modality {kind!r}")
            if a != expect or b < a:
                raise ConfigError(f"span {a}-{b} breaks contiguous coverage (expected start {expect})")
            expect = b + 1

    @property
    def L(self) -> int:
        return self.spans[-1][1] if self.spans else 0

    @classmethod
    def from_vision(cls, L: int, vision) -> "ModalitySpans":
        """Build a full cover of [1, L] from vision ranges; gaps become text."""
        out, cur = [], 1
        for a, b in sorted((int(a), int(b)) for a, b in vision):
            if a < cur or b < a or b > L:
                raise ConfigError(f"vision span {a}-{b} overlaps or leaves [1, {L}]")
            if a > cur:
                out.append((cur, a - 1, "text"))
            out.append((a, b, "vision"))
            cur = b + 1
        if cur <= L:
            out.append((cur, L, "text"))
        return cls(tuple(out))

    def mask(self, kind: str) -> np.ndarray:
        m = np.zeros(self.L, dtype=bool)
        for a, b, k in self.spans:
            if k == kind:
                m[a - 1:b] = True
        return m

    def positions0(self, kind: str) -> np.ndarray:
        return np.flatnonzero(self.mask(kind))

    def to_array(self) -> np.ndarray:
        return np.array([[a, b, 1.0 if k == "vision" else 0.0] for a, b, k in self.spans],
                        dtype=np.float32).reshape(-1, 3)

    @classmethod
    def from_array(cls, arr) -> "ModalitySpans":
        arr = np.asarray(arr)
        return cls(tuple((int(a), int(b), "vision" if k > 0.5 else "text") for a, b, k in arr))


def hybrid_forward(batch: QkvBatch, layout: HeadLayout, sparse: SparseConfig, gates,
                   spans: ModalitySpans):
    """Returns (rows (L, h*d_k) float32, per-head output (h, L, d_k), nsa trace or None)."""
    batch.check(layout)
    if spans.L != batch.L:
        raise ConfigError(f"spans cover {spans.L} tokens but the batch has {batch.L}")
    gates = check_gates(gates, batch.L, layout.h)
    vis = spans.positions0("vision")
    txt = spans.positions0("text")
    out = np.zeros((layout.h, batch.L, layout.d_k), dtype=np.float32)
    trace = None
    if len(txt):
        dense = dense_causal_attention(batch, layout)
        out[:, txt] = dense[:, txt]
    if len(vis):
        v_out, trace = nsa_forward(batch.subsequence(vis), layout, sparse, gates[vis])
        out[:, vis] = v_out
    return concat_heads(list(out)), out, trace


def hybrid_layer_attention(batch: QkvBatch, layout: HeadLayout, sparse: SparseConfig, gates,
                           spans: ModalitySpans) -> np.ndarray:
    """Vision queries run gated sparse attention over the preceding vision tokens;
    text queries run dense GQA over everything before them. Output rows keep the
    original token order with heads concatenated."""
    rows, _, _ = hybrid_forward(batch, layout, sparse, gates, spans)
    return rows
