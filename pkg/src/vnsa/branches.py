"""The three sparse KV branches: block compression, top-n block selection
and sliding window, each reporting exact operation counts.

Public positions (``t``) and block indices are 1-based. Block ``i`` covers
tokens ``(i-1)*s + 1 .. i*s`` and is visible to query ``t`` iff ``i*s <= t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .dense import AttendResult, HeadLayout, attend, feature_major, row_chunks
from .tensor import lr_sum


@dataclass(frozen=True)
class SparseConfig:
    s: int = 64   # block size (compression length = stride = selection block)
    n: int = 32   # selected blocks per query
    w: int = 256  # sliding-window width

    def __post_init__(self):
        if self.s < 1:
            raise ValueError(f"block size s must be >= 1, got {self.s}")
        if self.n < 0 or self.w < 0:
            raise ValueError(f"n and w must be >= 0, got n={self.n}, w={self.w}")

    @property
    def selected_tokens(self) -> int:
        return self.n * self.s


@dataclass(frozen=True)
class CompressedKv:
    Kc: np.ndarray         # (g, B, d_k)
    Vc: np.ndarray         # (g, B, d_k)
    block_end: np.ndarray  # (B,) last source position per block, 1-based

    @property
    def B(self) -> int:
        return self.Kc.shape[1]


@dataclass
class SelectionResult:
    indices: list   # per query: ascending 1-based block indices
    scores: list    # per query: importance score vector over visible blocks


@dataclass(frozen=True)
class OpCounts:
    cmp_scores: int = 0
    slc_scores: int = 0
    slc_attended: int = 0
    win_attended: int = 0

    def as_dict(self) -> dict:
        return {
            "cmp_scores": self.cmp_scores,
            "slc_scores": self.slc_scores,
            "slc_attended": self.slc_attended,
            "win_attended": self.win_attended,
        }


BRANCH_COUNTERS = ("cmp_scores", "slc_scores", "slc_attended", "win_attended")


def compress_blocks(K: np.ndarray, V: np.ndarray, s: int) -> CompressedKv:
    """Average each full block of ``s`` rows; the trailing partial block is dropped."""
    if s < 1:
        raise ValueError(f"block size must be >= 1, got {s}")
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    g, L, d = K.shape
    B = L // s

    def means(x):
        blocks = x[:, : B * s].reshape(g, B, s, d)
        return (lr_sum(blocks, axis=2) / s).astype(np.float32)

    return CompressedKv(means(K), means(V), np.arange(1, B + 1, dtype=np.int64) * s)


# -- row kernels: one query head, many positions ---------------------------

class BranchRows(NamedTuple):
    out: np.ndarray      # (m, d) float64
    probs: np.ndarray    # (m, S) float64 over the branch's key list
    support: np.ndarray  # (m, S) bool
    keys: np.ndarray     # (m, S) int, 0-based key index (token or block); -1 when unused
    count: int


def compression_rows(q: np.ndarray, kc: np.ndarray, vc: np.ndarray, block_end: np.ndarray,
                     positions: np.ndarray) -> BranchRows:
    """Attention of query rows over visible compressed blocks of one group."""
    positions = np.asarray(positions, dtype=np.int64)
    valid = block_end[None, :] <= positions[:, None]
    res = attend(q, feature_major(kc), feature_major(vc), valid)
    keys = np.broadcast_to(np.arange(kc.shape[0]), valid.shape)
    return BranchRows(res.out, res.probs, valid, keys, res.count)


def group_scores(head_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Sum compression probabilities of the heads sharing one KV group, head order."""
    return lr_sum(np.stack(head_probs, axis=0), axis=0)


def top_blocks_rows(scores: np.ndarray, visible: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    """Top-n visible blocks per row, lower index wins ties.

    Returns an (m, n) array of ascending 0-based block indices padded with -1,
    and the number of score entries that were ranked.
    """
    m, B = scores.shape
    ranked = int(np.count_nonzero(visible))
    sel = np.full((m, n), -1, dtype=np.int64)
    if n == 0 or B == 0:
        return sel, ranked
    key = np.where(visible, -scores, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :n]
    take = np.minimum(visible.sum(axis=1), n)
    keep = np.arange(min(n, B))[None, :] < take[:, None]
    picked = np.where(keep, order, np.iinfo(np.int64).max)
    picked.sort(axis=1)
    picked = np.where(picked == np.iinfo(np.int64).max, -1, picked)
    sel[:, : picked.shape[1]] = picked
    return sel, ranked


def selection_rows(q: np.ndarray, k: np.ndarray, v: np.ndarray, sel: np.ndarray, s: int,
                   keep_probs: bool = True) -> BranchRows:
    """Token-level attention over the concatenated selected blocks."""
    m, n = sel.shape
    S = n * s
    token_idx = (sel[:, :, None] * s + np.arange(s)[None, None, :]).reshape(m, S)
    valid = np.repeat(sel >= 0, s, axis=1)
    token_idx = np.where(valid, token_idx, -1)
    out, probs, count = _gathered(q, k, v, token_idx, valid, keep_probs)
    return BranchRows(out, probs, valid, token_idx, count)


def window_rows(q: np.ndarray, k: np.ndarray, v: np.ndarray, w: int, positions: np.ndarray,
                keep_probs: bool = True) -> BranchRows:
    """Attention over positions max(1, t-w+1) .. t."""
    positions = np.asarray(positions, dtype=np.int64)
    token_idx = positions[:, None] - w + np.arange(w)[None, :]  # 0-based
    valid = token_idx >= 0
    token_idx = np.where(valid, token_idx, -1)
    out, probs, count = _gathered(q, k, v, token_idx, valid, keep_probs)
    return BranchRows(out, probs, valid, token_idx, count)


def _gathered(q, k, v, token_idx, valid, keep_probs):
    m, S = token_idx.shape
    d = k.shape[1]
    out = np.zeros((m, d), dtype=np.float64)
    probs = np.zeros((m, S), dtype=np.float64) if keep_probs else np.zeros((m, 0))
    count = 0
    if S == 0:
        return out, probs, 0
    safe = np.maximum(token_idx, 0)
    kf, vf = feature_major(k), feature_major(v)
    for sl in row_chunks(m, S * d):
        res: AttendResult = attend(q[sl], kf[:, safe[sl]], vf[:, safe[sl]], valid[sl])
        out[sl] = res.out
        if keep_probs:
            probs[sl] = res.probs
        count += res.count
    return out, probs, count


# -- single-query operations -----------------------------------------------

def compression_attention(q_t, compressed: CompressedKv, t: int, group: int = 1):
    """Attend ``q_t`` over compressed blocks of ``group`` (1-based) visible at ``t``.

    Returns ``(output, probs)``; ``probs`` covers the visible blocks only and is
    empty (with a zero output) when no block has closed yet.
    """
    q = np.asarray(q_t, dtype=np.float32)[None, :]
    gi = group - 1
    rows = compression_rows(q, compressed.Kc[gi], compressed.Vc[gi], compressed.block_end, [t])
    nvis = int(rows.support[0].sum())
    return rows.out[0].astype(np.float32), rows.probs[0, :nvis].copy()


def importance_scores(probs_per_head: Sequence[np.ndarray], layout: HeadLayout) -> list[np.ndarray]:
    """Per-group block importance: sum of the group's head probabilities."""
    if len(probs_per_head) != layout.h:
        raise ValueError(f"expected {layout.h} head probability vectors, got {len(probs_per_head)}")
    out = []
    for gi in range(layout.g):
        heads = layout.heads_in_group(gi)
        vecs = [np.asarray(probs_per_head[i], dtype=np.float64) for i in heads]
        if len({len(x) for x in vecs}) != 1:
            raise RuntimeError(f"group {gi + 1}: heads disagree on the visible block set")
        out.append(group_scores(vecs))
    return out


def select_top_blocks(scores, n: int) -> np.ndarray:
    """Indices (1-based, ascending) of the ``n`` best blocks; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)[None, :]
    sel, _ = top_blocks_rows(scores, np.ones(scores.shape, dtype=bool), n)
    sel = sel[0]
    return sel[sel >= 0] + 1


def selection_attention(q_t, K, V, selection, s: int, t: int) -> np.ndarray:
    """Attend over the tokens of the selected (1-based) blocks of one KV group."""
    blocks = np.asarray(selection, dtype=np.int64)
    if blocks.size and (blocks.min() < 1 or blocks.max() * s > t):
        raise ValueError(f"selection {blocks.tolist()} not causally visible at t={t}")
    d = np.shape(K)[1]
    if blocks.size == 0:
        return np.zeros(d, dtype=np.float32)
    q = np.asarray(q_t, dtype=np.float32)[None, :]
    rows = selection_rows(q, np.asarray(K), np.asarray(V), (blocks - 1)[None, :], s)
    return rows.out[0].astype(np.float32)


def sliding_window_attention(q_t, K, V, w: int, t: int) -> np.ndarray:
    if w < 0:
        raise ValueError(f"window must be >= 0, got {w}")
    q = np.asarray(q_t, dtype=np.float32)[None, :]
    rows = window_rows(q, np.asarray(K), np.asarray(V), w, [t])
    return rows.out[0].astype(np.float32)


# -- analytic counts --------------------------------------------------------

def _floor_sum(L: int, s: int) -> int:
    """sum_{t=1..L} floor(t / s)."""
    if L <= 0:
        return 0
    B, r = divmod(L, s)
    return s * B * (B - 1) // 2 + B * (r + 1)


def branch_op_counts(L: int, config: SparseConfig) -> OpCounts:
    """Closed-form per-head operation counts for a prefill of length ``L``.

    cmp_scores   sum_t floor(t/s)             compressed keys scored
    slc_scores   same as cmp_scores           scores ranked by top-n
    slc_attended sum_t s*min(n, floor(t/s))   token keys in selected blocks
    win_attended sum_t min(w, t)              token keys in the window
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    s, n, w = config.s, config.n, config.w
    cmp = _floor_sum(L, s)
    if n == 0:
        capped = 0
    else:
        knee = n * s - 1  # last t with floor(t/s) < n
        capped = _floor_sum(min(L, knee), s) + n * max(0, L - knee)
    if L <= w:
        win = L * (L + 1) // 2
    else:
        win = w * (w + 1) // 2 + w * (L - w)
    return OpCounts(cmp, cmp, s * capped, win)
