"""Dense causal attention and grouped-query head bookkeeping.

This path is both the text-token route of the hybrid layer and the
reference every sparse branch is checked against.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import as_tensor, lr_sum, softmax_rows

# rows x keys budget for one gathered chunk (float64 elements)
_CHUNK_ELEMS = 1 << 21


def thread_count() -> int:
    """Kernel parallelism cap from ``VNSA_THREADS`` (default 1)."""
    raw = os.environ.get("VNSA_THREADS", "1").strip()
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Iterable) -> list:
    """Map over independent work items, threaded when ``VNSA_THREADS`` > 1.

    Items never share reductions, so results are identical at any thread count.
    """
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class HeadLayout:
    h: int
    g: int
    d_k: int

    def __post_init__(self):
        if self.h < 1 or self.g < 1 or self.g > self.h:
            raise ValueError(f"need 1 <= g <= h, got h={self.h}, g={self.g}")
        if self.h % self.g:
            raise ValueError(f"h={self.h} is not divisible by g={self.g}")
        if self.d_k < 1:
            raise ValueError(f"d_k must be >= 1, got {self.d_k}")

    @property
    def heads_per_group(self) -> int:
        return self.h // self.g

    def group_index(self, head0: int) -> int:
        """0-based group of a 0-based head."""
        return gqa_group_of_head(head0 + 1, self) - 1

    def heads_in_group(self, group0: int) -> list[int]:
        return [i for i in range(self.h) if self.group_index(i) == group0]


def gqa_group_of_head(s: int, layout: HeadLayout) -> int:
    """Group of 1-based query head ``s``: ceil(s * g / h), also 1-based."""
    if not 1 <= s <= layout.h:
        raise IndexError(f"head index {s} outside [1, {layout.h}]")
    return -((-s * layout.g) // layout.h)


@dataclass(frozen=True)
class QkvBatch:
    """Post-projection queries (h, L, d_k) and shared keys/values (g, L, d_k)."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in ("Q", "K", "V"):
            arr = getattr(self, name)
            if np.asarray(arr).ndim != 3:
                raise ShapeError(f"{name} must be 3-D, got shape {np.shape(arr)}")
            object.__setattr__(self, name, as_tensor(arr))
        if self.K.shape != self.V.shape:
            raise ShapeError(f"K shape {self.K.shape} != V shape {self.V.shape}")
        if self.Q.shape[1:] != self.K.shape[1:]:
            raise ShapeError(f"Q shape {self.Q.shape} incompatible with K shape {self.K.shape}")

    @property
    def L(self) -> int:
        return self.Q.shape[1]

    def check(self, layout: HeadLayout) -> None:
        if self.Q.shape[0] != layout.h or self.K.shape[0] != layout.g or self.Q.shape[2] != layout.d_k:
            raise ShapeError(
                f"batch Q{self.Q.shape}/K{self.K.shape} inconsistent with "
                f"h={layout.h}, g={layout.g}, d_k={layout.d_k}"
            )

    def subsequence(self, positions0: np.ndarray) -> "QkvBatch":
        idx = np.asarray(positions0, dtype=np.int64)
        return QkvBatch(self.Q[:, idx], self.K[:, idx], self.V[:, idx])


class AttendResult(NamedTuple):
    out: np.ndarray      # (m, d) float64
    probs: np.ndarray    # (m, S) float64
    count: int           # number of (query, key) pairs scored


def attend(q: np.ndarray, keys: np.ndarray, vals: np.ndarray, valid: np.ndarray) -> AttendResult:
    """Scaled dot-product attention for a block of query rows.

    ``q`` is (m, d). ``keys``/``vals`` are feature-major: (d, S) when shared
    by every row, or (d, m, S) when gathered per row. ``valid`` is (m, S).
    Dot products run over d and the value reduction over S, both left to
    right in float64. Rows with no valid key return a zero vector.
    """
    q = np.asarray(q, dtype=np.float64)
    m, d = q.shape
    scale = 1.0 / math.sqrt(d)
    logits = np.zeros(valid.shape)
    for j in range(d):
        logits += q[:, j, None] * keys[j]
    logits *= scale
    probs = softmax_rows(logits, valid)
    out = np.empty((m, d), dtype=np.float64)
    for j in range(d):
        out[:, j] = lr_sum(probs * vals[j], axis=1)
    return AttendResult(out, probs, int(np.count_nonzero(valid)))


def feature_major(x: np.ndarray) -> np.ndarray:
    """(S, d) float32 -> contiguous (d, S) float64."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).T)


def row_chunks(m: int, width: int) -> list[slice]:
    step = max(1, _CHUNK_ELEMS // max(1, width))
    return [slice(a, min(m, a + step)) for a in range(0, m, step)]


def dense_rows(q: np.ndarray, k: np.ndarray, v: np.ndarray, positions: np.ndarray,
               keep_probs: bool = False) -> AttendResult:
    """Causal attention of query rows at 1-based ``positions`` over one KV head."""
    positions = np.asarray(positions, dtype=np.int64)
    L = k.shape[0]
    key_pos = np.arange(1, L + 1)
    kf, vf = feature_major(k), feature_major(v)
    outs, probs, count = [], [], 0
    for sl in row_chunks(len(positions), L):
        valid = key_pos[None, :] <= positions[sl, None]
        res = attend(q[sl], kf, vf, valid)
        outs.append(res.out)
        if keep_probs:
            probs.append(res.probs)
        count += res.count
    out = np.concatenate(outs) if outs else np.zeros((0, k.shape[1]))
    p = np.concatenate(probs) if probs else np.zeros((0, L))
    return AttendResult(out, p, count)


def dense_causal_attention(batch: QkvBatch, layout: HeadLayout, return_probs: bool = False):
    """Causal GQA over the whole sequence; returns (h, L, d_k) float32.

    With ``return_probs`` also returns the (h, L, L) attention matrices.
    """
    batch.check(layout)
    L = batch.L
    if L == 0:
        raise ValueError("empty sequence: L = 0")
    positions = np.arange(1, L + 1)

    def one_head(i):
        gi = layout.group_index(i)
        return dense_rows(batch.Q[i], batch.K[gi], batch.V[gi], positions, keep_probs=return_probs)

    results = parallel_map(one_head, range(layout.h))
    out = np.stack([r.out for r in results]).astype(np.float32)
    if return_probs:
        return out, np.stack([r.probs for r in results])
    return out


def concat_heads(heads: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Stack per-head outputs (each L x d_k) into rows [o^(1) | ... | o^(h)]."""
    heads = [np.asarray(x) for x in heads]
    if not heads:
        raise ShapeError("no heads to concatenate")
    first = heads[0].shape
    for i, x in enumerate(heads):
        if x.ndim != 2 or x.shape != first:
            raise ShapeError(f"head {i + 1} has shape {x.shape}, expected {first}")
    return np.concatenate(heads, axis=1)


def split_heads(rows: np.ndarray, h: int) -> np.ndarray:
    """Inverse of :func:`concat_heads`: (L, h*d_k) -> (h, L, d_k)."""
    L, width = rows.shape
    if width % h:
        raise ShapeError(f"width {width} not divisible by h={h}")
    return rows.reshape(L, h, width // h).transpose(1, 0, 2).copy()
