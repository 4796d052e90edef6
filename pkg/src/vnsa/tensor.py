"""Dense numeric substrate.

Tensors are plain ``numpy.ndarray`` objects with ``float32`` storage in
row-major (C) order. Every reduction that feeds a kernel output is
accumulated in ``float64`` in a fixed left-to-right order so results are
bit-reproducible regardless of thread count or BLAS build.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import EmptySupportError, ShapeError

MAGIC = b"VNSA"
VERSION = 1

_SM_INCREMENT = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG64 = 2.0 ** -64

UNIFORM_LOW = -0.05
UNIFORM_HIGH = 0.05


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``x`` into a C-ordered float32 array."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def lr_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` strictly left to right in float64.

    ``np.sum`` uses pairwise summation, whose order depends on length and
    memory layout; a running cumulative sum does not.
    """
    x = np.asarray(x, dtype=np.float64)
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        shape = list(x.shape)
        if keepdims:
            shape[axis] = 1
        else:
            del shape[axis]
        return np.zeros(shape, dtype=np.float64)
    total = np.take(np.cumsum(x, axis=axis), -1, axis=axis)
    if keepdims:
        total = np.expand_dims(total, axis)
    return total


def softmax_rows(logits: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Masked softmax along the last axis; fully masked rows become all zeros."""
    logits = np.asarray(logits, dtype=np.float64)
    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    if logits.shape[-1] == 0:
        return np.zeros(logits.shape, dtype=np.float64)
    mx = np.max(logits, axis=-1, where=valid, initial=-np.inf, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    shifted = np.where(valid, logits - mx, 0.0)
    e = np.where(valid, np.exp(shifted), 0.0)
    z = lr_sum(e, axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def stable_softmax(logits, mask=None) -> np.ndarray:
    """Softmax of a 1-D logit vector with an optional keep-mask.

    Masked entries (``mask[i] == False``) come back as exactly 0. The
    unmasked maximum is subtracted before exponentiation and the normaliser
    is summed left to right in float64.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"softmax expects a non-empty vector, got shape {logits.shape}")
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any():
        raise EmptySupportError("empty attention support")
    return softmax_rows(logits, mask)


def matmul64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fixed-order float64 product: output[i, j] accumulates k = 0, 1, ... in turn."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a64 = a.astype(np.float64, copy=False)
    b64 = b.astype(np.float64, copy=False)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a64[:, k, None] * b64[None, k, :]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with float64 accumulation in fixed index order, rounded to float32."""
    return matmul64(a, b).astype(np.float32)


class Rng64:
    """splitmix64 generator.

    Each draw adds the golden-ratio increment to the state and mixes it;
    the stream for a given seed is identical on every platform.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) % (1 << 64)

    def __repr__(self):
        return f"Rng64(state=0x{self.state:016x})"

    def next_u64(self, count: int) -> np.ndarray:
        count = int(count)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _SM_INCREMENT
            z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
            z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * 0x9E3779B97F4A7C15) % (1 << 64)
        return z


def seeded_uniform(rng: Rng64, shape) -> np.ndarray:
    """Fill a float32 tensor of ``shape`` with values in [-0.05, 0.05).

    Each 64-bit draw ``u`` maps to ``(u / 2**64) * 0.1 - 0.05`` (computed in
    float64), filled in row-major order. The float32 rounding step can land
    on the open upper bound or just below the lower one; those values are
    nudged one ulp back inside the range.
    """
    shape = tuple(int(d) for d in np.atleast_1d(shape))
    if any(d <= 0 for d in shape):
        raise ValueError(f"shape entries must be positive, got {shape}")
    n = int(np.prod(shape))
    u = rng.next_u64(n)
    vals = (u.astype(np.float64) * _TWO_NEG64) * 0.1 - 0.05
    out = vals.astype(np.float32)
    hi = out.astype(np.float64) >= UNIFORM_HIGH
    out[hi] = np.nextafter(out[hi], np.float32(-1.0))
    lo = out.astype(np.float64) < UNIFORM_LOW
    out[lo] = np.nextafter(out[lo], np.float32(1.0))
    return out.reshape(shape)


# -- VNSA binary fixture format -------------------------------------------

def encode_tensor(arr) -> bytes:
    arr = as_tensor(arr, check_finite=False)
    if arr.ndim > 255:
        raise ShapeError(f"too many dims for VNSA format: {arr.ndim}")
    header = MAGIC + bytes([VERSION, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ValueError("not a VNSA tensor (bad magic)")
    if buf[4] != VERSION:
        raise ValueError(f"unsupported VNSA version {buf[4]}")
    ndim = buf[5]
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise ValueError("truncated VNSA header")
    dims = struct.unpack(f"<{ndim}I", buf[6:off])
    n = int(np.prod(dims)) if ndim else 1
    if len(buf) != off + 4 * n:
        raise ValueError(f"VNSA payload is {len(buf) - off} bytes, expected {4 * n} for dims {dims}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
    return data.astype(np.float32).reshape(dims)


def write_bytes_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def save_tensor(path, arr) -> None:
    write_bytes_atomic(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read tensor fixture {path}: {exc}") from exc
    return decode_tensor(buf)
