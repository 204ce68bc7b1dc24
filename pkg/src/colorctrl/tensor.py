"""Deterministic float32 kernels and the seeded generator used for weights and noise.

Every reduction here accumulates in a fixed, ascending order so that a result
depends only on its inputs, never on call order, BLAS build or thread count.
Matrices are plain row-major ``numpy.float32`` arrays.

Generator
---------
``Rng`` is a counter-based SplitMix64 stream: draw ``i`` (0-based, counted
from construction) is ``mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`` with the
standard SplitMix64 finaliser.  Uniforms take the top 53 bits,
``u = (x >> 11 + 0.5) * 2**-53``, which lies strictly inside (0, 1).  Normals
use Box-Muller on consecutive uniform pairs ``(u1, u2)`` and emit
``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import ShapeError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


@numba.njit(cache=True, boundscheck=False)
def _matmul_kernel(a, b):
    m, depth = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float32)
    # Rows in tiles of four; every output element still accumulates k = 0, 1, ...
    # in order with a separate multiply and add.
    i = 0
    while i + 4 <= m:
        o0, o1, o2, o3 = out[i], out[i + 1], out[i + 2], out[i + 3]
        for k in range(depth):
            a0, a1, a2, a3 = a[i, k], a[i + 1, k], a[i + 2, k], a[i + 3, k]
            bk = b[k]
            for j in range(n):
                bj = bk[j]
                o0[j] += a0 * bj
                o1[j] += a1 * bj
                o2[j] += a2 * bj
                o3[j] += a3 * bj
        i += 4
    while i < m:
        for k in range(depth):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
        i += 1
    return out


@numba.njit(cache=True, boundscheck=False)
def _shift_rows_kernel(s, scale):
    # rounding is monotone, so max(s) * scale is exactly max(s * scale)
    m, n = s.shape
    out = np.empty_like(s)
    for i in range(m):
        # four running maxima keep the loop free of a long dependency chain
        h0 = h1 = h2 = h3 = s[i, 0]
        j = 0
        while j + 4 <= n:
            h0 = max(h0, s[i, j])
            h1 = max(h1, s[i, j + 1])
            h2 = max(h2, s[i, j + 2])
            h3 = max(h3, s[i, j + 3])
            j += 4
        while j < n:
            h0 = max(h0, s[i, j])
            j += 1
        hi = max(max(h0, h1), max(h2, h3)) * scale
        for j in range(n):
            out[i, j] = s[i, j] * scale - hi
    return out


@numba.njit(cache=True, boundscheck=False)
def _matmul_add_row_kernel(a, b, row):
    out = _matmul_kernel(a, b)
    m, n = out.shape
    for i in range(m):
        for j in range(n):
            out[i, j] += row[j]
    return out


@numba.njit(cache=True, boundscheck=False)
def _normalize_rows_kernel(e):
    m, n = e.shape
    for i in range(m):
        total = np.float32(0.0)
        for j in range(n):
            total += e[i, j]
        for j in range(n):
            e[i, j] /= total
    return e


@numba.njit(cache=True, boundscheck=False)
def _rms_norm_kernel(x, gain, eps):
    m, n = x.shape
    out = np.empty_like(x)
    inv_n = np.float32(1.0) / np.float32(n)
    for i in range(m):
        sq = np.float32(0.0)
        for j in range(n):
            sq += x[i, j] * x[i, j]
        factor = gain / np.float32(math.sqrt(sq * inv_n + eps))
        for j in range(n):
            out[i, j] = x[i, j] * factor
    return out


@numba.njit(cache=True)
def _layer_norm_kernel(x, eps):
    m, n = x.shape
    out = np.empty_like(x)
    inv_n = np.float32(1.0) / np.float32(n)
    for i in range(m):
        total = np.float32(0.0)
        for j in range(n):
            total += x[i, j]
        mean = total * inv_n
        sq = np.float32(0.0)
        for j in range(n):
            d = x[i, j] - mean
            sq += d * d
        inv_std = np.float32(1.0) / np.float32(math.sqrt(sq * inv_n + eps))
        for j in range(n):
            out[i, j] = (x[i, j] - mean) * inv_std
    return out


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed k-ascending float32 accumulation."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _matmul_kernel(a, b)


def softmax_rows(s, scale: float = 1.0) -> np.ndarray:
    """Row softmax of ``scale * s`` with max subtraction.

    Works on any array whose last axis is the row. Row sums are accumulated
    left to right.
    """
    if not scale > 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    s = as_f32(s)
    shape = s.shape
    rows = s.reshape(-1, shape[-1])
    e = _shift_rows_kernel(rows, np.float32(scale))
    # numpy's vectorised exp is elementwise-exact regardless of position, so a
    # scalar reference using np.exp on float32 values reproduces it bit for bit.
    np.exp(e, out=e)
    return _normalize_rows_kernel(e).reshape(shape)


def matmul_add_row(a, b, row) -> np.ndarray:
    """``matmul(a, b)`` plus ``row`` broadcast over the output rows."""
    a, b, row = as_f32(a), as_f32(b), as_f32(row)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if row.shape != (b.shape[1],):
        raise ShapeError(f"row of shape {row.shape} does not match {b.shape[1]} columns")
    return _matmul_add_row_kernel(a, b, row)


def layer_norm(x, eps: float = 1e-6) -> np.ndarray:
    """Per-row normalisation to zero mean and unit variance (no affine part)."""
    x = as_f32(x)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-D array, got {x.shape}")
    return _layer_norm_kernel(x, np.float32(eps))


def rms_norm(x, gain: float = 1.0, eps: float = 1e-6) -> np.ndarray:
    """Scale each row to root-mean-square ``gain``."""
    x = as_f32(x)
    if x.ndim != 2:
        raise ShapeError(f"rms_norm expects a 2-D array, got {x.shape}")
    return _rms_norm_kernel(x, np.float32(gain), np.float32(eps))


def gelu(x) -> np.ndarray:
    x = as_f32(x)
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def silu(x) -> np.ndarray:
    x = as_f32(x)
    return x / (np.float32(1.0) + np.exp(-x))


class Rng:
    """Counter-based SplitMix64 generator; see the module docstring for the exact algorithm."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in the open interval (0, 1)."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * 2.0**-53


def seeded_normal(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` float32 normals from ``rng`` by Box-Muller."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log(u[:, 0]))
    angle = 2.0 * math.pi * u[:, 1]
    z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)[:n]
    return (mean + std * z).astype(np.float32)
