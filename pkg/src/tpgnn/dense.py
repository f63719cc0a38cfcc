"""Dense float64 kernels: products, activations, softmax loss, column slicing.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
product here accumulates over the inner dimension in ascending index order
with one rounding per multiply and one per add, so restricting an operand to
a subset of its rows (or a product to a subset of its columns) reproduces
the corresponding part of the full result bit for bit. Engines rely on this
to agree with the single-worker oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def even_ranges(total: int, parts: int) -> list[tuple[int, int]]:
    """Split ``[0, total)`` into ``parts`` contiguous ranges.

    The first ``total % parts`` ranges get ``ceil(total / parts)`` items and
    the rest ``floor(total / parts)``. Used for vertex ownership, chunk
    ranges and column slices alike.
    """
    if parts < 1:
        raise ValueError(f"parts must be >= 1, got {parts}")
    base, extra = divmod(total, parts)
    out = []
    lo = 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


# --- products -------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    """``a @ b`` with a fixed ascending-k accumulation order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def matmul_tn(a, b) -> np.ndarray:
    """``a.T @ b``, accumulating over rows of ``a`` and ``b`` in ascending order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn: {a.shape}^T x {b.shape}")
    return matmul(np.ascontiguousarray(a.T), b)


def matmul_nt(a, b) -> np.ndarray:
    """``a @ b.T``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: {a.shape} x {b.shape}^T")
    return matmul(a, np.ascontiguousarray(b.T))


# --- activations ----------------------------------------------------------


def relu(m) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    return np.where(m > 0, m, 0.0)


def relu_grad(pre, upstream) -> np.ndarray:
    pre = np.asarray(pre, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if pre.shape != upstream.shape:
        raise ShapeError(f"relu_grad: {pre.shape} vs {upstream.shape}")
    return np.where(pre > 0, upstream, 0.0)


def leaky_relu(m, slope: float = 0.2) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    return np.where(m > 0, m, slope * m)


def leaky_relu_grad(pre, upstream, slope: float = 0.2) -> np.ndarray:
    pre = np.asarray(pre, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if pre.shape != upstream.shape:
        raise ShapeError(f"leaky_relu_grad: {pre.shape} vs {upstream.shape}")
    return np.where(pre > 0, upstream, slope * upstream)


# --- softmax / loss -------------------------------------------------------


def row_softmax(m) -> np.ndarray:
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent_sum(logits, labels, mask, denom: int) -> tuple[float, np.ndarray]:
    """Summed negative log-likelihood over masked rows, and its gradient.

    The gradient is that of ``sum / denom``, so workers holding disjoint row
    subsets can each call this with the global training-row count as
    ``denom`` and their partial sums add up to the mean loss.
    """
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (logits.shape[0],) or mask.shape != labels.shape:
        raise ShapeError(
            f"labels/mask must have {logits.shape[0]} entries, "
            f"got {labels.shape} and {mask.shape}"
        )
    if denom <= 0:
        raise ValueError("loss is undefined for an empty training mask")
    rows = np.flatnonzero(mask)
    if rows.size and (labels[rows].min() < 0 or labels[rows].max() >= logits.shape[1]):
        raise ValueError("label outside [0, classes)")
    grad = np.zeros_like(logits)
    if rows.size == 0:
        return 0.0, grad
    logp = _log_softmax(logits[rows])
    picked = logp[np.arange(rows.size), labels[rows]]
    total = float(-picked.sum())
    g = np.exp(logp)
    g[np.arange(rows.size), labels[rows]] -= 1.0
    grad[rows] = g / denom
    return total, grad


def softmax_xent_loss(logits, labels, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the rows selected by ``mask``; gradient is zero elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss is undefined for an empty training mask")
    total, grad = softmax_xent_sum(logits, labels, mask, n)
    return total / n, grad


# --- column slices --------------------------------------------------------


@dataclass
class FeatureSlice:
    """Columns ``[lo, hi)`` of a matrix, held by worker ``owner``."""

    owner: int
    lo: int
    hi: int
    data: np.ndarray

    def __post_init__(self):
        self.data = as_matrix(self.data)
        if not 0 <= self.lo < self.hi:
            raise ShapeError(f"invalid column range [{self.lo}, {self.hi})")
        if self.data.shape[1] != self.hi - self.lo:
            raise ShapeError(
                f"slice data has {self.data.shape[1]} columns for range [{self.lo}, {self.hi})"
            )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.hi - self.lo

    def with_data(self, data) -> "FeatureSlice":
        return FeatureSlice(self.owner, self.lo, self.hi, data)


def col_slice(m, col_range: tuple[int, int], owner: int = 0) -> FeatureSlice:
    m = as_matrix(m)
    lo, hi = col_range
    if not 0 <= lo < hi <= m.shape[1]:
        raise ShapeError(f"column range [{lo}, {hi}) outside width {m.shape[1]}")
    return FeatureSlice(owner, lo, hi, np.array(m[:, lo:hi]))


def col_partition(m, parts: int) -> list[FeatureSlice]:
    m = as_matrix(m)
    if parts > m.shape[1]:
        raise ShapeError(f"cannot split {m.shape[1]} columns across {parts} workers")
    return [col_slice(m, r, owner=i) for i, r in enumerate(even_ranges(m.shape[1], parts))]


def col_concat(slices: Sequence[FeatureSlice]) -> np.ndarray:
    """Reassemble slices (ordered by owner id) into one matrix."""
    if not slices:
        raise ShapeError("col_concat needs at least one slice")
    ordered = sorted(slices, key=lambda s: s.owner)
    rows = ordered[0].rows
    expect = 0
    for s in ordered:
        if s.rows != rows:
            raise ShapeError(f"slice row counts differ: {s.rows} vs {rows}")
        if s.lo != expect:
            kind = "overlapping" if s.lo < expect else "gapped"
            raise ShapeError(f"{kind} column ranges at column {s.lo}")
        expect = s.hi
    return np.concatenate([s.data for s in ordered], axis=1)


def glorot_init(rows: int, cols: int, seed: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, cols))
