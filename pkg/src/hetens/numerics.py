"""Dense/sparse kernels with hand-derived reverse-mode rules.

Everything is float64. Kernels are pure: identical inputs give bitwise
identical outputs. Segmented reductions use numpy's sequential reduceat, so
the reduction order is fixed and runs are reproducible. Each forward kernel
is paired with a ``*_vjp`` implementing the exact vector-Jacobian product the
tape consumes; all of them are checked against central finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hetgraph import NormalizedAdjacency

DEGENERATE_SPAN = 1e-12


def as_matrix(x, name: str = "input") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# products

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_vjp(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    return grad @ b.T, a.T @ grad


def sparse_dense_multiply(adj: NormalizedAdjacency, h: np.ndarray) -> np.ndarray:
    """Aggregate source rows into receiver rows: out = adj @ h."""
    if h.shape[0] != adj.n_cols:
        raise ValueError(
            f"adjacency has {adj.n_cols} columns but h has {h.shape[0]} rows"
        )
    out = np.zeros((adj.n_rows, h.shape[1]), dtype=np.float64)
    if adj.nnz == 0 or h.shape[1] == 0:
        return out
    gathered = h[adj.indices] * adj.values[:, None]
    nz = np.diff(adj.indptr) > 0
    starts = adj.indptr[:-1][nz]
    out[nz] = np.add.reduceat(gathered, starts, axis=0)
    return out


def sparse_dense_multiply_vjp(adj: NormalizedAdjacency, grad: np.ndarray) -> np.ndarray:
    # d/dh (adj @ h) pulled back: adj^T @ grad, via the cached transpose
    return sparse_dense_multiply(adj.transposed(), grad)


# ---------------------------------------------------------------------------
# activations and dropout

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return grad * (x > 0.0)


@dataclass
class DropoutMask:
    mask: np.ndarray   # 0/1 float64
    keep: float


def apply_dropout(x: np.ndarray, p: float, rng: np.random.Generator):
    """Inverted dropout: zero with probability p, scale kept entries by 1/(1-p).

    p == 0 is the identity (mask of ones). Expected value of the output equals
    the input for any p in [0, 1).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x, DropoutMask(np.ones_like(x), 1.0)
    keep = 1.0 - p
    mask = (rng.random(x.shape) >= p).astype(np.float64)
    return x * mask / keep, DropoutMask(mask, keep)


def dropout_vjp(grad: np.ndarray, mask: DropoutMask) -> np.ndarray:
    return grad * mask.mask / mask.keep


# ---------------------------------------------------------------------------
# reductions

def mean_pool_rows(h: np.ndarray) -> np.ndarray:
    """Mean over rows, returns a (cols,) vector. Empty input is an error."""
    if h.shape[0] == 0:
        raise ValueError("cannot mean-pool zero rows")
    return h.mean(axis=0)


def mean_pool_rows_vjp(grad: np.ndarray, n_rows: int) -> np.ndarray:
    return np.broadcast_to(grad / n_rows, (n_rows, grad.shape[0])).copy()


def elementwise_l1(s: np.ndarray, exclude_diag: bool = False) -> float:
    total = float(np.abs(s).sum())
    if exclude_diag:
        total -= float(np.abs(np.diagonal(s)).sum())
    return total


def elementwise_l1_vjp(g: float, s: np.ndarray, exclude_diag: bool = False) -> np.ndarray:
    out = np.sign(s) * g  # sign(0) = 0 subgradient
    if exclude_diag:
        np.fill_diagonal(out, 0.0)
    return out


def gram(h: np.ndarray) -> np.ndarray:
    return h @ h.T


def gram_vjp(grad: np.ndarray, h: np.ndarray) -> np.ndarray:
    return (grad + grad.T) @ h


# ---------------------------------------------------------------------------
# score normalizers

def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return out * (grad - (grad * out).sum(axis=1, keepdims=True))


@dataclass
class MinMaxRecord:
    """Saved context for the min-max backward: first-index extremes per column."""

    lo_idx: np.ndarray
    hi_idx: np.ndarray
    span: np.ndarray
    degenerate: np.ndarray


def column_minmax_normalize(theta: np.ndarray):
    """Per column over rows: (x - min) / (max - min), zeros when degenerate.

    The quotient is computed from raw column differences. Subtracting the
    column mean first cancels algebraically and would only add rounding, so
    the value is identical and positive-affine column transforms that are
    exact in floating point leave the output bitwise unchanged. Extremes are
    first-index argmin/argmax of the raw column.
    """
    theta = as_matrix(theta, "theta")
    m = theta.shape[1]
    cols = np.arange(m)
    lo_idx = np.argmin(theta, axis=0)
    hi_idx = np.argmax(theta, axis=0)
    lo = theta[lo_idx, cols]
    hi = theta[hi_idx, cols]
    span = hi - lo
    degenerate = span < DEGENERATE_SPAN
    safe = np.where(degenerate, 1.0, span)
    out = (theta - lo[None, :]) / safe[None, :]
    if degenerate.any():
        out[:, degenerate] = 0.0
    return out, MinMaxRecord(lo_idx, hi_idx, span, degenerate)


def column_minmax_vjp(grad: np.ndarray, out: np.ndarray, rec: MinMaxRecord) -> np.ndarray:
    """Backward of column min-max, routed through the recorded extremes.

    For a column with span r, min row lo and max row hi:
      d theta       = g / r
      d theta[lo]  += (-sum(g) + sum(g * out)) / r
      d theta[hi]  += -sum(g * out) / r
    which sums to zero per column (the normalizer is shift-invariant).
    """
    m = grad.shape[1]
    cols = np.arange(m)
    safe = np.where(rec.degenerate, 1.0, rec.span)
    d = grad / safe[None, :]
    s1 = grad.sum(axis=0)
    s2 = (grad * out).sum(axis=0)
    d[rec.lo_idx, cols] += (-s1 + s2) / safe
    d[rec.hi_idx, cols] += -s2 / safe
    if rec.degenerate.any():
        d[:, rec.degenerate] = 0.0
    return d


# ---------------------------------------------------------------------------
# fusion weighting

def row_scale_shift(w: np.ndarray, shift: float, h: np.ndarray) -> np.ndarray:
    """(w + shift) broadcast over each row of h: out[i, :] = (w[i] + shift) * h[i, :]."""
    if w.shape != (h.shape[0],):
        raise ValueError(f"weight vector shape {w.shape} does not match {h.shape[0]} rows")
    return (w + shift)[:, None] * h


def row_scale_shift_vjp(grad: np.ndarray, w: np.ndarray, shift: float, h: np.ndarray):
    dw = (grad * h).sum(axis=1)
    dh = (w + shift)[:, None] * grad
    return dw, dh


# ---------------------------------------------------------------------------
# classification loss

def masked_mean_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                              rows: np.ndarray):
    """Mean cross-entropy over the given rows, with a stable log-sum-exp.

    Returns (loss, probs) where probs are the softmax rows needed by the vjp.
    """
    if rows.shape[0] == 0:
        raise ValueError("cross-entropy needs at least one row")
    sub = logits[rows]
    zmax = sub.max(axis=1, keepdims=True)
    z = sub - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + zmax
    picked = sub[np.arange(rows.shape[0]), labels[rows]]
    loss = float(np.mean(lse[:, 0] - picked))
    probs = np.exp(sub - lse)
    return loss, probs


def masked_mean_cross_entropy_vjp(g: float, probs: np.ndarray, labels: np.ndarray,
                                  rows: np.ndarray, n_rows_total: int) -> np.ndarray:
    out = np.zeros((n_rows_total, probs.shape[1]), dtype=np.float64)
    delta = probs.copy()
    delta[np.arange(rows.shape[0]), labels[rows]] -= 1.0
    out[rows] = delta * (g / rows.shape[0])
    return out
