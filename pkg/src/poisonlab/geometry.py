"""Composite constructions over the fixed autodiff op set.

The op vocabulary has no transpose, divide, sqrt or gather, so the
standard moves are built here from what exists: row gathers are one-hot
matmuls, row normalization goes through exp(-0.5*log(|x|^2)), and
pairwise squared distances expand all ordered pairs with two constant
selector matrices.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc


def one_hot(indices, depth: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise dc.ShapeError(f"one_hot: index out of range for depth {depth}")
    out = np.zeros((idx.size, depth), dtype=np.float64)
    out[np.arange(idx.size), idx] = 1.0
    return out


def gather_rows(emb, indices, depth: int) -> dc.Tensor:
    """Differentiable row lookup: one-hot selector times the table."""
    return dc.matmul(dc.Tensor(one_hot(indices, depth)), emb)


def normalize_rows(x) -> dc.Tensor:
    """Project rows onto the unit sphere: x * exp(-0.5 * log(|x|^2))."""
    x = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
    n2 = dc.l2norm_sq(x, axis=1, keepdims=True)
    if np.any(n2.data <= 0.0):
        raise dc.NonFiniteError("normalize_rows: zero-norm row cannot be normalized")
    inv = dc.exp(dc.scale(dc.log(n2), -0.5))
    return dc.mul(x, inv)


def ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays of all n*(n-1) ordered pairs (a, b), a != b."""
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = a != b
    return a[keep], b[keep]


def pairwise_sq_dists(x: dc.Tensor) -> dc.Tensor:
    """Squared distances over all ordered distinct row pairs, shape (n*(n-1),)."""
    n = x.shape[0]
    if n < 2:
        raise dc.ShapeError(f"pairwise_sq_dists: need at least 2 rows, got {n}")
    ia, ib = ordered_pairs(n)
    left = dc.matmul(dc.Tensor(one_hot(ia, n)), x)
    right = dc.matmul(dc.Tensor(one_hot(ib, n)), x)
    return dc.l2norm_sq(dc.sub(left, right), axis=1)


def logdet_covariance(points: np.ndarray, eps_scale: float = 1e-6) -> float:
    """Log-determinant of the (population) covariance of the rows.

    The covariance gets a trace-scaled ridge so near-singular clouds
    still yield a finite, comparable value; a fully degenerate cloud
    (zero trace) reports -inf.
    """
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    cov = (x.T @ x) / x.shape[0]
    tr = float(np.trace(cov))
    if tr <= 0.0:
        return float("-inf")
    dim = cov.shape[0]
    cov = cov + (eps_scale * tr / dim) * np.eye(dim)
    _, logdet = np.linalg.slogdet(cov)
    return float(logdet)
