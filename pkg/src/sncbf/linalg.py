"""Small dense linear algebra helpers for the certificate machinery.

Everything here operates on plain float64 numpy arrays. The matrices involved
never exceed roughly (n + p + 1)^2 for the networks considered, so there is no
attempt at blocking or sparsity.
"""
from __future__ import annotations

import numpy as np

SYMMETRY_RTOL = 1e-9


class NotPositiveDefinite(Exception):
    """Raised when a Cholesky pivot is non-positive.

    Carries the index and value of the failing pivot so callers can report
    how far inside (or outside) the PD cone the matrix sits.
    """

    def __init__(self, pivot_index: int, pivot_value: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix is not positive definite (pivot {pivot_index} = {pivot_value:.6g})"
        )


class DimensionMismatch(Exception):
    pass


def _check_square_symmetric(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        raise DimensionMismatch("matrix is not symmetric within tolerance")
    return A


def cholesky(A: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T = A + jitter*I.

    Inputs are symmetrized as (A + A.T)/2 before factoring so that
    floating-point assembly noise cannot flip a PD verdict. Raises
    NotPositiveDefinite on the first non-positive pivot.
    """
    A = _check_square_symmetric(A)
    n = A.shape[0]
    M = 0.5 * (A + A.T)
    if jitter:
        M = M + jitter * np.eye(n)
    L = np.zeros_like(M)
    for j in range(n):
        pivot = M[j, j] - np.dot(L[j, :j], L[j, :j])
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise NotPositiveDefinite(j, float(pivot))
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1 :, j] = (M[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def log_det_pd(A: np.ndarray) -> float:
    """log det of a symmetric positive-definite matrix via Cholesky."""
    L = cholesky(A)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def min_cholesky_pivot(A: np.ndarray) -> float:
    """Smallest squared pivot encountered; negative or zero means not PD."""
    try:
        L = cholesky(A)
    except NotPositiveDefinite as exc:
        return exc.pivot_value
    d = np.diag(L)
    return float(np.min(d * d))


def symmetric_block_assemble(blocks, check_symmetry: bool = False) -> np.ndarray:
    """Concatenate a 2-D grid of matrices into one matrix.

    Row/column dimensions must be consistent across the grid. With
    check_symmetry=True the assembled result is verified to be exactly
    symmetric (no symmetrization is applied).
    """
    rows = []
    ncols_per_block = None
    for brow in blocks:
        mats = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in brow]
        heights = {m.shape[0] for m in mats}
        if len(heights) != 1:
            raise DimensionMismatch("inconsistent block heights within a row")
        widths = [m.shape[1] for m in mats]
        if ncols_per_block is None:
            ncols_per_block = widths
        elif widths != ncols_per_block:
            raise DimensionMismatch("inconsistent block widths across rows")
        rows.append(np.hstack(mats))
    out = np.vstack(rows)
    if out.shape[0] != out.shape[1]:
        raise DimensionMismatch(f"assembled matrix is not square: {out.shape}")
    if check_symmetry and not np.array_equal(out, out.T):
        raise DimensionMismatch("assembled matrix is not exactly symmetric")
    return out
