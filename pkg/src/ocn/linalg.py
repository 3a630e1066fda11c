"""Dense-matrix substrate: norms, SVD, proximal operators, least squares.

All routines operate on 2-D float64 arrays in C (row-major) order.  The two
proximal operators here are the workhorses of the landmark factorization:
entrywise soft-thresholding (prox of the l1 norm) and singular-value
thresholding (prox of the nuclear norm).  Decompositions are delegated to
LAPACK through numpy, which is deterministic for a fixed input.
"""

from typing import NamedTuple

import numpy as np


class NumericalError(RuntimeError):
    """A dense decomposition or solve failed (non-convergence, singularity)."""


def as_matrix(a) -> np.ndarray:
    """Coerce input to a 2-D float64 C-order matrix with finite entries."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"matrix dimensions must be positive, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf entries")
    return m


class SvdResult(NamedTuple):
    """Thin SVD: ``u @ diag(s) @ v.T`` reconstructs the input.

    ``u`` is m x r, ``s`` holds the r singular values sorted non-increasing,
    ``v`` is n x r (right singular vectors as columns, not transposed).
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def frobenius_norm_sq(m) -> float:
    """Sum of squared entries."""
    m = as_matrix(m)
    return float(np.sum(m * m))


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    m = as_matrix(m)
    try:
        s = np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return float(s.sum())


def svd(m) -> SvdResult:
    """Thin SVD of a matrix.

    Raises NumericalError if the underlying iteration fails to converge.
    """
    m = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdResult(u=u, s=s, v=np.ascontiguousarray(vt.T))


def spectral_norm(m) -> float:
    """Largest singular value; 0.0 for an all-zero matrix."""
    m = as_matrix(m)
    if not m.any():
        return 0.0
    try:
        return float(np.linalg.norm(m, 2))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc


def soft_threshold(m, tau: float) -> np.ndarray:
    """Entrywise shrinkage sign(m) * max(|m| - tau, 0).

    Closed-form minimizer of ``tau*||X||_1 + 0.5*||X - M||_F^2``.
    """
    m = as_matrix(m)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return np.sign(m) * np.maximum(np.abs(m) - tau, 0.0)


def svt(m, tau: float) -> np.ndarray:
    """Singular-value thresholding: shrink each singular value by tau.

    Closed-form minimizer of ``tau*||X||_* + 0.5*||X - M||_F^2``.
    """
    m = as_matrix(m)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    u, s, v = svd(m)
    shrunk = s - tau
    keep = shrunk > 0.0
    if not keep.any():
        return np.zeros_like(m)
    return (u[:, keep] * shrunk[keep]) @ v[:, keep].T


def solve_least_squares(a, b, ridge: float = 0.0) -> np.ndarray:
    """Minimize ||b - x @ a||_F over x, via x = b a^T (a a^T + ridge*I)^-1.

    With ridge=0 a rank-deficient ``a`` raises NumericalError.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if ridge < 0:
        raise ValueError(f"ridge must be non-negative, got {ridge}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"shape mismatch: a is {a.shape}, b is {b.shape}")
    gram = a @ a.T
    if ridge > 0:
        gram[np.diag_indices_from(gram)] += ridge
    try:
        # Solve gram @ x.T = a @ b.T; gram is symmetric positive semidefinite.
        x_t = np.linalg.solve(gram, a @ b.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "normal matrix is singular (rank-deficient a with ridge=0)"
        ) from exc
    return np.ascontiguousarray(x_t.T)
