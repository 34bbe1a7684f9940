"""Dense symmetric positive (semi)definite matrix primitives.

Every routine works through a Cholesky factor. Explicit inverses are never
formed here.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-10


class NotPsd(ValueError):
    """Raised when a Cholesky factorization fails even after the jitter retry."""


def as_psd(A, check: bool = False) -> np.ndarray:
    """Return a symmetrized float copy of a square matrix.

    With ``check=True`` the symmetry and eigenvalue invariants are verified
    before symmetrizing and ``NotPsd`` is raised on violation.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPsd("matrix has non-finite entries")
    if check:
        scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
        if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
            raise NotPsd("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    if check:
        eig = np.linalg.eigvalsh(A)
        if eig[0] < -PSD_RTOL * max(abs(eig[0]), abs(eig[-1])):
            raise NotPsd(f"matrix has a negative eigenvalue {eig[0]:.3e}")
    return A


def default_jitter(A: np.ndarray) -> float:
    """Retry jitter: 1e-12 times the mean diagonal entry."""
    d = A.shape[0]
    return 1e-12 * max(float(np.trace(A)), 0.0) / d


def chol_factor(A, jitter: float = 0.0, retry: bool = True) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == A + jitter * I``.

    On failure the factorization is retried once with ``default_jitter(A)``
    added on top of ``jitter``.
    """
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    A = as_psd(A)
    eye = np.eye(A.shape[0])
    try:
        return np.linalg.cholesky(A + jitter * eye)
    except np.linalg.LinAlgError:
        if not retry:
            raise NotPsd("Cholesky factorization failed") from None
    extra = default_jitter(A)
    try:
        return np.linalg.cholesky(A + (jitter + extra) * eye)
    except np.linalg.LinAlgError:
        raise NotPsd(f"Cholesky factorization failed after jitter {jitter + extra:.3e}") from None


def quad_forms_from_factor(L: np.ndarray, X) -> np.ndarray:
    """Row-wise ``x^T (L L^T)^{-1} x`` for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = solve_triangular(L, X.T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Y, Y)


def quad_form(A, jitter: float, x) -> float:
    """``x^T (A + jitter I)^{-1} x`` through one factorization."""
    A = np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape != (A.shape[0],):
        raise ValueError(f"vector of shape {x.shape} does not match a {A.shape[0]}x{A.shape[0]} matrix")
    return float(quad_forms_from_factor(chol_factor(A, jitter), x[None, :])[0])


def quad_forms(A, jitter: float, X) -> np.ndarray:
    """Vectorized ``quad_form`` over the rows of ``X``."""
    A = np.asarray(A, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != A.shape[0]:
        raise ValueError(f"vectors of dimension {X.shape[1]} do not match a {A.shape[0]}x{A.shape[0]} matrix")
    return quad_forms_from_factor(chol_factor(A, jitter), X)


def log_det(A, jitter: float = 0.0) -> float:
    """``ln det(A + jitter I)`` as twice the sum of log pivots."""
    L = chol_factor(A, jitter)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def psd_solve(A, b, jitter: float = 0.0) -> np.ndarray:
    """Solve ``(A + jitter I) y = b`` through the Cholesky factor."""
    L = chol_factor(A, jitter)
    return cho_solve((L, True), np.asarray(b, dtype=float), check_finite=False)


def psd_inverse(A, jitter: float = 0.0) -> np.ndarray:
    """Inverse of ``A + jitter I`` through the Cholesky factor, symmetrized."""
    A = np.asarray(A, dtype=float)
    inv = psd_solve(A, np.eye(A.shape[0]), jitter)
    return 0.5 * (inv + inv.T)


def eigen_bounds(A) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix."""
    eig = np.linalg.eigvalsh(as_psd(A))
    return float(eig[0]), float(eig[-1])
