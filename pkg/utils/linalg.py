"""
Dense linear-algebra helpers shared by the solver and the spectral layer.
"""

from typing import Tuple

import numpy as np
import structlog
from scipy import linalg

from main.exceptions import ArgumentError, NumericalError

logger = structlog.get_logger(__name__)

JITTER_SCALE = 1e-12
JITTER_ESCALATIONS = 3


def symmetric_solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``matrix @ x = rhs`` for a symmetric positive-definite matrix.

    A Cholesky factorization is attempted first. On failure a diagonal jitter
    of ``1e-12 * trace / dim`` is added, then escalated by a factor of ten up
    to three times (``1000 x`` the initial jitter at most) before giving up.

    Args:
        matrix: Square symmetric matrix.
        rhs: Right-hand side, vector or matrix with matching leading dimension.

    Returns:
        The solution with the shape of ``rhs``.

    Raises:
        NumericalError: If every factorization attempt fails.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ArgumentError(f"expected a square matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)) or not np.all(np.isfinite(rhs)):
        raise ArgumentError("system contains non-finite entries")

    dim = matrix.shape[0]
    jitter = JITTER_SCALE * max(float(np.trace(matrix)), 0.0) / max(dim, 1)
    # no jitter, then jitter, 10 jitter, 100 jitter and 1000 jitter
    levels = [0.0] + ([jitter * 10 ** k for k in range(JITTER_ESCALATIONS + 1)] if jitter > 0.0 else [])
    for current in levels:
        attempt = matrix if current == 0.0 else matrix + current * np.eye(dim)
        try:
            factor = linalg.cho_factor(attempt, lower=True, check_finite=False)
            return linalg.cho_solve(factor, rhs, check_finite=False)
        except linalg.LinAlgError:
            logger.warning("cholesky_failed", dim=dim, jitter=current)
    raise NumericalError(f"Cholesky factorization failed for a {dim}x{dim} system after jitter escalation")


def symmetric_eigh(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order."""
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("matrix contains non-finite entries")
    symmetric = 0.5 * (matrix + matrix.T)
    try:
        values, vectors = linalg.eigh(symmetric, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    return values[::-1], vectors[:, ::-1]


def min_eigenvalue(matrix: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("matrix contains non-finite entries")
    symmetric = 0.5 * (matrix + matrix.T)
    return float(linalg.eigvalsh(symmetric, subset_by_index=[0, 0], check_finite=False)[0])


def block_vector(values: np.ndarray) -> np.ndarray:
    """Flatten an ``(N, m)`` array of node values into point-major order."""
    return np.ascontiguousarray(values, dtype=float).reshape(-1)
