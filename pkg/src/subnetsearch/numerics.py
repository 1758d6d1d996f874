"""Dense SPD kernels used by importance scoring and reformation.

All solver math happens in float64 no matter what precision the model uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

__all__ = [
    "NotPositiveDefinite",
    "SpdFactor",
    "symmetrize",
    "spd_factor",
    "spd_solve",
    "default_damping",
    "damped_gram_inverse_diag",
]

SYMMETRY_TOL = 1e-10
DAMPING_FRACTION = 0.01


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""


@dataclass(frozen=True)
class SpdFactor:
    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve((self.lower, True), b, check_finite=False)

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + a.T)


def _checked_square(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(float(np.max(np.abs(a))), 1.0) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    return symmetrize(a)


def spd_factor(a: np.ndarray) -> SpdFactor:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises NotPositiveDefinite on a non-positive pivot.
    """
    a = _checked_square(a)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.isfinite(lower)) or np.any(np.diag(lower) <= 0):
        raise NotPositiveDefinite("non-positive pivot")
    return SpdFactor(lower)


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ y = b`` for symmetric positive-definite ``a``."""
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    factor = spd_factor(a)
    if b.shape[0] != factor.dim:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix is {factor.dim}x{factor.dim}")
    y = factor.solve(b)
    return y[:, 0] if squeeze else y


def default_damping(g: np.ndarray) -> float:
    """0.01 * mean(diag G), the usual layer-wise pruning damping."""
    g = np.asarray(g, dtype=np.float64)
    if g.size == 0:
        return 0.0
    return DAMPING_FRACTION * float(np.mean(np.diag(g)))


def damped_gram_inverse_diag(g: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """Diagonal of ``(2 G + lam I)^-1``.

    Computed from the Cholesky factor L of ``2G + lam I``: the inverse is
    ``L^-T L^-1`` so its diagonal is the column-wise squared norm of ``L^-1``.
    """
    if lam < 0:
        raise ValueError("damping must be non-negative")
    g = _checked_square(g)
    a = 2.0 * g + lam * np.eye(g.shape[0])
    factor = spd_factor(a)
    linv = sla.solve_triangular(
        factor.lower, np.eye(factor.dim), lower=True, check_finite=False
    )
    diag = np.einsum("ij,ij->j", linv, linv)
    if not np.all(diag > 0) or not np.all(np.isfinite(diag)):
        raise NotPositiveDefinite("inverse diagonal is not strictly positive")
    return diag
