"""Sinkhorn-Knopp balancing of similarity matrices into soft cluster assignments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericUnderflow(ArithmeticError):
    pass


class NotSquare(ValueError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    n_iters: int = 3
    tol: float = 1e-6


@dataclass
class AssignmentMatrix:
    """Nonnegative N x K soft assignments; rows sum to one."""

    q: np.ndarray
    iterations: int = 0
    converged: bool = False

    @property
    def n_samples(self) -> int:
        return self.q.shape[0]

    @property
    def n_prototypes(self) -> int:
        return self.q.shape[1]


def marginal_residuals(q: np.ndarray) -> tuple[float, float]:
    """(row residual, column residual) against targets 1 and N/K."""
    n, k = q.shape
    return (float(np.abs(q.sum(axis=1) - 1.0).max()),
            float(np.abs(q.sum(axis=0) - n / k).max()))


def sinkhorn_normalize(sims, epsilon: float = 0.05, n_iters: int = 3,
                       tol: float = 1e-6) -> AssignmentMatrix:
    """Balance ``exp(sims / epsilon)`` so rows sum to 1 and columns to N/K.

    Each iteration scales columns then rows. Iteration stops early once both
    marginal residuals drop below ``tol``. The returned rows always sum to one.
    """
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"sims must be a matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise ValueError("sims contains non-finite values")
    if epsilon <= 0 or n_iters < 1:
        raise ValueError("need epsilon > 0 and n_iters >= 1")
    z = s / epsilon
    q = np.exp(z - z.max())
    if not q.any(axis=1).all() or not q.any(axis=0).all():
        raise NumericUnderflow(f"exp(sims/{epsilon}) underflows a whole row or column; raise epsilon")
    n, k = q.shape
    col_target = n / k
    converged = False
    it = 0
    for it in range(1, n_iters + 1):
        q *= col_target / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
        row_res, col_res = marginal_residuals(q)
        if row_res < tol and col_res < tol:
            converged = True
            break
    q /= q.sum(axis=1, keepdims=True)
    return AssignmentMatrix(q, it, converged)


def mix_with_identity(q, lam: float) -> AssignmentMatrix:
    """``lam * q + (1 - lam) * I`` for square assignments."""
    arr = q.q if isinstance(q, AssignmentMatrix) else np.asarray(q, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise NotSquare(f"assignments must be square, got {arr.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return AssignmentMatrix(lam * arr + (1.0 - lam) * np.eye(arr.shape[0]))
