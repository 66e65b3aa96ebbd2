"""Linear solvers for the implicit steps.

2D systems are solved matrix-free by (optionally Jacobi-preconditioned)
conjugate gradients; radial systems are tridiagonal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

_MAX_RESTARTS = 3


class SolverError(RuntimeError):
    """A linear or nonlinear solve failed.  ``residual`` holds the last residual norm."""

    def __init__(self, message: str, residual: float = float("nan"), history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history or [])


class BlowUpError(SolverError):
    """The chemical potential range exceeds what double precision can exponentiate."""


@dataclass
class LinearOperator:
    apply: Callable[[np.ndarray], np.ndarray]
    size: int
    diagonal: np.ndarray | None = None

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.apply(u)


@dataclass
class TridiagonalSystem:
    """``sub[k]`` couples row k+1 to column k, ``sup[k]`` row k to column k+1."""

    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        n = len(self.diag)
        if len(self.sub) != n - 1 or len(self.sup) != n - 1 or len(self.rhs) != n:
            raise ValueError("inconsistent tridiagonal system lengths")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        y[1:] += self.sub * x[:-1]
        y[:-1] += self.sup * x[1:]
        return y

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.sub, -1) + np.diag(self.sup, 1)


def cg_solve(
    op: LinearOperator | Callable,
    rhs: np.ndarray,
    tol: float = 1e-10,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
    jacobi: bool = False,
) -> tuple[np.ndarray, int]:
    """Conjugate gradients for a symmetric positive definite operator.

    Works on arrays of any shape; inner products are plain sums.  Returns the
    solution and the iteration count.  Stops once ``||b - A x|| <= tol ||b||``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    apply = op.apply if isinstance(op, LinearOperator) else op
    b = np.asarray(rhs, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = 10 * n
    bnorm = np.sqrt(np.vdot(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    if not np.isfinite(bnorm):
        raise SolverError("non-finite right-hand side")

    inv_diag = None
    if jacobi:
        if not isinstance(op, LinearOperator) or op.diagonal is None:
            raise ValueError("Jacobi preconditioning needs an operator with a diagonal")
        inv_diag = 1.0 / op.diagonal

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    target = tol * bnorm
    total = 0
    # the recursively updated residual can drift from b - A x on badly scaled
    # systems; restarting from the current iterate recovers it
    for _ in range(_MAX_RESTARTS + 1):
        r = b - apply(x) if (x0 is not None or total) else b.copy()
        if np.sqrt(np.vdot(r, r)) <= max(target, 1e-13 * bnorm) and total:
            return x, total
        x, it = _cg_iterate(apply, x, r, target, max_iter - total, inv_diag, bnorm)
        total += it
        res = b - apply(x)
        true_r = np.sqrt(np.vdot(res, res))
        if true_r <= max(10 * target, 1e-13 * bnorm):
            return x, total
        logger.debug("CG restart: true residual %.3e", true_r / bnorm)
    raise SolverError(f"CG residual drifted: true residual {true_r / bnorm:.3e}", residual=true_r / bnorm)


def _cg_iterate(apply, x, r, target, max_iter, inv_diag, bnorm):
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = np.vdot(r, z)
    rnorm = np.sqrt(np.vdot(r, r))
    it = 0
    while rnorm > target:
        if it >= max_iter:
            raise SolverError(
                f"CG did not converge in {it} iterations (residual {rnorm / bnorm:.3e})",
                residual=rnorm / bnorm,
            )
        ap = apply(p)
        pap = np.vdot(p, ap)
        if not np.isfinite(pap):
            raise SolverError("NaN encountered in CG", residual=rnorm / bnorm)
        if pap <= 0:
            raise SolverError("operator is not positive definite", residual=rnorm / bnorm)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        rnorm = np.sqrt(np.vdot(r, r))
        z = r * inv_diag if inv_diag is not None else r
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it


def tridiag_solve(sys: TridiagonalSystem) -> np.ndarray:
    """Direct solve of a tridiagonal system (banded LU)."""
    n = len(sys.diag)
    ab = np.zeros((3, n))
    ab[0, 1:] = sys.sup
    ab[1, :] = sys.diag
    ab[2, :-1] = sys.sub
    try:
        x = scipy.linalg.solve_banded((1, 1), ab, np.asarray(sys.rhs, dtype=float), check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"tridiagonal solve failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("tridiagonal solve produced non-finite values")
    return x


def dense_matrix(op: LinearOperator | Callable, shape: tuple[int, ...]) -> np.ndarray:
    """Assemble an operator column by column.  Test helper; O(n^2) memory."""
    apply = op.apply if isinstance(op, LinearOperator) else op
    n = int(np.prod(shape))
    A = np.empty((n, n))
    e = np.zeros(n)
    for k in range(n):
        e[k] = 1.0
        A[:, k] = apply(e.reshape(shape)).ravel()
        e[k] = 0.0
    return A


def dense_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense LU solve, used as an independent oracle."""
    return scipy.linalg.lu_solve(scipy.linalg.lu_factor(A), b)
