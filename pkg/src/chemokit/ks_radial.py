"""Radially symmetric steppers on the offset grid ``r_j = -dr/2 + j dr``.

Unknowns are ``j = 1..nr``; index 0 is the ghost mirroring index 1.  Interior
faces carry the geometric weight ``sqrt(r_j r_{j+1})``; the face at r = 0
(between the ghost and j = 1) and the outer face at r = L carry zero flux.
Every row is multiplied through by ``r_j``; the c systems are then symmetric.
"""

from __future__ import annotations

import numpy as np

from .grid import RadialGrid, apply_ghost
from .ks_core import EXP_LIMIT, SchemeConfig, SchemeInvariantError, SimState
from .linalg import BlowUpError, TridiagonalSystem, tridiag_solve


def face_weights(grid: RadialGrid) -> np.ndarray:
    """``sqrt(r_j r_{j+1}) / dr^2`` for the interior faces ``j = 1..nr-1``."""
    r = grid.r[1:]
    return np.sqrt(r[:-1] * r[1:]) / grid.dr**2


def radial_laplacian_system(grid: RadialGrid, shift: np.ndarray | float, rhs: np.ndarray) -> TridiagonalSystem:
    """r-weighted ``shift - (r c')'`` on the interior nodes (symmetric)."""
    a = face_weights(grid)
    diag = np.zeros(grid.nr) + shift
    diag[:-1] += a
    diag[1:] += a
    return TridiagonalSystem(-a, diag, -a.copy(), np.asarray(rhs, dtype=float))


def r_weighted_mean(grid: RadialGrid, f: np.ndarray) -> float:
    r = grid.r[1:]
    return float(np.sum(r * f[1:]) / np.sum(r))


def _radial_elliptic(grid: RadialGrid, source: np.ndarray) -> np.ndarray:
    """``-(1/r)(r c')' = source - <source>_r`` with ``<c>_r = 0``."""
    r = grid.r[1:]
    b = r * (source[1:] - r_weighted_mean(grid, source))
    full = radial_laplacian_system(grid, 0.0, b)
    # constants span the null space: pin c_nr = 0 and drop its (implied) row
    reduced = TridiagonalSystem(full.sub[:-1], full.diag[:-1], full.sup[:-1], b[:-1])
    c_inner = np.append(tridiag_solve(reduced), 0.0)
    c_inner -= np.sum(r * c_inner) / np.sum(r)
    return apply_ghost(np.concatenate(([0.0], c_inner)))


def radial_chemo_update(state: SimState, config: SchemeConfig) -> np.ndarray:
    grid = state.grid
    if config.epsilon == 0.0:
        return _radial_elliptic(grid, state.rho)
    r = grid.r[1:]
    k = config.epsilon / config.dt
    sys = radial_laplacian_system(grid, k * r, r * (k * state.conc[1:] + state.rho[1:]))
    return apply_ghost(np.concatenate(([0.0], tridiag_solve(sys))))


def radial_screened_poisson(grid: RadialGrid, rho: np.ndarray) -> np.ndarray:
    """Solve ``(1/r)(r c')' - c + rho = 0`` (used to initialise c)."""
    r = grid.r[1:]
    sys = radial_laplacian_system(grid, r, r * np.asarray(rho, dtype=float)[1:])
    return apply_ghost(np.concatenate(([0.0], tridiag_solve(sys))))


def _face_ratio(lw: np.ndarray, face: np.ndarray, sign: float) -> np.ndarray:
    d = np.where(face, 0.5 * sign * (lw[1:] - lw[:-1]), 0.0)
    if np.any(d > EXP_LIMIT):
        raise BlowUpError(f"neighbouring potential jump {2 * d.max():.6g} too large to exponentiate")
    return np.where(face, np.exp(d), 0.0)


def radial_symmetrized_solve(
    grid: RadialGrid,
    rhs_rho: np.ndarray,
    logw: np.ndarray,
    dt: float,
    diag_coef: float = 1.0,
    support: np.ndarray | None = None,
) -> np.ndarray:
    """Solve ``diag_coef rho - dt (1/r) d_r(r w d_r(rho / w)) = rhs`` on j >= 1.

    The face flux ``sqrt(r_j r_{j+1} w_j w_{j+1}) (rho_{j+1}/w_{j+1} - rho_j/w_j)``
    only needs the neighbour ratios ``sqrt(w_{j+1}/w_j)``, so the system is posed
    directly in rho: a column-diagonally-dominant M-matrix whose columns sum to
    ``diag_coef r_j``.  That gives conservation of ``sum r_j rho_j`` and a
    nonnegative inverse without ever forming ``w`` itself.
    """
    r = grid.r[1:]
    lw = np.asarray(logw, dtype=float)[1:]
    sup_mask = np.ones(grid.nr, dtype=bool) if support is None else np.asarray(support)[1:]
    if not sup_mask.any():
        return np.zeros(grid.size)
    lw = np.where(sup_mask, lw, 0.0)
    if not np.all(np.isfinite(lw)):
        raise BlowUpError("non-finite chemical potential")

    face = sup_mask[:-1] & sup_mask[1:]
    a = dt * face_weights(grid)
    up = _face_ratio(lw, face, 1.0)  # sqrt(w_{j+1} / w_j)
    down = _face_ratio(lw, face, -1.0)  # sqrt(w_j / w_{j+1})
    diag = diag_coef * r
    diag[:-1] += a * up
    diag[1:] += a * down
    sup = -a * down
    sub = -a * up
    b = r * np.asarray(rhs_rho, dtype=float)[1:]
    rho = tridiag_solve(TridiagonalSystem(sub, diag, sup, b))
    rho = np.where(sup_mask, rho, 0.0)
    return apply_ghost(np.concatenate(([0.0], rho)))


def radial_density_update(state: SimState, conc_next: np.ndarray, config: SchemeConfig) -> np.ndarray:
    """m = 1 density step with ``M = exp(c^{n+1})``."""
    rho = radial_symmetrized_solve(state.grid, state.rho, conc_next, config.dt)
    _check(rho, state.rho, config)
    return rho


def degenerate_log_mobility(rho: np.ndarray, conc: np.ndarray, m: float) -> np.ndarray:
    """``log(rho M)`` with ``M = exp(c - m/(m-1) rho^{m-1})``; ``-inf`` where rho = 0."""
    with np.errstate(divide="ignore"):
        return np.log(rho) + conc - (m / (m - 1.0)) * rho ** (m - 1.0)


def _check(rho_new, rho_old, config):
    top = float(np.max(np.abs(rho_old)))
    low = float(np.min(rho_new))
    if low < -config.positivity_slack * top:
        raise SchemeInvariantError(f"radial positivity violated: min rho = {low:.3e}")


def step_radial(state: SimState, config: SchemeConfig, m: float = 1.0) -> SimState:
    """One radial step: c-solve, then the positivity-preserving density solve.

    For ``m > 1`` the face mobility is the geometric mean of ``rho^n M^n`` with
    ``M^n = exp(c^n - m/(m-1) (rho^n)^{m-1})``; cells with ``rho^n = 0`` stay 0.
    """
    if m < 1:
        raise ValueError(f"diffusion exponent must be >= 1, got {m}")
    grid = state.grid
    conc = radial_chemo_update(state, config)
    if m == 1:
        rho = radial_symmetrized_solve(grid, state.rho, conc, config.dt)
    else:
        support = state.rho > 0
        logw = np.where(support, degenerate_log_mobility(np.where(support, state.rho, 1.0), state.conc, m), 0.0)
        rho = radial_symmetrized_solve(grid, state.rho, logw, config.dt, support=support)
    _check(rho, state.rho, config)
    return SimState(
        grid=grid,
        rho=rho,
        conc=conc,
        time=state.time + config.dt,
        step=state.step + 1,
        rho_prev=state.rho,
        conc_prev=state.conc,
    )
