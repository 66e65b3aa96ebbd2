"""Subcritical (m > 1) cartesian steppers.

Two schemes share the same c-solve:

* the semi-implicit scheme ``rho' - rho = dt div(rho M grad(rho' / (rho M)))``
  with ``M = exp(c - m/(m-1) rho^{m-1})`` lagged at step n.  It is linear,
  conservative and positivity preserving, but the porous-medium part of the
  mobility is explicit: it is stable for
  ``dt <= 2 / ((m rho_max^{m-1} - 2) * 4 (1/dx^2 + 1/dy^2))``
  (see :func:`semi_implicit_stable_dt`).  The support of rho never grows.
* the fully implicit scheme ``rho' - rho = dt (Lap rho'^m - div(rho' grad c'))``
  solved by damped Newton; conservative, not positivity preserving.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .grid import Grid2D, RadialGrid, laplacian
from .ks_core import (
    EXP_LIMIT,
    SchemeConfig,
    SimState,
    _check_positive,
    _chemo_solve,
    symmetrized_density_solve,
)
from .linalg import BlowUpError, SolverError

logger = logging.getLogger(__name__)


@dataclass
class DegenerateConfig(SchemeConfig):
    m: float = 2.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    mobility_floor: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if not self.m > 1:
            raise ValueError(f"degenerate schemes need m > 1, got {self.m}")
        if self.mobility_floor < 0:
            raise ValueError("mobility_floor must be >= 0")


@dataclass
class NewtonReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    clamped: bool = False


def degenerate_mobility(rho: np.ndarray, conc: np.ndarray, m: float) -> np.ndarray:
    """``M = exp(c - m/(m-1) rho^{m-1})``; equals ``exp(c)`` where rho = 0."""
    if np.any(rho < 0):
        raise ValueError("degenerate mobility needs rho >= 0")
    expo = conc - (m / (m - 1.0)) * rho ** (m - 1.0)
    top = float(np.max(expo))
    if top > EXP_LIMIT:
        raise BlowUpError(f"mobility overflows: max exponent {top:.6g}")
    return np.exp(expo)


def degenerate_log_weight(rho: np.ndarray, conc: np.ndarray, m: float) -> tuple[np.ndarray, np.ndarray]:
    """``(log(rho M), support)``; the log weight is 0 off the support."""
    support = rho > 0
    safe = np.where(support, rho, 1.0)
    logw = np.log(safe) + conc - (m / (m - 1.0)) * safe ** (m - 1.0)
    return np.where(support, logw, 0.0), support


def semi_implicit_stable_dt(grid: Grid2D | RadialGrid, m: float, rho_max: float) -> float:
    """Largest dt for which the lagged porous-medium term is linearly stable.

    Linearising about a constant state ``rho`` gives the amplification factor
    ``(1 - (m rho^{m-1} - 1) L) / (1 + L)`` with ``L = dt * |symbol of Lap_h|``,
    whose largest value is ``4 (1/dx^2 + 1/dy^2)`` (``4 / dr^2`` radially).
    """
    stiff = m * rho_max ** (m - 1.0) - 2.0
    if stiff <= 0:
        return float("inf")
    if isinstance(grid, RadialGrid):
        symbol = 4.0 / grid.dr**2
    else:
        symbol = 4.0 * (1.0 / grid.dx**2 + 1.0 / grid.dy**2)
    return 2.0 / (stiff * symbol)


def step_subcritical_semi_implicit(state: SimState, config: DegenerateConfig) -> SimState:
    conc, it_c = _chemo_solve(state, config)
    logw, support = degenerate_log_weight(state.rho, state.conc, config.m)
    rho, it_r = symmetrized_density_solve(state.grid, state.rho, logw, config.dt, config, support=support)
    rho = np.where(support, rho, 0.0)
    _check_positive(rho, state.rho, config)
    return SimState(
        grid=state.grid,
        rho=rho,
        conc=conc,
        time=state.time + config.dt,
        step=state.step + 1,
        rho_prev=state.rho,
        conc_prev=state.conc,
        cg_iterations=it_c + it_r,
    )


# -- fully implicit Newton scheme -------------------------------------------------


def _index_maps(grid: Grid2D):
    idx = np.arange(grid.size).reshape(grid.shape)
    east = np.roll(idx, -1, axis=1)
    north = np.roll(idx, -1, axis=0)
    return idx.ravel(), east.ravel(), north.ravel()


def _face_matrix(grid: Grid2D, face_vals) -> scipy.sparse.csr_matrix:
    """Assemble ``sum over faces P|Q`` of the 2x2 blocks ``face_vals(P, Q) -> (pp, pq, qp, qq)``."""
    p, e, n = _index_maps(grid)
    rows, cols, vals = [], [], []
    for q, h in ((e, grid.dx), (n, grid.dy)):
        pp, pq, qp, qq = face_vals(p, q, h)
        rows += [p, p, q, q]
        cols += [p, q, p, q]
        vals += [pp, pq, qp, qq]
    return scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid.size, grid.size)
    ).tocsr()


def periodic_laplacian_matrix(grid: Grid2D) -> scipy.sparse.csr_matrix:
    def block(p, q, h):
        a = np.full(p.size, 1.0 / h**2)
        return -a, a, a, -a

    return _face_matrix(grid, block)


def advection_matrix(grid: Grid2D, conc: np.ndarray) -> scipy.sparse.csr_matrix:
    """Sparse ``A`` with ``A rho = div_h(rho grad_h c)`` in conservative form.

    Face fluxes use the centred face density ``(rho_P + rho_Q) / 2`` and the
    one-sided face gradient of c; every column sums to zero.
    """
    c = conc.ravel()

    def block(p, q, h):
        k = (c[q] - c[p]) / (2.0 * h * h)
        return k, k, -k, -k

    return _face_matrix(grid, block)


def newton_residual(grid: Grid2D, rho: np.ndarray, rho_old: np.ndarray, conc: np.ndarray, m: float, dt: float,
                    adv=None) -> np.ndarray:
    """``F(rho) = rho - rho^n - dt (Lap_h rho_+^m - div_h(rho grad_h c))``."""
    if adv is None:
        adv = advection_matrix(grid, conc)
    pm = np.maximum(rho, 0.0) ** m
    return rho - rho_old - dt * (laplacian(grid, pm) - (adv @ rho.ravel()).reshape(grid.shape))


def newton_solve(grid: Grid2D, rho_old: np.ndarray, conc: np.ndarray, config: DegenerateConfig):
    """Damped Newton for the implicit step.  Returns ``(rho, NewtonReport)``."""
    m, dt = config.m, config.dt
    lap = periodic_laplacian_matrix(grid)
    adv = advection_matrix(grid, conc)
    rho = np.maximum(rho_old, config.mobility_floor)
    report = NewtonReport()
    F = newton_residual(grid, rho, rho_old, conc, m, dt, adv)
    fnorm = float(np.max(np.abs(F)))
    report.residuals.append(fnorm)
    eye = scipy.sparse.identity(grid.size, format="csr")
    while fnorm > config.newton_tol:
        if report.iterations >= config.newton_max_iter:
            raise SolverError(
                f"Newton did not converge in {config.newton_max_iter} iterations (|F| = {fnorm:.3e})",
                residual=fnorm,
                history=report.residuals,
            )
        if np.any(rho < 0):
            report.clamped = True
        dpm = m * np.maximum(rho, 0.0) ** (m - 1.0)
        J = eye - dt * (lap @ scipy.sparse.diags(dpm.ravel()) - adv)
        delta = scipy.sparse.linalg.spsolve(J.tocsc(), -F.ravel()).reshape(grid.shape)
        if not np.all(np.isfinite(delta)):
            raise SolverError("Newton update is not finite", residual=fnorm, history=report.residuals)
        lam = 1.0
        for _ in range(31):
            trial = rho + lam * delta
            F_trial = newton_residual(grid, trial, rho_old, conc, m, dt, adv)
            tnorm = float(np.max(np.abs(F_trial)))
            if tnorm < fnorm or tnorm <= config.newton_tol:
                break
            lam *= 0.5
        else:
            raise SolverError("Newton line search failed", residual=fnorm, history=report.residuals)
        rho, F, fnorm = trial, F_trial, tnorm
        report.iterations += 1
        report.residuals.append(fnorm)
    if report.clamped:
        logger.info("Newton iterate went negative; rho^m evaluated with a clamped base")
    return rho, report


def step_subcritical_newton(state: SimState, config: DegenerateConfig) -> SimState:
    conc, it_c = _chemo_solve(state, config)
    rho, report = newton_solve(state.grid, state.rho, conc, config)
    low = float(rho.min())
    if low < 0:
        logger.info("implicit degenerate step %d: min rho = %.3e", state.step + 1, low)
    return SimState(
        grid=state.grid,
        rho=rho,
        conc=conc,
        time=state.time + config.dt,
        step=state.step + 1,
        rho_prev=state.rho,
        conc_prev=state.conc,
        cg_iterations=it_c,
        newton=report,
    )
