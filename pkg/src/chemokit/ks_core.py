"""Critical (m = 1) Keller-Segel steppers on periodic cartesian grids.

The density update is written in the symmetric Fokker-Planck form
``div(M grad(rho / M))`` with ``M = exp(c)`` and solved for ``h = rho / sqrt(M)``,
which turns the implicit operator into a symmetric M-matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .grid import Grid2D, laplacian
from .linalg import BlowUpError, LinearOperator, SolverError, cg_solve

logger = logging.getLogger(__name__)

EXP_LIMIT = 700.0  # exp overflows just above 709
H_FORM_LIMIT = 300.0  # half-spread of log w beyond which rho / sqrt(w) risks overflow in CG


class SchemeInvariantError(RuntimeError):
    """A property guaranteed by the scheme was violated; indicates a bug."""


@dataclass
class SchemeConfig:
    epsilon: float = 0.0
    dt: float = 0.01
    order: str = "first"
    tol: float = 1e-10
    max_iter: int | None = None
    jacobi: bool = False
    mass_gauge: bool = True
    # relative negativity (w.r.t. max rho^n) tolerated before flagging a bug
    positivity_slack: float = 1e-8
    # the density solve is refined until the relative mass defect is below this
    mass_tol: float = 1e-13

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.order not in ("first", "bdf2"):
            raise ValueError(f"order must be 'first' or 'bdf2', got {self.order!r}")


@dataclass
class SimState:
    grid: Grid2D
    rho: np.ndarray
    conc: np.ndarray
    time: float = 0.0
    step: int = 0
    rho_prev: np.ndarray | None = None
    conc_prev: np.ndarray | None = None
    cg_iterations: int = 0
    newton: object | None = None

    def copy(self) -> "SimState":
        return replace(
            self,
            rho=self.rho.copy(),
            conc=self.conc.copy(),
            rho_prev=None if self.rho_prev is None else self.rho_prev.copy(),
            conc_prev=None if self.conc_prev is None else self.conc_prev.copy(),
        )


def mobility(conc: np.ndarray) -> np.ndarray:
    """``M = exp(c)``; refuses to overflow."""
    cmax = float(np.max(conc))
    if cmax > EXP_LIMIT:
        raise BlowUpError(f"exp(c) overflows: max c = {cmax:.6g} > {EXP_LIMIT}")
    return np.exp(conc)


# -- c equation -----------------------------------------------------------------


def screened_laplacian_operator(grid: Grid2D, shift: float, diffusivity: float = 1.0) -> LinearOperator:
    """``shift * I - diffusivity * Lap_h`` on the periodic grid.

    With ``shift == 0`` the mean projector ``u -> <u>`` is added, which lifts the
    constant null space and leaves the operator unchanged on mean-zero fields.
    """
    n = grid.size
    deflate = 1.0 / n if shift == 0.0 else 0.0
    diag = np.full(grid.shape, shift + deflate + diffusivity * (2.0 / grid.dx**2 + 2.0 / grid.dy**2))

    def apply(u):
        out = shift * u - diffusivity * laplacian(grid, u)
        if deflate:
            out += u.mean()
        return out

    return LinearOperator(apply, n, diag)


def solve_screened(grid: Grid2D, shift: float, rhs: np.ndarray, config: SchemeConfig, diffusivity: float = 1.0):
    """Solve ``(shift I - D Lap_h) c = rhs``.  With ``shift == 0`` the rhs mean is
    removed and the solution gauged to zero mean."""
    if shift == 0.0:
        rhs = rhs - rhs.mean()
    op = screened_laplacian_operator(grid, shift, diffusivity)
    c, it = cg_solve(op, rhs, tol=config.tol, max_iter=config.max_iter, jacobi=config.jacobi)
    if shift == 0.0 and config.mass_gauge:
        c -= c.mean()
    return c, it


def elliptic_chemo_solve(grid: Grid2D, rho: np.ndarray, config: SchemeConfig | None = None) -> np.ndarray:
    """Periodic ``-Lap_h c = rho - <rho>`` with ``<c> = 0``."""
    config = config or SchemeConfig()
    c, _ = solve_screened(grid, 0.0, rho, config)
    return c


def _chemo_solve(state: SimState, config: SchemeConfig):
    grid = state.grid
    if config.epsilon == 0.0:
        return solve_screened(grid, 0.0, state.rho, config)
    k = config.epsilon / config.dt
    return solve_screened(grid, k, k * state.conc + state.rho, config)


def chemo_update(state: SimState, config: SchemeConfig) -> np.ndarray:
    """First-order c step ``((eps/dt) I - Lap_h) c^{n+1} = (eps/dt) c^n + rho^n``."""
    if config.epsilon == 0.0:
        raise ValueError("chemo_update needs epsilon > 0; use elliptic_chemo_solve")
    return _chemo_solve(state, config)[0]


# -- symmetrized density solve ----------------------------------------------------

# (roll shift, axis) for the west, east, south, north neighbours
_NEIGHBOURS = ((1, 1), (-1, 1), (1, 0), (-1, 0))


def symmetrized_operator(
    grid: Grid2D,
    logw: np.ndarray,
    dt_eff: float,
    diag_coef: float = 1.0,
    support: np.ndarray | None = None,
) -> LinearOperator:
    """``diag_coef * I - dt_eff * S`` acting on ``h = rho / sqrt(w)``.

    ``S`` is the five-point discretisation of ``w^{-1/2} div(w grad(h w^{-1/2}))``
    with geometric-mean face weights ``sqrt(w_P w_Q)``.  Off-diagonal entries are
    ``-dt_eff / dx^2``; the diagonal carries ``sqrt(w_Q / w_P)``.  Faces touching a
    cell outside ``support`` carry no flux, and off-support rows are the identity.
    """
    if support is not None:
        logw = np.where(support, logw, 0.0)
    inv_h2 = {1: 1.0 / grid.dx**2, 0: 1.0 / grid.dy**2}
    diag = np.zeros(grid.shape)
    couplings = []
    for shift, axis in _NEIGHBOURS:
        ratio = np.exp(0.5 * (np.roll(logw, shift, axis) - logw))
        if support is None:
            face = None
        else:
            face = support & np.roll(support, shift, axis)
            ratio = np.where(face, ratio, 0.0)
        diag += ratio * inv_h2[axis]
        couplings.append((shift, axis, face, dt_eff * inv_h2[axis]))
    diag = diag_coef + dt_eff * diag
    if support is not None:
        diag = np.where(support, diag, 1.0)

    def apply(h):
        out = diag * h
        for shift, axis, face, coef in couplings:
            nb = np.roll(h, shift, axis)
            if face is not None:
                nb = np.where(face, nb, 0.0)
            out -= coef * nb
        return out

    return LinearOperator(apply, grid.size, diag)


def potential_spread(logw: np.ndarray, support: np.ndarray | None = None) -> float:
    vals = logw if support is None else logw[support]
    if vals.size == 0:
        return 0.0
    spread = float(np.max(vals) - np.min(vals))
    if not np.isfinite(spread):
        raise BlowUpError("non-finite chemical potential")
    return spread


def symmetrized_density_solve(
    grid: Grid2D,
    rhs_rho: np.ndarray,
    logw: np.ndarray,
    dt_eff: float,
    config: SchemeConfig,
    diag_coef: float = 1.0,
    support: np.ndarray | None = None,
):
    """Solve ``diag_coef rho' - dt_eff div(w grad(rho'/w)) = rhs_rho``.

    The update is invariant under ``w -> k w``, so ``sqrt(w)`` is formed relative
    to its maximum.  When the spread of ``log w`` is too wide for that (degenerate
    mobilities, extreme aggregation), the same discretisation is solved in rho
    variables, which only needs neighbour ratios, with a sparse direct solver.
    Returns ``(rho', iterations)``; the direct path reports 0 iterations.
    """
    if support is not None and not support.any():
        return np.zeros(grid.shape), 0
    if 0.5 * potential_spread(logw, support) > H_FORM_LIMIT:
        return density_form_solve(grid, rhs_rho, logw, dt_eff, diag_coef, support), 0
    vals = logw if support is None else logw[support]
    scale = np.exp(0.5 * (logw - np.max(vals)))
    if support is not None:
        scale = np.where(support, scale, 0.0)
    op = symmetrized_operator(grid, logw, dt_eff, diag_coef, support)
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(scale > 0, rhs_rho / scale, 0.0)
    try:
        h, it = cg_solve(op, b, tol=config.tol, max_iter=config.max_iter, jacobi=config.jacobi)
        h, extra = _refine_mass(op, b, h, scale, rhs_rho, diag_coef, support, config)
    except SolverError as exc:
        logger.debug("h-form solve failed (%s); using the rho-form direct solve", exc)
        return density_form_solve(grid, rhs_rho, logw, dt_eff, diag_coef, support), 0
    rho = h * scale
    # CG's relative tolerance is measured on h, so on badly scaled systems the
    # cells with small sqrt(w) can come back with visible undershoots
    top = float(np.max(np.abs(rhs_rho)))
    if rho.size and float(rho.min()) < -config.positivity_slack * top:
        logger.debug("h-form undershoot %.3e; using the rho-form direct solve", float(rho.min()))
        return density_form_solve(grid, rhs_rho, logw, dt_eff, diag_coef, support), it + extra
    return rho, it + extra


def _mass_defect(rho, rhs_rho, diag_coef, support):
    target = rhs_rho if support is None else np.where(support, rhs_rho, 0.0)
    ref = float(np.sum(np.abs(target)))
    if ref == 0.0:
        return 0.0
    return abs(float(np.sum(rho)) - float(np.sum(target)) / diag_coef) * diag_coef / ref


def _refine_mass(op, b, h, scale, rhs_rho, diag_coef, support, config):
    """Continue CG from ``h`` while the mass defect exceeds ``config.mass_tol``.

    The exact solution conserves mass to rounding; the defect is the sum of the
    CG residual, so a relative residual of 1e-10 can leak about that much mass
    per step.  Tightening is skipped silently if the solver cannot go further.
    """
    defect = _mass_defect(h * scale, rhs_rho, diag_coef, support)
    if defect <= config.mass_tol:
        return h, 0
    tol = max(config.tol * config.mass_tol / defect * 0.1, 1e-15)
    try:
        h2, it = cg_solve(op, b, tol=tol, max_iter=config.max_iter, x0=h, jacobi=config.jacobi)
    except SolverError as exc:
        logger.debug("mass refinement stopped: %s", exc)
        return h, 0
    return h2, it


def density_form_matrix(
    grid: Grid2D,
    logw: np.ndarray,
    dt_eff: float,
    diag_coef: float = 1.0,
    support: np.ndarray | None = None,
) -> scipy.sparse.csr_matrix:
    """Sparse ``diag_coef I - dt_eff div(w grad(./w))`` acting on rho.

    Column sums equal ``diag_coef`` (mass), off-diagonals are nonpositive.
    """
    if support is not None:
        logw = np.where(support, logw, 0.0)
    idx = np.arange(grid.size).reshape(grid.shape)
    rows, cols, vals = [], [], []
    diag = np.full(grid.shape, float(diag_coef))
    for shift, axis in _NEIGHBOURS:
        coef = dt_eff / (grid.dx**2 if axis == 1 else grid.dy**2)
        nb_log = np.roll(logw, shift, axis)
        half = 0.5 * (nb_log - logw)
        face = np.ones(grid.shape, dtype=bool) if support is None else support & np.roll(support, shift, axis)
        half = np.where(face, half, 0.0)
        if np.any(np.abs(half) > EXP_LIMIT):
            raise BlowUpError("neighbouring potential jump too large to exponentiate")
        diag += np.where(face, coef * np.exp(half), 0.0)
        rows.append(idx[face])
        cols.append(np.roll(idx, shift, axis)[face])
        vals.append(-coef * np.exp(-half[face]))
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid.size, grid.size)
    )
    return A.tocsr()


def density_form_solve(grid, rhs_rho, logw, dt_eff, diag_coef=1.0, support=None) -> np.ndarray:
    A = density_form_matrix(grid, logw, dt_eff, diag_coef, support)
    rho = scipy.sparse.linalg.spsolve(A.tocsc(), np.asarray(rhs_rho, dtype=float).ravel())
    if not np.all(np.isfinite(rho)):
        raise SolverError("sparse density solve produced non-finite values")
    rho = rho.reshape(grid.shape)
    if support is not None:
        rho = np.where(support, rho, 0.0)
    return rho


def _check_positive(rho_new: np.ndarray, rho_old: np.ndarray, config: SchemeConfig) -> None:
    top = float(np.max(np.abs(rho_old))) if rho_old.size else 0.0
    low = float(np.min(rho_new))
    if low < -config.positivity_slack * top:
        raise SchemeInvariantError(
            f"positivity violated: min rho = {low:.3e} (max |rho^n| = {top:.3e})"
        )


def density_update(state: SimState, conc_next: np.ndarray, config: SchemeConfig) -> np.ndarray:
    """First-order symmetrized density step with ``M = exp(c^{n+1})``."""
    rho, _ = _density_solve(state, conc_next, config)
    return rho


def _density_solve(state: SimState, conc_next: np.ndarray, config: SchemeConfig):
    rho, it = symmetrized_density_solve(state.grid, state.rho, conc_next, config.dt, config)
    _check_positive(rho, state.rho, config)
    return rho, it


# -- steppers ---------------------------------------------------------------------


def step_first_order(state: SimState, config: SchemeConfig) -> SimState:
    """c-solve with rho^n, then the symmetrized rho-solve with exp(c^{n+1})."""
    conc, it_c = _chemo_solve(state, config)
    rho, it_r = _density_solve(state, conc, config)
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


def step_bdf2(state: SimState, config: SchemeConfig) -> SimState:
    """BDF2 step; bootstraps with a first-order step when no history is present.

    Positivity is not guaranteed: ``2 rho^n - rho^{n-1}/2`` can be negative.
    """
    if state.rho_prev is None or state.conc_prev is None:
        return step_first_order(state, config)
    grid, dt, eps = state.grid, config.dt, config.epsilon
    source = 2.0 * state.rho - state.rho_prev
    if eps == 0.0:
        conc, it_c = solve_screened(grid, 0.0, source, config)
    else:
        k = eps / dt
        rhs = k * (2.0 * state.conc - 0.5 * state.conc_prev) + source
        conc, it_c = solve_screened(grid, 1.5 * k, rhs, config)
    rhs_rho = 2.0 * state.rho - 0.5 * state.rho_prev
    rho, it_r = symmetrized_density_solve(grid, rhs_rho, conc, dt, config, diag_coef=1.5)
    low = float(rho.min())
    if low < 0:
        logger.debug("bdf2 step %d produced negative density %.3e", state.step + 1, low)
    return SimState(
        grid=grid,
        rho=rho,
        conc=conc,
        time=state.time + dt,
        step=state.step + 1,
        rho_prev=state.rho,
        conc_prev=state.conc,
        cg_iterations=it_c + it_r,
    )


def step(state: SimState, config: SchemeConfig) -> SimState:
    if config.order == "bdf2":
        return step_bdf2(state, config)
    return step_first_order(state, config)
