"""Measured quantities: masses, free energies, l1 errors and stability monitors."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import (
    Field2D,
    Grid2D,
    RadialField,
    RadialGrid,
    centered_gradient,
    discrete_gradient_l2,
    radial_gradient_l2,
)
from .ks_core import SchemeConfig, elliptic_chemo_solve

logger = logging.getLogger(__name__)

NEGATIVE_TOL = 1e-12


@dataclass
class DiagnosticsRecord:
    time: float
    mass: float | tuple[float, ...]
    free_energy: float
    max_rho: float
    min_rho: float
    grad_rho_l2: float
    dt_grad_rho: float
    small_data_lhs: float
    cg_iterations: int = 0
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _values(f, grid):
    if isinstance(f, (Field2D, RadialField)):
        return f.grid, np.asarray(f.values, dtype=float)
    if grid is None:
        raise TypeError("a grid is required when passing a bare array")
    return grid, np.asarray(f, dtype=float)


def total_mass(f, grid: Grid2D | RadialGrid | None = None) -> float:
    """Cartesian ``sum f dx dy``; radial ``2 pi sum_{j>=1} r_j f_j dr``."""
    grid, v = _values(f, grid)
    if isinstance(grid, RadialGrid):
        return float(2.0 * np.pi * np.sum(grid.r[1:] * v[1:]) * grid.dr)
    return float(np.sum(v) * grid.cell_area)


def entropy_density(rho: np.ndarray) -> np.ndarray:
    """``rho log rho`` with ``0 log 0 = 0``."""
    rho = np.asarray(rho, dtype=float)
    safe = np.where(rho > 0, rho, 1.0)
    return np.where(rho > 0, rho * np.log(safe), 0.0)


def free_energy(rho, conc, epsilon: float = 1.0, variant: str = "pp", grid: Grid2D | None = None) -> float:
    """Free energy on the periodic grid.

    ``pp``: ``sum (rho log rho - rho - rho c + |grad c|^2 / 2) dx dy`` with
    centred differences.  ``pe``: ``sum (rho log rho - rho) - (1/2) sum rho c``
    where c is the gauged periodic Poisson solution of rho (``conc`` ignored).
    Neither functional depends on ``epsilon``; it is accepted so that callers
    can pass a scheme's parameters through unchanged.  On a radial grid only
    ``pp`` is available, with ``2 pi r dr`` quadrature.
    """
    grid, r = _values(rho, grid)
    if isinstance(grid, RadialGrid):
        if variant != "pp":
            raise ValueError("radial free energy supports only the 'pp' variant")
        _, c = _values(conc, grid)
        ext = np.append(c, c[-1])
        cr = (ext[2:] - ext[:-2]) / (2.0 * grid.dr)
        rr, cc = r[1:], c[1:]
        dens = entropy_density(np.maximum(rr, 0.0)) - rr - rr * cc + 0.5 * cr * cr
        return float(2.0 * np.pi * np.sum(grid.r[1:] * dens) * grid.dr)
    if np.any(r < 0):
        logger.debug("free energy of a density with negative entries; clamping the entropy term")
    area = grid.cell_area
    base = entropy_density(np.maximum(r, 0.0)) - r
    if variant == "pp":
        _, c = _values(conc, grid)
        gx, gy = centered_gradient(grid, c)
        return float(np.sum(base - r * c + 0.5 * (gx * gx + gy * gy)) * area)
    if variant == "pe":
        if not np.any(r):
            return 0.0
        c = elliptic_chemo_solve(grid, r, SchemeConfig(tol=1e-12))
        return float(np.sum(base - 0.5 * r * c) * area)
    raise ValueError(f"unknown free-energy variant {variant!r}")


def restrict_to_coarse(fine: np.ndarray, coarse_shape: tuple[int, ...]) -> np.ndarray:
    """Sample a fine node-centred field at the nodes it shares with a 2x coarser grid."""
    fine = np.asarray(fine)
    if fine.ndim != len(coarse_shape):
        raise ValueError("field dimensions differ")
    slices = []
    for nf, nc in zip(fine.shape, coarse_shape):
        if nf != 2 * nc:
            raise ValueError(f"grids are not a 2x refinement pair: {fine.shape} vs {coarse_shape}")
        slices.append(slice(0, None, 2))
    return fine[tuple(slices)]


def l1_rel_error(f: np.ndarray, g: np.ndarray) -> float:
    """``||f - g||_1 / ||f||_1``.  If f is the finer of a 2x pair it is restricted first."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        f = restrict_to_coarse(f, g.shape)
    norm = float(np.sum(np.abs(f)))
    diff = float(np.sum(np.abs(f - g)))
    if norm == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / norm


def l1_abs_error(f: np.ndarray, g: np.ndarray, grid: Grid2D) -> float:
    """``sum |f - g| dx dy`` on a common grid."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        raise ValueError(f"incompatible grids: {f.shape} vs {g.shape}")
    return float(np.sum(np.abs(f - g)) * grid.cell_area)


def _norms(grid, rho, conc):
    if isinstance(grid, RadialGrid):
        r = grid.r[1:]
        rho_l2sq = 2.0 * np.pi * float(np.sum(r * rho[1:] ** 2)) * grid.dr
        return radial_gradient_l2(grid, rho), rho_l2sq, radial_gradient_l2(grid, conc)
    rho_l2sq = float(np.sum(rho**2)) * grid.cell_area
    return discrete_gradient_l2(rho, grid), rho_l2sq, discrete_gradient_l2(conc, grid)


def stability_monitor(state, config, t_final: float | None = None) -> dict:
    """The two sufficient conditions from the stability analysis, as flags.

    ``dt ||grad rho^n|| <= 1`` and ``||rho^n||^2 + eps ||grad c^n||^2 <= 2 exp(-T)``
    where ``T`` defaults to the current time.
    """
    grid = state.grid
    grad_rho, rho_l2sq, grad_c = _norms(grid, state.rho, state.conc)
    dt_grad = config.dt * grad_rho
    small = rho_l2sq + config.epsilon * grad_c**2
    horizon = state.time if t_final is None else t_final
    flags = []
    if dt_grad > 1.0:
        flags.append("dt_grad_rho")
    if small > 2.0 * math.exp(-horizon):
        flags.append("small_data")
    if flags:
        logger.debug(
            "step %d: stability condition(s) %s violated (dt|grad rho| = %.3g, small-data lhs = %.3g)",
            state.step, ",".join(flags), dt_grad, small,
        )
    return {"grad_rho_l2": grad_rho, "dt_grad_rho": dt_grad, "small_data_lhs": small, "flags": flags}


@dataclass
class PositivityReport:
    min_value: float
    negatives: int


def positivity_audit(f: np.ndarray, rel_tol: float = NEGATIVE_TOL) -> PositivityReport:
    """Minimum and the number of entries below ``-rel_tol * max|f|``."""
    v = np.asarray(f.values if isinstance(f, (Field2D, RadialField)) else f, dtype=float)
    if v.size == 0:
        return PositivityReport(0.0, 0)
    top = float(np.max(np.abs(v)))
    return PositivityReport(float(v.min()), int(np.count_nonzero(v < -rel_tol * top)))


def record(state, config, variant: str | None = None, t_final: float | None = None) -> DiagnosticsRecord:
    """Collect a :class:`DiagnosticsRecord` for a single-species state."""
    grid = state.grid
    radial = isinstance(grid, RadialGrid)
    mon = stability_monitor(state, config, t_final)
    if radial:
        variant = "pp"
    else:
        variant = variant or ("pe" if config.epsilon == 0 else "pp")
    energy = free_energy(state.rho, state.conc, config.epsilon, variant, grid)
    rho = state.rho[1:] if radial else state.rho
    return DiagnosticsRecord(
        time=state.time,
        mass=total_mass(state.rho, grid),
        free_energy=energy,
        max_rho=float(rho.max()),
        min_rho=float(rho.min()),
        grad_rho_l2=mon["grad_rho_l2"],
        dt_grad_rho=mon["dt_grad_rho"],
        small_data_lhs=mon["small_data_lhs"],
        cg_iterations=state.cg_iterations,
        flags=mon["flags"],
    )


def two_species_free_energy(rho1, rho2, conc, config, grid: Grid2D) -> float:
    """Lyapunov functional of the two-species system.

    ``sum_i (alpha_i mu_i / chi_i) int (rho_i log rho_i - rho_i) - int (alpha . rho) c
    + (1/2) int (D |grad c|^2 + beta c^2)``.  Its variation in ``rho_i`` is
    ``(alpha_i / chi_i)(mu_i log rho_i - chi_i c)``, so it decays along solutions.
    """
    area = grid.cell_area
    total = 0.0
    for rho, alpha, mu, chi in (
        (rho1, config.alpha1, config.mu1, config.chi1),
        (rho2, config.alpha2, config.mu2, config.chi2),
    ):
        r = np.maximum(np.asarray(rho, dtype=float), 0.0)
        total += alpha * mu / chi * float(np.sum(entropy_density(r) - r))
    gx, gy = centered_gradient(grid, conc)
    total += float(np.sum(
        -(config.alpha1 * rho1 + config.alpha2 * rho2) * conc
        + 0.5 * (config.D * (gx * gx + gy * gy) + config.beta * conc * conc)
    ))
    return total * area


def two_species_record(state, config) -> DiagnosticsRecord:
    grid = state.grid
    both = np.maximum(state.rho1, state.rho2)
    low = min(float(state.rho1.min()), float(state.rho2.min()))
    grad = discrete_gradient_l2(state.rho1, grid) + discrete_gradient_l2(state.rho2, grid)
    l2sq = float(np.sum(state.rho1**2 + state.rho2**2)) * grid.cell_area
    return DiagnosticsRecord(
        time=state.time,
        mass=(total_mass(state.rho1, grid), total_mass(state.rho2, grid)),
        free_energy=two_species_free_energy(state.rho1, state.rho2, state.conc, config, grid),
        max_rho=float(both.max()),
        min_rho=low,
        grad_rho_l2=grad,
        dt_grad_rho=config.dt * grad,
        small_data_lhs=l2sq + config.epsilon * discrete_gradient_l2(state.conc, grid) ** 2,
        cg_iterations=state.cg_iterations,
    )
