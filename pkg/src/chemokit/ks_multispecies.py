"""Two species sharing one chemoattractant.

Species ``i`` obeys ``d_t rho_i = mu_i div(M_i grad(rho_i / M_i))`` with
``M_i = exp((chi_i / mu_i) c)``, which is the product-rule rewrite of
``mu_i Lap rho_i - chi_i div(rho_i grad c)``.  The concentration solves
``eps d_t c = D Lap c + alpha_1 rho_1 + alpha_2 rho_2 - beta c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .grid import Grid2D
from .ks_core import SchemeConfig, _check_positive, solve_screened, symmetrized_density_solve

logger = logging.getLogger(__name__)


@dataclass
class TwoSpeciesConfig:
    chi1: float = 1.0
    chi2: float = 10.0
    mu1: float = 1.0
    mu2: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: float = 1.0
    D: float = 1.0
    epsilon: float = 0.0
    dt: float = 0.01
    tol: float = 1e-10
    max_iter: int | None = None
    jacobi: bool = False
    positivity_slack: float = 1e-8

    def __post_init__(self):
        for name in ("chi1", "chi2", "mu1", "mu2", "alpha1", "alpha2", "beta", "D", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def scheme(self) -> SchemeConfig:
        return SchemeConfig(
            epsilon=self.epsilon,
            dt=self.dt,
            tol=self.tol,
            max_iter=self.max_iter,
            jacobi=self.jacobi,
            positivity_slack=self.positivity_slack,
        )

    def swapped(self) -> "TwoSpeciesConfig":
        return replace(
            self,
            chi1=self.chi2, chi2=self.chi1,
            mu1=self.mu2, mu2=self.mu1,
            alpha1=self.alpha2, alpha2=self.alpha1,
        )


@dataclass
class TwoSpeciesState:
    grid: Grid2D
    rho1: np.ndarray
    rho2: np.ndarray
    conc: np.ndarray
    time: float = 0.0
    step: int = 0
    cg_iterations: int = 0

    def copy(self) -> "TwoSpeciesState":
        return TwoSpeciesState(
            self.grid, self.rho1.copy(), self.rho2.copy(), self.conc.copy(), self.time, self.step, self.cg_iterations
        )


def two_species_chemo_solve(state: TwoSpeciesState, config: TwoSpeciesConfig):
    """``((eps/dt + beta) I - D Lap_h) c' = (eps/dt) c + alpha_1 rho_1 + alpha_2 rho_2``."""
    k = config.epsilon / config.dt
    rhs = k * state.conc + config.alpha1 * state.rho1 + config.alpha2 * state.rho2
    return solve_screened(state.grid, k + config.beta, rhs, config.scheme(), diffusivity=config.D)


def step_two_species(state: TwoSpeciesState, config: TwoSpeciesConfig) -> TwoSpeciesState:
    scheme = config.scheme()
    conc, it = two_species_chemo_solve(state, config)
    new_rho = []
    for rho, chi, mu in ((state.rho1, config.chi1, config.mu1), (state.rho2, config.chi2, config.mu2)):
        rho_new, it_r = symmetrized_density_solve(state.grid, rho, (chi / mu) * conc, mu * config.dt, scheme)
        _check_positive(rho_new, rho, scheme)
        new_rho.append(rho_new)
        it += it_r
    return TwoSpeciesState(
        grid=state.grid,
        rho1=new_rho[0],
        rho2=new_rho[1],
        conc=conc,
        time=state.time + config.dt,
        step=state.step + 1,
        cg_iterations=it,
    )
