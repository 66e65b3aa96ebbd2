import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from chemokit.diagnostics import total_mass
from chemokit.grid import make_radial_grid
from chemokit.ks_core import SchemeConfig, SimState
from chemokit.ks_radial import (
    degenerate_log_mobility,
    face_weights,
    radial_chemo_update,
    radial_laplacian_system,
    radial_screened_poisson,
    radial_symmetrized_solve,
    r_weighted_mean,
    step_radial,
)


def rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def radial_state(grid, seed, support_frac=1.0):
    rng = np.random.default_rng(seed)
    rho = rng.random(grid.size) + 0.1
    if support_frac < 1:
        rho[int(support_frac * grid.size):] = 0.0
    conc = rng.normal(size=grid.size)
    rho[0], conc[0] = rho[1], conc[1]
    return SimState(grid, rho, conc)


def test_face_weights_geometric_mean(small_radial):
    r = small_radial.r
    np.testing.assert_allclose(face_weights(small_radial), np.sqrt(r[1:-1] * r[2:]) / small_radial.dr**2)


def test_laplacian_system_is_symmetric_and_matches_oracle(small_radial):
    sys = radial_laplacian_system(small_radial, 0.7 * small_radial.r[1:], np.zeros(small_radial.nr))
    A = sys.to_dense()
    np.testing.assert_allclose(A, A.T)
    np.testing.assert_allclose(A, oracles.radial_matrix(small_radial, 0.7, 1.0), atol=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.2])
def test_radial_chemo_matches_dense(small_radial, eps):
    s = radial_state(small_radial, 0)
    cfg = SchemeConfig(epsilon=eps, dt=0.03)
    c = radial_chemo_update(s, cfg)
    ref = oracles.radial_chemo(small_radial, s.rho, s.conc, eps, cfg.dt)
    assert rel(c, ref) < 1e-10
    assert c[0] == c[1]
    if eps == 0:
        assert abs(r_weighted_mean(small_radial, c)) < 1e-13


@pytest.mark.parametrize("eps", [0.0, 1.0])
def test_radial_step_matches_dense(small_radial, eps):
    s = radial_state(small_radial, 1)
    cfg = SchemeConfig(epsilon=eps, dt=0.05)
    new = step_radial(s, cfg)
    rho_ref, c_ref = oracles.radial_step(small_radial, s.rho, s.conc, eps, cfg.dt)
    assert rel(new.rho, rho_ref) < 1e-10
    assert rel(new.conc, c_ref) < 1e-10


@pytest.mark.parametrize("m", [2.0, 4.0])
def test_radial_degenerate_step_matches_dense(small_radial, m):
    s = radial_state(small_radial, 2, support_frac=0.6)
    cfg = SchemeConfig(epsilon=0.0, dt=1e-3)
    new = step_radial(s, cfg, m=m)
    rho_ref, _ = oracles.radial_step(small_radial, s.rho, s.conc, 0.0, cfg.dt, m=m)
    assert rel(new.rho, rho_ref) < 1e-10
    np.testing.assert_array_equal(new.rho[s.rho == 0], 0.0)


def test_screened_poisson_of_constant_is_constant():
    rg = make_radial_grid(1.0, 20)
    np.testing.assert_allclose(radial_screened_poisson(rg, np.full(rg.size, 3.0)), 3.0, rtol=1e-12)


def test_degenerate_log_mobility_formula():
    rho = np.array([0.0, 0.5, 2.0])
    conc = np.array([1.0, 1.0, -1.0])
    lw = degenerate_log_mobility(rho, conc, 3.0)
    assert lw[0] == -np.inf
    np.testing.assert_allclose(lw[1:], np.log(rho[1:]) + conc[1:] - 1.5 * rho[1:] ** 2)


def test_step_rejects_sublinear_exponent(small_radial):
    with pytest.raises(ValueError):
        step_radial(radial_state(small_radial, 3), SchemeConfig(), m=0.5)


def test_symmetrized_solve_empty_support(small_radial):
    out = radial_symmetrized_solve(small_radial, np.zeros(small_radial.size), np.zeros(small_radial.size), 0.1,
                                   support=np.zeros(small_radial.size, dtype=bool))
    assert not out.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), dt=st.floats(1e-4, 100.0), eps=st.sampled_from([0.0, 0.01, 1.0]),
       m=st.sampled_from([1.0, 2.0, 5.0]))
def test_radial_mass_and_positivity(seed, dt, eps, m):
    rg = make_radial_grid(2.0, 12)
    s = radial_state(rg, seed, support_frac=0.7 if m > 1 else 1.0)
    s.rho *= 5
    new = step_radial(s, SchemeConfig(epsilon=eps, dt=dt), m=m)
    assert new.rho.min() >= -1e-12 * s.rho.max()
    assert total_mass(new.rho, rg) == pytest.approx(total_mass(s.rho, rg), rel=1e-12)
