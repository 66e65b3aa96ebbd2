"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The studies run on the shipped configs in ``configs/`` where one exists, so
these tests also exercise the experiment harness end to end.
"""

import time
from pathlib import Path

import numpy as np

import oracles
from conftest import report
from chemokit.diagnostics import total_mass
from chemokit.experiments import asymptotic_study, initial_fields, layer_end_time, run_experiment
from chemokit.grid import build_initial_condition, make_grid2d, make_radial_grid
from chemokit.harness_io import parse_config
from chemokit.ks_core import SchemeConfig, SimState, step, step_first_order
from chemokit.ks_degenerate import (
    DegenerateConfig,
    newton_solve,
    semi_implicit_stable_dt,
    step_subcritical_newton,
    step_subcritical_semi_implicit,
)
from chemokit.ks_multispecies import TwoSpeciesConfig, TwoSpeciesState, step_two_species
from chemokit.ks_radial import radial_screened_poisson, step_radial

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load(name, **overrides):
    spec = parse_config((CONFIGS / f"{name}.ini").read_text())
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def outcome(number, name, checks, detail):
    """Report the line, then assert every named sub-check."""
    failed = [label for label, ok in checks if not ok]
    report(number, name, not failed, detail + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert not failed, f"criterion {number}: {', '.join(failed)} ({detail})"


# -- 1 -------------------------------------------------------------------------


def _gaussian_2d(n=64, L=5.0):
    g = make_grid2d(-L, L, -L, L, n, n)
    X, Y = g.mesh()
    return g, 4 * np.exp(-(X**2 + Y**2)), np.exp(-0.5 * (X**2 + Y**2))


def _conservation_cases():
    g, rho, c = _gaussian_2d()
    rg = make_radial_grid(5.0, 128)
    r_rho = 4 * np.exp(-rg.r**2)
    dg = make_radial_grid(2.0, 128)
    d_rho = build_initial_condition(dg, "indicator_disc", value=1.0, radius2=0.1).values
    cg = make_grid2d(-2, 2, -2, 2, 64, 64)
    c_rho = build_initial_condition(cg, "indicator_disc", value=1.0, radius2=0.1).values
    ng, n_rho, _ = _gaussian_2d(64, 2.0)
    tg = make_grid2d(-3, 3, -3, 3, 64, 64)
    tX, tY = tg.mesh()
    t_rho = 50 * np.exp(-100 * (tX**2 + tY**2))
    return {
        "first-order": (SimState(g, rho, c), step, SchemeConfig(epsilon=1.0, dt=0.01)),
        "bdf2": (SimState(g, rho, c), step, SchemeConfig(epsilon=1.0, dt=0.01, order="bdf2")),
        "radial m=1": (SimState(rg, r_rho, radial_screened_poisson(rg, r_rho)), step_radial,
                       SchemeConfig(epsilon=0.0, dt=0.01)),
        "radial m=4": (SimState(dg, d_rho, 0.5 * d_rho), lambda s, k: step_radial(s, k, m=4.0),
                       SchemeConfig(epsilon=0.0, dt=0.9 * semi_implicit_stable_dt(dg, 4.0, 1.0))),
        "semi-implicit m=4": (SimState(cg, c_rho, 0.5 * c_rho), step_subcritical_semi_implicit,
                              DegenerateConfig(epsilon=0.0, m=4.0, dt=0.9 * semi_implicit_stable_dt(cg, 4.0, 1.0))),
        "newton m=2": (SimState(ng, n_rho, np.zeros(ng.shape)), step_subcritical_newton,
                       DegenerateConfig(epsilon=1.0, m=2.0, dt=0.01)),
        "two-species": (TwoSpeciesState(tg, t_rho, t_rho.copy(), np.zeros(tg.shape)), step_two_species,
                        TwoSpeciesConfig(chi1=1, chi2=10, dt=tg.dx / 10)),
    }


def _masses(s):
    if isinstance(s, TwoSpeciesState):
        return np.array([total_mass(s.rho1, s.grid), total_mass(s.rho2, s.grid)])
    return np.array([total_mass(s.rho, s.grid)])


def test_criterion_01_conservation():
    t0 = time.perf_counter()
    checks, parts = [], []
    for name, (state, stepper, cfg) in _conservation_cases().items():
        m0 = _masses(state)
        worst = 0.0
        for _ in range(1000):
            state = stepper(state, cfg)
            worst = max(worst, float(np.max(np.abs(_masses(state) / m0 - 1.0))))
        checks.append((name, worst <= 1e-9))
        parts.append(f"{name} {worst:.1e}")
    outcome(1, "conservation", checks,
            f"max relative drift over 1000 steps: {', '.join(parts)}; {time.perf_counter() - t0:.0f}s")


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_positivity():
    g = make_grid2d(-4, 4, -4, 4, 64, 64)
    X, Y = g.mesh()
    rho0 = 600 * np.exp(-60 * (X**2 + Y**2))
    c0 = 300 * np.exp(-30 * (X**2 + Y**2))
    dt = 10 * g.dx**2
    rg = make_radial_grid(2.0, 80)
    r_rho = 600 * np.exp(-60 * rg.r**2)
    cases = {
        "first-order": (SimState(g, rho0, c0), step_first_order, SchemeConfig(epsilon=0.0, dt=dt)),
        "radial": (SimState(rg, r_rho, radial_screened_poisson(rg, r_rho)), step_radial,
                   SchemeConfig(epsilon=0.0, dt=10 * rg.dr**2)),
        "semi-implicit m=2": (SimState(g, rho0, c0), step_subcritical_semi_implicit,
                              DegenerateConfig(epsilon=0.0, m=2.0, dt=dt)),
        "two-species": (TwoSpeciesState(g, rho0, rho0.copy(), c0), step_two_species,
                        TwoSpeciesConfig(chi1=1, chi2=20, epsilon=0.0, dt=dt)),
    }
    checks, parts = [], []
    for name, (state, stepper, cfg) in cases.items():
        worst = 0.0
        for _ in range(40):
            state = stepper(state, cfg)
            fields = (state.rho1, state.rho2) if isinstance(state, TwoSpeciesState) else (state.rho,)
            worst = min([worst] + [float(f.min() / f.max()) for f in fields])
        checks.append((name, worst >= -1e-12))
        parts.append(f"{name} {worst:.1e}")
    outcome(2, "positivity", checks, f"min(rho)/max(rho) over 40 steps at dt = 10 dx^2: {', '.join(parts)}")


# -- 3 -------------------------------------------------------------------------


def test_criterion_03_convergence():
    t0 = time.perf_counter()
    spec = load("convergence")
    assert spec.t_max == 2.0 and spec.meshes == [10, 20, 40, 80]
    result = run_experiment(spec, threads=4)
    assert not result.failed
    windows = {"first": (0.8, 1.2), "bdf2": (1.7, 2.3)}
    checks, parts = [], []
    for (order, eps, _), slope in sorted(result.derived["slopes"].items()):
        lo, hi = windows[order]
        checks.append((f"{order} eps={eps:g}", lo <= slope <= hi))
        parts.append(f"{order}/{eps:g} {slope:.2f}")
    assert len(checks) == 6
    outcome(3, "convergence slopes", checks, f"{', '.join(parts)}; {time.perf_counter() - t0:.0f}s")


# -- 4 -------------------------------------------------------------------------


def test_criterion_04_asymptotic_preserving():
    t0 = time.perf_counter()
    spec = load("asymptotic")
    result = run_experiment(spec)
    assert not result.failed
    checks, parts = [], []
    for (dt, e1, e2), (lo, hi) in result.derived["ratios"].items():
        checks.append((f"ratio {e1:g}/{e2:g}", 5 <= lo and hi <= 20))
        parts.append(f"{e1:g}/{e2:g} in [{lo:.2f}, {hi:.2f}]")
    coarse_dt = float(spec.dt_rules[0])
    g = spec.grids()[0]
    rho0, c0 = initial_fields(spec, g)
    fine_dt = 5e-4
    eps_list, times, _, c_err = asymptotic_study(g, rho0, c0, spec.epsilons, fine_dt, 0.1, spec.tol)
    layers = []
    for i, e in enumerate(eps_list):
        tau_f = layer_end_time(times, c_err[i], e, spec.layer_threshold)
        tau_c = result.derived["layer_end"][(coarse_dt, e)]
        checks.append((f"layer eps={e:g}", np.isfinite(tau_c) and abs(tau_c - tau_f) <= 2 * coarse_dt))
        layers.append(f"{e:g}: {tau_c:.3g} vs {tau_f:.3g}")
    outcome(4, "asymptotic preservation", checks,
            f"post-layer rho error ratios {', '.join(parts)}; c-layer end (dt={coarse_dt:g} vs {fine_dt:g}) "
            f"{', '.join(layers)}; {time.perf_counter() - t0:.0f}s")


# -- 5 -------------------------------------------------------------------------


def test_criterion_05_energy_decay():
    result = run_experiment(load("energy"))
    assert not result.failed
    v = result.derived["violations"]
    checks = [(f"eps={e:g}", n == 0) for e, n in sorted(v.items())]
    assert len(checks) == 2
    outcome(5, "energy decay", checks, "per-step increases above 1e-8|F|: "
            + ", ".join(f"eps={e:g}: {n}" for e, n in sorted(v.items())))


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_blowup_scaling():
    t0 = time.perf_counter()
    radial = run_experiment(load("blowup_radial"), threads=2)
    cart = run_experiment(load("blowup_cartesian"), threads=2)
    assert not radial.failed and not cart.failed
    r_ratio = radial.derived["ratios"][0]
    c_ratio = cart.derived["ratios"][0]
    checks = [("radial", 11 <= r_ratio <= 21), ("cartesian", 11 <= c_ratio <= 21)]
    outcome(6, "blow-up scaling", checks,
            f"peak ratio radial (dr 0.025 -> 0.00625) {r_ratio:.2f}, cartesian (dx 0.2 -> 0.05) {c_ratio:.2f}; "
            f"{time.perf_counter() - t0:.0f}s")


# -- 7 -------------------------------------------------------------------------


def test_criterion_07_steady_states():
    result = run_experiment(load("steady_subcritical"), threads=3)
    assert not result.failed
    dist = result.derived["distance"]
    assert sorted(dist) == [4.0, 16.0, 64.0]
    outcome(7, "m -> infinity steady state", [("strictly decreasing", result.derived["strictly_decreasing"])],
            "L1 distance to the initial indicator: " + ", ".join(f"m={m:g}: {d:.3e}" for m, d in sorted(dist.items())))


# -- 8 -------------------------------------------------------------------------


def test_criterion_08_two_species():
    t0 = time.perf_counter()
    ex1 = load("two_species", meshes=[100])
    ex1.species = {**ex1.species, "chi2": 10.0}
    r1 = run_experiment(ex1)
    assert not r1.failed
    run = r1.runs[0]
    p1, p2 = float(run.final.rho1.max()), float(run.final.rho2.max())
    drift = max(abs(b / a - 1) for a, b in zip(run.initial.mass, run.series.records[-1].mass))
    checks = [
        ("example 1 ordering", p2 > p1),
        ("example 1 finite", np.isfinite(p1) and np.isfinite(p2)),
        ("example 1 mass", drift <= 1e-9),
    ]
    r2 = run_experiment(load("two_species"), threads=2)
    assert not r2.failed
    peaks = r2.derived["peaks"]
    (ratio1, ratio2), = r2.derived["ratios"]
    checks += [
        ("example 2 ordering", all(q2 > q1 for _, q1, q2 in peaks)),
        ("example 2 rho2 growth", 2.5 <= ratio2 <= 6),
        ("example 2 rho1 growth", 2.5 <= ratio1 <= 6),
    ]
    outcome(8, "two species", checks,
            f"ex1 max rho1 {p1:.3g}, rho2 {p2:.3g}, drift {drift:.1e}; ex2 peaks "
            + ", ".join(f"h={h:g}: ({q1:.3g}, {q2:.3g})" for h, q1, q2 in peaks)
            + f", ratios rho1 {ratio1:.2f}, rho2 {ratio2:.2f}; {time.perf_counter() - t0:.0f}s")


# -- 9 -------------------------------------------------------------------------


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_criterion_09_oracle_equivalence():
    g = make_grid2d(-1, 1, -1, 1, 8, 8)
    rng = np.random.default_rng(2024)
    rho = rng.random(g.shape) + 0.1
    rho_prev = rng.random(g.shape) + 0.1
    conc, conc_prev = rng.normal(size=g.shape), rng.normal(size=g.shape)
    errs = {}
    for eps in (0.0, 0.5):
        cfg = SchemeConfig(epsilon=eps, dt=0.05)
        new = step_first_order(SimState(g, rho, conc), cfg)
        ref_rho, ref_c = oracles.first_order_step(g, rho, conc, eps, cfg.dt)
        errs[f"first eps={eps:g}"] = max(_rel(new.rho, ref_rho), _rel(new.conc, ref_c))
        bcfg = SchemeConfig(epsilon=eps, dt=0.05, order="bdf2")
        new = step(SimState(g, rho, conc, rho_prev=rho_prev, conc_prev=conc_prev), bcfg)
        ref_rho, ref_c = oracles.bdf2_step(g, rho, rho_prev, conc, conc_prev, eps, bcfg.dt)
        errs[f"bdf2 eps={eps:g}"] = max(_rel(new.rho, ref_rho), _rel(new.conc, ref_c))
    compact = rho * (rng.random(g.shape) > 0.3)
    dcfg = DegenerateConfig(epsilon=0.0, m=3.0, dt=1e-3)
    new = step_subcritical_semi_implicit(SimState(g, compact, conc), dcfg)
    ref_rho, ref_c = oracles.semi_implicit_step(g, compact, conc, 0.0, dcfg.dt, 3.0)
    errs["semi-implicit m=3"] = max(_rel(new.rho, ref_rho), _rel(new.conc, ref_c))
    tcfg = TwoSpeciesConfig(chi1=1, chi2=10, epsilon=0.2, dt=0.02)
    new = step_two_species(TwoSpeciesState(g, rho, rho_prev, conc), tcfg)
    r1, r2, c = oracles.two_species_step(g, rho, rho_prev, conc, tcfg)
    errs["two-species"] = max(_rel(new.rho1, r1), _rel(new.rho2, r2), _rel(new.conc, c))
    rg = make_radial_grid(1.0, 8)
    r_rho = rng.random(rg.size) + 0.1
    r_c = rng.normal(size=rg.size)
    r_rho[0], r_c[0] = r_rho[1], r_c[1]
    for eps, m in ((0.0, 1.0), (1.0, 1.0), (0.0, 4.0)):
        src = np.where(np.arange(rg.size) < 6, r_rho, 0.0) if m > 1 else r_rho
        new = step_radial(SimState(rg, src, r_c), SchemeConfig(epsilon=eps, dt=0.01), m=m)
        ref_rho, ref_c = oracles.radial_step(rg, src, r_c, eps, 0.01, m=m)
        errs[f"radial eps={eps:g} m={m:g}"] = max(_rel(new.rho, ref_rho), _rel(new.conc, ref_c))
    checks = [(k, v <= 1e-10) for k, v in errs.items()]

    ng = make_grid2d(-1, 1, -1, 1, 6, 6)
    X, Y = ng.mesh()
    n_rho = 1.0 + 0.5 * np.exp(-3 * (X**2 + Y**2))
    n_c = 0.3 * np.cos(np.pi * X)
    ncfg = DegenerateConfig(m=2.0, dt=0.01)
    n_new, _ = newton_solve(ng, n_rho, n_c, ncfg)
    n_err = float(np.max(np.abs(n_new - oracles.picard_implicit_step(ng, n_rho, n_c, 2.0, 0.01))))
    checks.append(("newton", n_err <= ncfg.newton_tol))
    worst = max(errs.values())
    outcome(9, "oracle equivalence", checks,
            f"{len(errs)} linear steps, worst relative gap {worst:.1e}; newton vs fixed point {n_err:.1e}")


# -- 10 ------------------------------------------------------------------------


def test_criterion_10_cross_coordinate():
    t0 = time.perf_counter()
    L, n, dt, t_end = 5.0, 256, 0.01, 0.5
    g = make_grid2d(-L, L, -L, L, n, n)
    X, Y = g.mesh()
    cart = SimState(g, 4 * np.exp(-(X**2 + Y**2)), np.exp(-0.5 * (X**2 + Y**2)))
    rg = make_radial_grid(L, n)
    rad = SimState(rg, 4 * np.exp(-rg.r**2), np.exp(-0.5 * rg.r**2))
    cfg = SchemeConfig(epsilon=1.0, dt=dt)
    for _ in range(int(round(t_end / dt))):
        cart = step(cart, cfg)
        rad = step_radial(rad, cfg)
    row = n // 2
    assert g.y[row] == 0.0
    xs = g.x[row:]
    along = cart.rho[row, row:]
    interp = np.interp(xs, rg.r[1:], rad.rho[1:])
    err = float(np.sum(np.abs(along - interp)) / np.sum(np.abs(along)))
    bound = 5 * g.dx
    outcome(10, "cross-coordinate consistency", [("l1 along x-axis", err <= bound)],
            f"relative l1 {err:.2e} vs bound 5 dx = {bound:.3f} at t={t_end}; {time.perf_counter() - t0:.0f}s")
