"""Experiment drivers behind :func:`run_experiment`.

Each study kind expands its spec into independent runs (one per mesh, epsilon,
exponent, ...), executes them, optionally in a thread pool, and derives the
quantities the study is about: convergence slopes, epsilon-error tables,
peak-growth factors, distances to the initial profile.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diagnostics as diag
from .grid import Grid2D, RadialGrid, build_initial_condition
from .harness_io import ExperimentSpec, TimeSeries, resolve_dt, spacing
from .ks_core import SchemeConfig, SimState, elliptic_chemo_solve, solve_screened, step
from .ks_degenerate import (
    DegenerateConfig,
    semi_implicit_stable_dt,
    step_subcritical_newton,
    step_subcritical_semi_implicit,
)
from .ks_multispecies import TwoSpeciesConfig, TwoSpeciesState, step_two_species
from .ks_radial import radial_screened_poisson, step_radial

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    label: str
    params: dict
    series: TimeSeries | None = None
    initial: diag.DiagnosticsRecord | None = None
    final: object | None = None
    snapshots: dict = field(default_factory=dict)
    error: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExperimentResult:
    kind: str
    runs: list[RunResult]
    derived: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    data_files: dict = field(default_factory=dict)
    summary: str = ""

    @property
    def failed(self) -> list[RunResult]:
        return [r for r in self.runs if not r.ok]


# -- building blocks --------------------------------------------------------------


def initial_fields(spec: ExperimentSpec, grid: Grid2D | RadialGrid) -> tuple[np.ndarray, np.ndarray]:
    params = {k: v for k, v in spec.ic.items() if k != "kind"}
    rho = build_initial_condition(grid, spec.ic["kind"], **params).values
    kind = spec.c_ic["kind"]
    radial = isinstance(grid, RadialGrid)
    if kind == "zero":
        conc = np.zeros_like(rho)
    elif kind == "gaussian":
        conc = build_initial_condition(
            grid, "gaussian", amplitude=spec.c_ic.get("amplitude", 1.0), rate=spec.c_ic.get("rate", 1.0),
            center=spec.ic.get("center", (0.0, 0.0)),
        ).values
    elif kind == "scaled":
        conc = spec.c_ic.get("scale", 0.5) * rho
    elif kind == "screened_poisson":
        if radial:
            conc = radial_screened_poisson(grid, rho)
        else:
            conc, _ = solve_screened(grid, 1.0, rho, SchemeConfig(tol=spec.tol))
    else:
        if radial:
            from .ks_radial import _radial_elliptic

            conc = _radial_elliptic(grid, rho)
        else:
            conc = elliptic_chemo_solve(grid, rho, SchemeConfig(tol=spec.tol))
    return rho, conc


def make_stepper(grid, m: float, order: str, scheme: str) -> Callable:
    if isinstance(grid, RadialGrid):
        if scheme == "newton":
            raise ValueError("the Newton scheme is cartesian only")
        return lambda s, c: step_radial(s, c, m=m)
    if m == 1:
        return step
    if scheme == "newton":
        return step_subcritical_newton
    return step_subcritical_semi_implicit


def make_config(m: float, **kw) -> SchemeConfig:
    if m > 1:
        return DegenerateConfig(m=m, **kw)
    return SchemeConfig(**kw)


def step_count(t_max: float, dt: float) -> int:
    return max(1, int(math.ceil(t_max / dt - 1e-9)))


def simulate(
    state,
    stepper: Callable,
    config,
    t_max: float,
    snapshot_times=(),
    stride: int = 1,
    recorder: Callable | None = None,
    stop: Callable | None = None,
    on_step: Callable | None = None,
):
    """Advance ``state`` to ``t_max``; returns ``(final, series, snapshots, initial_record)``.

    ``stop(old, new)`` ends the run early when it returns True.  Snapshots are
    keyed ``(field name, requested time)`` and taken at the step nearest to it.
    """
    recorder = recorder or diag.record
    n_steps = step_count(t_max, config.dt)
    series = TimeSeries()
    initial = recorder(state, config)
    snap_steps = {}
    for t in snapshot_times:
        snap_steps.setdefault(min(n_steps, int(round(t / config.dt))), []).append(t)
    snapshots = {}

    def capture(s):
        for t in snap_steps.get(s.step, ()):
            for name in ("rho", "rho1", "rho2", "conc"):
                if hasattr(s, name):
                    snapshots[(name, t)] = (np.array(getattr(s, name)), s.grid)

    capture(state)
    flagged = False
    for n in range(1, n_steps + 1):
        new = stepper(state, config)
        done = stop is not None and stop(state, new)
        state = new
        if on_step is not None:
            on_step(state)
        if n % stride == 0 or n == n_steps or done:
            rec = recorder(state, config)
            if rec.flags and not flagged:
                logger.warning("stability monitor flagged %s at t=%.4g", ",".join(rec.flags), rec.time)
                flagged = True
            series.append(rec)
        capture(state)
        if done:
            break
    return state, series, snapshots, initial


def fixed_point_stop(tol: float) -> Callable:
    """Stop once ``max(|rho' - rho|, |c' - c|) / dt <= tol * max rho'``."""

    def stop(old, new):
        dt = new.time - old.time
        change = max(float(np.max(np.abs(new.rho - old.rho))), float(np.max(np.abs(new.conc - old.conc))))
        return change / dt <= tol * float(np.max(new.rho))

    return stop


def fit_slope(h, err) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if np.any(err <= 0) or len(h) < 2:
        return math.nan
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def _label(kind, **kw) -> str:
    parts = [kind]
    for k, v in kw.items():
        parts.append(f"{k}{v:g}" if isinstance(v, float) else f"{k}{v}")
    return "_".join(parts)


def _guarded(label: str, params: dict, fn: Callable) -> RunResult:
    try:
        return fn()
    except Exception as exc:  # one failing run must not stop the others
        logger.error("run %s failed: %s: %s", label, type(exc).__name__, exc)
        return RunResult(label, params, error=f"{type(exc).__name__}: {exc}")


def _run_all(jobs: list[Callable[[], RunResult]], threads: int) -> list[RunResult]:
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda j: j(), jobs))


def single_run(spec: ExperimentSpec, grid, dt_rule: str, eps: float, m: float, order: str,
               t_max: float | None = None, stop: Callable | None = None) -> RunResult:
    n = grid.nr if isinstance(grid, RadialGrid) else grid.nx
    params = {"mesh": n, "h": spacing(grid), "epsilon": eps, "m": m, "order": order, "dt_rule": dt_rule}
    label = _label(spec.kind, n=n, dt=dt_rule, eps=float(eps), m=float(m), order=order)

    def job():
        rho, conc = initial_fields(spec, grid)
        stable = semi_implicit_stable_dt(grid, m, float(np.max(rho))) if m > 1 else None
        dt = resolve_dt(dt_rule, grid, stable, spec.dt_safety)
        params["dt"] = dt
        cfg = make_config(m, epsilon=eps, dt=dt, order=order, tol=spec.tol)
        state = SimState(grid, rho, conc)
        final, series, snaps, initial = simulate(
            state, make_stepper(grid, m, order, spec.scheme), cfg, t_max or spec.t_max,
            spec.snapshot_times, spec.stride, stop=stop,
        )
        return RunResult(label, params, series, initial, final, snaps)

    return lambda: _guarded(label, params, job)


# -- study kinds ------------------------------------------------------------------


def _combos(spec):
    return list(itertools.product(spec.grids(), spec.dt_rules, spec.epsilons, spec.ms, spec.orders))


def _study_run(spec, threads):
    runs = _run_all([single_run(spec, *c) for c in _combos(spec)], threads)
    rows = ["label,steps,final_time,mass_drift,max_rho,min_rho,status"]
    for r in runs:
        if r.ok:
            drift = abs(_mass0(r.series.records[-1].mass) / _mass0(r.initial.mass) - 1.0) if _mass0(r.initial.mass) else 0.0
            rows.append(f"{r.label},{len(r.series)},{r.final.time:.6g},{drift:.3e},"
                        f"{r.series.records[-1].max_rho:.6g},{r.series.records[-1].min_rho:.3e},ok")
        else:
            rows.append(f"{r.label},,,,,,failed")
    return runs, {}, {"runs": "\n".join(rows) + "\n"}


def _mass0(m):
    return sum(m) if isinstance(m, tuple) else m


def _study_convergence(spec, threads):
    grids = spec.grids()
    jobs, keys = [], []
    for order, eps, rule in itertools.product(spec.orders, spec.epsilons, spec.dt_rules):
        for g in grids:
            jobs.append(single_run(spec, g, rule, eps, spec.ms[0], order))
            keys.append((order, eps, rule))
    runs = _run_all(jobs, threads)
    derived = {"slopes": {}, "errors": {}}
    rows = ["order,epsilon,dt_rule,h,error,pairwise_slope"]
    by_key: dict = {}
    for key, run in zip(keys, runs):
        by_key.setdefault(key, []).append(run)
    for key, group in by_key.items():
        if not all(r.ok for r in group):
            derived["slopes"][key] = math.nan
            continue
        hs, errs = [], []
        for coarse, fine in zip(group[:-1], group[1:]):
            hs.append(fine.params["h"])
            errs.append(diag.l1_rel_error(fine.final.rho, coarse.final.rho))
        derived["errors"][key] = list(zip(hs, errs))
        derived["slopes"][key] = fit_slope(hs, errs)
        for i, (h, e) in enumerate(zip(hs, errs)):
            pair = fit_slope(hs[i - 1:i + 1], errs[i - 1:i + 1]) if i else math.nan
            rows.append(f"{key[0]},{key[1]:g},{key[2]},{h:g},{e:.6e},{pair:.4f}")
    rows.append("")
    rows.append("order,epsilon,dt_rule,fitted_slope")
    for key, s in derived["slopes"].items():
        rows.append(f"{key[0]},{key[1]:g},{key[2]},{s:.4f}")
    return runs, derived, {"convergence": "\n".join(rows) + "\n"}


def asymptotic_study(grid: Grid2D, rho0, c0, epsilons, dt: float, t_max: float, tol: float = 1e-10):
    """Advance the eps = 0 scheme and each eps > 0 scheme in lockstep.

    Returns ``(times, rho_err, c_err)``; the error arrays are indexed
    ``[eps index, time index]`` and hold ``sum |f^eps - f^0| dx dy``.  The c
    errors compare mean-free parts: on a periodic domain the mean of c^eps
    drifts like ``t <rho> / eps`` while c^0 is gauged to zero mean.
    """
    eps_list = [e for e in epsilons if e > 0]
    ref = SimState(grid, rho0.copy(), c0.copy())
    states = [SimState(grid, rho0.copy(), c0.copy()) for _ in eps_list]
    ref_cfg = SchemeConfig(epsilon=0.0, dt=dt, tol=tol)
    cfgs = [SchemeConfig(epsilon=e, dt=dt, tol=tol) for e in eps_list]
    n = step_count(t_max, dt)
    times = np.zeros(n + 1)
    rho_err = np.zeros((len(eps_list), n + 1))
    c_err = np.zeros((len(eps_list), n + 1))
    for k in range(1, n + 1):
        ref = step(ref, ref_cfg)
        cref = ref.conc - ref.conc.mean()
        times[k] = ref.time
        for i, cfg in enumerate(cfgs):
            states[i] = step(states[i], cfg)
            rho_err[i, k] = diag.l1_abs_error(states[i].rho, ref.rho, grid)
            c_err[i, k] = diag.l1_abs_error(states[i].conc - states[i].conc.mean(), cref, grid)
    return eps_list, times, rho_err, c_err


def layer_end_time(times, c_err_row, eps: float, threshold: float = 2.0) -> float:
    """First positive time at which ``c_err / eps`` drops to ``threshold``."""
    scaled = c_err_row / eps
    for t, v in zip(times[1:], scaled[1:]):
        if v <= threshold:
            return float(t)
    return math.inf


def _study_asymptotic(spec, threads):
    derived = {"ratios": {}, "layer_end": {}}
    tables = {}
    runs = []
    start = spec.post_layer_start if spec.post_layer_start is not None else 0.25 * spec.t_max
    for g, rule in itertools.product(spec.grids(), spec.dt_rules):
        dt = resolve_dt(rule, g)
        label = _label("asymptotic", n=g.nx, dt=rule)
        params = {"mesh": g.nx, "dt": dt}

        def job(g=g, dt=dt, label=label, params=params):
            rho0, c0 = initial_fields(spec, g)
            eps_list, times, re, ce = asymptotic_study(g, rho0, c0, spec.epsilons, dt, spec.t_max, spec.tol)
            return RunResult(label, params, extras={"eps": eps_list, "times": times, "rho_err": re, "c_err": ce})

        run = _guarded(label, params, job)
        runs.append(run)
        if not run.ok:
            continue
        eps_list, times, re, ce = (run.extras[k] for k in ("eps", "times", "rho_err", "c_err"))
        head = ["time"] + [f"rho_err_eps{e:g}" for e in eps_list] + [f"c_err_eps{e:g}" for e in eps_list]
        lines = [",".join(head)]
        for k, t in enumerate(times):
            lines.append(",".join([format(t, ".10g")] + [format(x, ".10e") for x in np.r_[re[:, k], ce[:, k]]]))
        derived.setdefault("data_files", {})[f"asymptotic_errors_dt{dt:g}"] = "\n".join(lines) + "\n"
        post = times >= start - 1e-12
        post[0] = False
        order_idx = np.argsort(eps_list)[::-1]
        for a, b in zip(order_idx[:-1], order_idx[1:]):
            ratio = re[a, post] / re[b, post]
            derived["ratios"][(dt, eps_list[a], eps_list[b])] = (float(ratio.min()), float(ratio.max()))
        for i, e in enumerate(eps_list):
            derived["layer_end"][(dt, e)] = layer_end_time(times, ce[i], e, spec.layer_threshold)
    rows = ["dt,eps_large,eps_small,min_ratio,max_ratio"]
    for (dt, e1, e2), (lo, hi) in derived["ratios"].items():
        rows.append(f"{dt:g},{e1:g},{e2:g},{lo:.4f},{hi:.4f}")
    rows += ["", "dt,epsilon,layer_end_time"]
    for (dt, e), t in derived["layer_end"].items():
        rows.append(f"{dt:g},{e:g},{t:.6g}")
    tables["asymptotic"] = "\n".join(rows) + "\n"
    return runs, derived, tables


def energy_violations(energies, rel_tol: float = 1e-8) -> int:
    e = np.asarray(energies, dtype=float)
    return int(np.count_nonzero(np.diff(e) > rel_tol * np.abs(e[:-1])))


def _study_energy(spec, threads):
    runs = _run_all([single_run(spec, *c) for c in _combos(spec)], threads)
    derived = {"violations": {}}
    rows = ["label,epsilon,initial_energy,final_energy,violations"]
    for r in runs:
        if not r.ok:
            continue
        energies = [r.initial.free_energy] + list(r.series.column("free_energy"))
        v = energy_violations(energies)
        derived["violations"][r.params["epsilon"]] = v
        rows.append(f"{r.label},{r.params['epsilon']:g},{energies[0]:.10g},{energies[-1]:.10g},{v}")
    return runs, derived, {"energy": "\n".join(rows) + "\n"}


def _study_blowup(spec, threads):
    runs = _run_all([single_run(spec, *c) for c in _combos(spec)], threads)
    derived = {"peaks": [], "ratios": []}
    rows = ["mesh,h,dt,peak_max_rho,growth_vs_previous,min_rho_over_run"]
    prev = None
    for r in runs:
        if not r.ok:
            prev = None
            continue
        peak = float(max(r.series.column("max_rho").max(), r.initial.max_rho))
        low = float(r.series.column("min_rho").min())
        ratio = peak / prev if prev else math.nan
        derived["peaks"].append((r.params["h"], peak))
        if prev:
            derived["ratios"].append(ratio)
        rows.append(f"{r.params['mesh']},{r.params['h']:g},{r.params['dt']:g},{peak:.8g},{ratio:.4f},{low:.3e}")
        prev = peak
    return runs, derived, {spec.kind: "\n".join(rows) + "\n"}


def _study_steady(spec, threads):
    jobs = []
    for g, rule, eps, m in itertools.product(spec.grids(), spec.dt_rules, spec.epsilons, spec.ms):
        jobs.append(single_run(spec, g, rule, eps, m, "first", stop=fixed_point_stop(spec.steady_tol)))
    runs = _run_all(jobs, threads)
    derived = {"distance": {}}
    rows = ["m,dt,steps,final_time,l1_distance_to_initial"]
    for r in runs:
        if not r.ok:
            continue
        rho0, _ = initial_fields(spec, r.final.grid)
        d = diag.total_mass(np.abs(r.final.rho - rho0), r.final.grid)
        derived["distance"][r.params["m"]] = d
        rows.append(f"{r.params['m']:g},{r.params['dt']:.6g},{r.final.step},{r.final.time:.6g},{d:.6e}")
    dist = [derived["distance"][m] for m in sorted(derived["distance"])]
    derived["strictly_decreasing"] = bool(all(a > b for a, b in zip(dist[:-1], dist[1:])))
    return runs, derived, {"steady": "\n".join(rows) + "\n"}


def two_species_run(spec, grid, dt_rule, eps) -> Callable[[], RunResult]:
    params = {"mesh": grid.nx, "h": grid.dx, "epsilon": eps, "dt_rule": dt_rule}
    label = _label("two_species", n=grid.nx, dt=dt_rule, eps=float(eps))

    def job():
        rho, conc = initial_fields(spec, grid)
        dt = resolve_dt(dt_rule, grid)
        params["dt"] = dt
        cfg = TwoSpeciesConfig(epsilon=eps, dt=dt, tol=spec.tol, **spec.species)
        state = TwoSpeciesState(grid, rho.copy(), rho.copy(), conc)
        final, series, snaps, initial = simulate(
            state, step_two_species, cfg, spec.t_max, spec.snapshot_times, spec.stride,
            recorder=diag.two_species_record,
        )
        return RunResult(label, params, series, initial, final, snaps)

    return lambda: _guarded(label, params, job)


def _study_two_species(spec, threads):
    jobs = [two_species_run(spec, g, rule, eps)
            for g, rule, eps in itertools.product(spec.grids(), spec.dt_rules, spec.epsilons)]
    runs = _run_all(jobs, threads)
    derived = {"peaks": [], "ratios": []}
    rows = ["mesh,h,dt,max_rho1,max_rho2,mass_drift1,mass_drift2,ratio_rho1,ratio_rho2"]
    prev = None
    for r in runs:
        if not r.ok:
            prev = None
            continue
        p1, p2 = float(r.final.rho1.max()), float(r.final.rho2.max())
        m0, m1 = r.initial.mass, r.series.records[-1].mass
        drift = [abs(b / a - 1.0) if a else 0.0 for a, b in zip(m0, m1)]
        ratios = (p1 / prev[0], p2 / prev[1]) if prev else (math.nan, math.nan)
        derived["peaks"].append((r.params["h"], p1, p2))
        if prev:
            derived["ratios"].append(ratios)
        rows.append(f"{r.params['mesh']},{r.params['h']:g},{r.params['dt']:g},{p1:.8g},{p2:.8g},"
                    f"{drift[0]:.3e},{drift[1]:.3e},{ratios[0]:.4f},{ratios[1]:.4f}")
        prev = (p1, p2)
    return runs, derived, {"two_species": "\n".join(rows) + "\n"}


_STUDIES = {
    "run": _study_run,
    "convergence": _study_convergence,
    "asymptotic": _study_asymptotic,
    "energy": _study_energy,
    "blowup_radial": _study_blowup,
    "blowup_cartesian": _study_blowup,
    "steady_subcritical": _study_steady,
    "two_species": _study_two_species,
}


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Execute every run of ``spec``; failures are captured per run."""
    runs, derived, tables = _STUDIES[spec.kind](spec, max(1, int(threads)))
    result = ExperimentResult(spec.kind, runs, derived, tables, derived.pop("data_files", {}))
    lines = [f"experiment: {spec.kind}", f"runs: {len(runs)}  failed: {len(result.failed)}", ""]
    for name, text in tables.items():
        lines.append(f"== {name} ==")
        lines.append(text.rstrip("\n"))
        lines.append("")
    for r in result.failed:
        lines.append(f"FAILED {r.label}: {r.error}")
    result.summary = "\n".join(lines).rstrip("\n") + "\n"
    return result
