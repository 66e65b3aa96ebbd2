"""Experiment configuration, time series and file output.

A config file holds one or more sections introduced by ``[kind]``; each line in
a section is ``key = value`` and ``#`` starts a comment.  List-valued keys take
comma-separated values.  Example::

    [convergence]
    domain = -5,5,-5,5
    meshes = 10,20,40,80
    dt = match_dx
    t_max = 5
    epsilon = 1e-4,1e-2,1
"""

from __future__ import annotations

import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import DiagnosticsRecord
from .grid import Grid2D, RadialGrid

KINDS = (
    "run",
    "convergence",
    "asymptotic",
    "energy",
    "blowup_radial",
    "blowup_cartesian",
    "steady_subcritical",
    "two_species",
)
RADIAL_KINDS = ("blowup_radial",)

CSV_HEADER = "time,mass,free_energy,max_rho,min_rho,dt_grad_rho,small_data_lhs,cg_iters"

# default snapshot times follow the figures each study reproduces; None means t_max
DEFAULT_SNAPSHOTS = {
    "run": (0.0, None),
    "convergence": (None,),
    "asymptotic": (),
    "energy": (),
    "blowup_radial": (0.0, None),
    "blowup_cartesian": (0.0, None),
    "steady_subcritical": (0.0, None),
    "two_species": (None,),
}


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


_FLOAT_KEYS = {
    "t_max", "radius", "amplitude", "rate", "value", "radius2",
    "c_amplitude", "c_rate", "c_scale",
    "chi1", "chi2", "mu1", "mu2", "alpha1", "alpha2", "beta", "D",
    "tol", "steady_tol", "dt_safety", "layer_threshold", "post_layer_start",
}
_INT_KEYS = {"nx", "ny", "nr", "stride"}
_FLOAT_LIST_KEYS = {"domain", "epsilon", "m", "snapshot_times", "center"}
_INT_LIST_KEYS = {"meshes"}
_STR_KEYS = {"ic", "c_ic", "scheme", "out_dir"}
_STR_LIST_KEYS = {"dt", "order"}
KNOWN_KEYS = _FLOAT_KEYS | _INT_KEYS | _FLOAT_LIST_KEYS | _INT_LIST_KEYS | _STR_KEYS | _STR_LIST_KEYS

IC_NAMES = ("gaussian", "indicator_disc", "indicator_annuli", "indicator_twobump")
C_IC_NAMES = ("zero", "gaussian", "scaled", "screened_poisson", "elliptic")
SCHEMES = ("semi_implicit", "newton")
_DT_RULE = re.compile(r"^(match_dx|dx_over_(?P<k>[0-9.eE+-]+)|dx2_times_(?P<k2>[0-9.eE+-]+)|stable)$")


@dataclass
class ExperimentSpec:
    kind: str
    domain: tuple[float, float, float, float] | None = None
    radius: float | None = None
    meshes: list[int] = field(default_factory=list)
    ny: int | None = None
    dt_rules: list[str] = field(default_factory=lambda: ["match_dx"])
    t_max: float = 1.0
    epsilons: list[float] = field(default_factory=lambda: [0.0])
    ms: list[float] = field(default_factory=lambda: [1.0])
    orders: list[str] = field(default_factory=lambda: ["first"])
    scheme: str = "semi_implicit"
    ic: dict = field(default_factory=lambda: {"kind": "gaussian"})
    c_ic: dict = field(default_factory=lambda: {"kind": "zero"})
    species: dict = field(default_factory=dict)
    snapshot_times: list[float] = field(default_factory=list)
    stride: int = 1
    out_dir: str | None = None
    tol: float = 1e-10
    steady_tol: float = 1e-10
    dt_safety: float = 0.9
    layer_threshold: float = 2.0
    post_layer_start: float | None = None

    @property
    def radial(self) -> bool:
        return self.radius is not None

    def grids(self) -> list[Grid2D | RadialGrid]:
        from .grid import make_grid2d, make_radial_grid

        if self.radial:
            return [make_radial_grid(self.radius, n) for n in self.meshes]
        a, b, c, d = self.domain
        return [make_grid2d(a, b, c, d, n, self.ny or n) for n in self.meshes]


def spacing(grid: Grid2D | RadialGrid) -> float:
    return grid.dr if isinstance(grid, RadialGrid) else grid.dx


def resolve_dt(rule: str, grid: Grid2D | RadialGrid, stable_dt: float | None = None, safety: float = 0.9) -> float:
    """Turn a dt rule into a step size.

    ``match_dx``: dt = dx.  ``dx_over_K``: dt = dx / K.  ``dx2_times_K``:
    dt = K dx^2.  ``stable``: ``safety`` times the supplied stability bound.
    Anything else must parse as a positive number.
    """
    h = spacing(grid)
    mt = _DT_RULE.match(rule)
    if mt is None:
        try:
            value = float(rule)
        except ValueError:
            raise ConfigError(f"unrecognised dt rule {rule!r}") from None
        if not value > 0 or not math.isfinite(value):
            raise ConfigError(f"dt must be positive, got {rule!r}")
        return value
    if rule == "match_dx":
        return h
    if rule == "stable":
        if stable_dt is None:
            raise ConfigError("dt=stable is only meaningful for degenerate (m > 1) runs")
        return safety * stable_dt if math.isfinite(stable_dt) else h
    k = float(mt.group("k") or mt.group("k2"))
    if not k > 0:
        raise ConfigError(f"dt rule factor must be positive in {rule!r}")
    return h / k if rule.startswith("dx_over_") else k * h * h


def _parse_value(key: str, raw: str, lineno: int):
    def num(tok, cast=float):
        try:
            v = cast(tok.strip())
        except ValueError:
            raise ConfigError(f"line {lineno}: key {key!r}: cannot parse number {tok.strip()!r}") from None
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"line {lineno}: key {key!r}: value must be finite")
        return v

    parts = [p for p in raw.split(",")]
    if key in _FLOAT_KEYS:
        return num(raw)
    if key in _INT_KEYS:
        return num(raw, int)
    if key in _FLOAT_LIST_KEYS:
        return [num(p) for p in parts]
    if key in _INT_LIST_KEYS:
        return [num(p, int) for p in parts]
    if key in _STR_LIST_KEYS:
        return [p.strip() for p in parts if p.strip()]
    return raw.strip()


def _split_sections(text: str) -> dict[str, list[tuple[int, str, str]]]:
    sections: dict[str, list] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in KINDS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            if current in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: entry outside of a [section]")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        sections[current].append((lineno, key, raw))
    return sections


def parse_config(text: str, kind: str | None = None) -> ExperimentSpec:
    """Parse one section of a config file into a validated :class:`ExperimentSpec`.

    With ``kind`` the matching section is used; otherwise the text must hold
    exactly one section.
    """
    sections = _split_sections(text)
    if not sections:
        raise ConfigError("missing section: expected a [kind] header")
    if kind is None:
        if len(sections) > 1:
            raise ConfigError(f"several sections present ({', '.join(sections)}); choose one")
        kind = next(iter(sections))
    if kind not in sections:
        raise ConfigError(f"missing section [{kind}]")

    values: dict = {}
    lines: dict = {}
    for lineno, key, raw in sections[kind]:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        values[key] = _parse_value(key, raw, lineno)
        lines[key] = lineno
    return _build_spec(kind, values, lines)


def _where(key, lines):
    return f"line {lines[key]}: " if key in lines else ""


def _build_spec(kind: str, v: dict, lines: dict) -> ExperimentSpec:
    def need(key):
        if key not in v:
            raise ConfigError(f"missing required key {key!r} in [{kind}]")
        return v[key]

    spec = ExperimentSpec(kind=kind)
    if "radius" in v:
        if kind not in ("run", "steady_subcritical", "blowup_radial"):
            raise ConfigError(f"{_where('radius', lines)}key 'radius' is not supported by [{kind}]")
        if not v["radius"] > 0:
            raise ConfigError(f"{_where('radius', lines)}key 'radius' must be positive")
        spec.radius = v["radius"]
    elif kind in RADIAL_KINDS:
        need("radius")
    else:
        dom = need("domain")
        if len(dom) != 4 or not (dom[1] > dom[0] and dom[3] > dom[2]):
            raise ConfigError(f"{_where('domain', lines)}key 'domain' must be a,b,c,d with b>a and d>c")
        spec.domain = tuple(dom)

    if "meshes" in v:
        spec.meshes = v["meshes"]
    elif "nr" in v:
        spec.meshes = [v["nr"]]
    elif "nx" in v:
        spec.meshes = [v["nx"]]
    else:
        raise ConfigError(f"missing required key 'meshes' (or nx/nr) in [{kind}]")
    if "ny" in v:
        spec.ny = v["ny"]
    if not spec.meshes or any(n < 3 for n in spec.meshes):
        raise ConfigError(f"{_where('meshes', lines)}mesh counts must be >= 3")
    if kind == "convergence" and len(spec.meshes) < 2:
        raise ConfigError("convergence needs at least two meshes")

    spec.t_max = need("t_max")
    if not spec.t_max > 0:
        raise ConfigError(f"{_where('t_max', lines)}key 't_max' must be positive")

    if "dt" in v:
        spec.dt_rules = v["dt"]
        probe = spec.grids()[0]
        for rule in spec.dt_rules:
            try:
                resolve_dt(rule, probe, stable_dt=1.0)
            except ConfigError as exc:
                raise ConfigError(f"{_where('dt', lines)}key 'dt': {exc}") from None

    if "epsilon" in v:
        spec.epsilons = v["epsilon"]
    if any(e < 0 for e in spec.epsilons):
        raise ConfigError(f"{_where('epsilon', lines)}key 'epsilon' must be >= 0")
    if "m" in v:
        spec.ms = v["m"]
    if any(m < 1 for m in spec.ms):
        raise ConfigError(f"{_where('m', lines)}key 'm' must be >= 1")
    if "order" in v:
        spec.orders = v["order"]
    for o in spec.orders:
        if o not in ("first", "bdf2"):
            raise ConfigError(f"{_where('order', lines)}key 'order': unknown value {o!r}")
    if "scheme" in v:
        if v["scheme"] not in SCHEMES:
            raise ConfigError(f"{_where('scheme', lines)}key 'scheme': unknown value {v['scheme']!r}")
        spec.scheme = v["scheme"]

    ic_kind = v.get("ic", "gaussian")
    if ic_kind not in IC_NAMES:
        raise ConfigError(f"{_where('ic', lines)}key 'ic': unknown value {ic_kind!r}")
    spec.ic = {"kind": ic_kind}
    for key in ("amplitude", "rate", "value", "radius2", "center"):
        if key in v:
            spec.ic[key] = tuple(v[key]) if key == "center" else v[key]
    if spec.ic.get("amplitude", 0.0) < 0 or spec.ic.get("value", 0.0) < 0:
        raise ConfigError("initial amplitude must be nonnegative")

    c_kind = v.get("c_ic", "zero")
    if c_kind not in C_IC_NAMES:
        raise ConfigError(f"{_where('c_ic', lines)}key 'c_ic': unknown value {c_kind!r}")
    spec.c_ic = {"kind": c_kind}
    for key, target in (("c_amplitude", "amplitude"), ("c_rate", "rate"), ("c_scale", "scale")):
        if key in v:
            spec.c_ic[target] = v[key]

    for key in ("chi1", "chi2", "mu1", "mu2", "alpha1", "alpha2", "beta", "D"):
        if key in v:
            if not v[key] > 0:
                raise ConfigError(f"{_where(key, lines)}key {key!r} must be positive")
            spec.species[key] = v[key]

    if "snapshot_times" in v:
        spec.snapshot_times = sorted(v["snapshot_times"])
    else:
        spec.snapshot_times = [spec.t_max if t is None else t for t in DEFAULT_SNAPSHOTS[kind]]
    if any(t < 0 for t in spec.snapshot_times):
        raise ConfigError("snapshot times must be >= 0")
    for key in ("stride", "tol", "steady_tol", "dt_safety", "layer_threshold"):
        if key in v:
            if not v[key] > 0:
                raise ConfigError(f"{_where(key, lines)}key {key!r} must be positive")
            setattr(spec, key, v[key])
    if "post_layer_start" in v:
        spec.post_layer_start = v["post_layer_start"]
    spec.out_dir = v.get("out_dir")
    return spec


# -- time series ------------------------------------------------------------------


@dataclass
class TimeSeries:
    records: list[DiagnosticsRecord] = field(default_factory=list)

    def append(self, rec: DiagnosticsRecord) -> None:
        if self.records and not rec.time > self.records[-1].time:
            raise ValueError(f"time must increase strictly: {rec.time} after {self.records[-1].time}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _mass_cell(m) -> str:
    if isinstance(m, tuple):
        return ";".join(_fmt(v) for v in m)
    return _fmt(m)


def series_to_csv(series: TimeSeries) -> str:
    rows = [CSV_HEADER]
    for r in series.records:
        rows.append(",".join((
            _fmt(r.time), _mass_cell(r.mass), _fmt(r.free_energy), _fmt(r.max_rho), _fmt(r.min_rho),
            _fmt(r.dt_grad_rho), _fmt(r.small_data_lhs), str(int(r.cg_iterations)),
        )))
    return "\n".join(rows) + "\n"


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def snapshot_text(values: np.ndarray, grid: Grid2D | RadialGrid, time: float) -> str:
    """Four header lines (grid kind, counts, spacings, time), then one value per line."""
    v = np.asarray(values, dtype=float).ravel()
    if isinstance(grid, RadialGrid):
        head = ["grid=radial", f"nr={grid.nr}", f"dr={_fmt(grid.dr)}", f"time={_fmt(time)}"]
    else:
        head = [
            "grid=cartesian",
            f"nx={grid.nx},ny={grid.ny}",
            f"dx={_fmt(grid.dx)},dy={_fmt(grid.dy)}",
            f"time={_fmt(time)}",
        ]
    return "\n".join(head + [_fmt(x) for x in v]) + "\n"


def write_snapshot(path: Path, values: np.ndarray, grid: Grid2D | RadialGrid, time: float) -> None:
    atomic_write(path, snapshot_text(values, grid, time))


def read_snapshot(path: Path) -> tuple[dict, np.ndarray]:
    """Inverse of :func:`write_snapshot`: ``(header, values)`` with 2D fields reshaped."""
    lines = Path(path).read_text().splitlines()
    if len(lines) < 4:
        raise ValueError(f"{path}: truncated snapshot header")
    header: dict = {}
    for line in lines[:4]:
        for item in line.split(","):
            key, val = item.split("=", 1)
            header[key] = val
    values = np.array([float(x) for x in lines[4:]])
    if header["grid"] == "cartesian":
        nx, ny = int(header["nx"]), int(header["ny"])
        if values.size != nx * ny:
            raise ValueError(f"{path}: expected {nx * ny} values, found {values.size}")
        values = values.reshape(ny, nx)
    else:
        nr = int(header["nr"])
        if values.size != nr + 1:
            raise ValueError(f"{path}: expected {nr + 1} values, found {values.size}")
    header["time"] = float(header["time"])
    return header, values


def write_outputs(result, out_dir: str | Path) -> list[Path]:
    """Write one CSV per run, every captured snapshot and ``summary.txt``."""
    out = Path(out_dir)
    written = []
    for run in result.runs:
        if run.series is not None and len(run.series):
            p = out / f"{run.label}.csv"
            atomic_write(p, series_to_csv(run.series))
            written.append(p)
        for (name, t), (values, grid) in sorted(run.snapshots.items()):
            p = out / "snapshots" / f"{run.label}_{name}_t{t:.6g}.csv"
            write_snapshot(p, values, grid, t)
            written.append(p)
    for name, text in {**result.tables, **result.data_files}.items():
        p = out / f"{name}.csv"
        atomic_write(p, text)
        written.append(p)
    p = out / "summary.txt"
    atomic_write(p, result.summary)
    written.append(p)
    return written
