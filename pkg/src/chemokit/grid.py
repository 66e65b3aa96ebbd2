"""Uniform periodic 2D grids, offset radial grids and initial-condition builders.

2D fields are numpy arrays of shape ``(ny, nx)`` indexed ``f[j, i]``, so the
C-order flattening puts node ``(i, j)`` at ``i + nx * j``.  Radial fields are
1D arrays of length ``nr + 1`` whose entry 0 is the ghost node at ``-dr/2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid2D:
    a: float
    b: float
    c: float
    d: float
    nx: int
    ny: int

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.nx

    @property
    def dy(self) -> float:
        return (self.d - self.c) / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def x(self) -> np.ndarray:
        return self.a + self.dx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.c + self.dy * np.arange(self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(ny, nx)`` arrays."""
        return np.meshgrid(self.x, self.y, indexing="xy")

    def left(self, i: int) -> int:
        return (i - 1) % self.nx

    def right(self, i: int) -> int:
        return (i + 1) % self.nx

    def down(self, j: int) -> int:
        return (j - 1) % self.ny

    def up(self, j: int) -> int:
        return (j + 1) % self.ny

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


@dataclass(frozen=True)
class RadialGrid:
    L: float
    nr: int

    @property
    def dr(self) -> float:
        return self.L / self.nr

    @property
    def r(self) -> np.ndarray:
        """Node radii ``r_j = -dr/2 + j dr`` for ``j = 0..nr``."""
        return -0.5 * self.dr + self.dr * np.arange(self.nr + 1)

    @property
    def size(self) -> int:
        return self.nr + 1

    def zeros(self) -> np.ndarray:
        return np.zeros(self.nr + 1)


@dataclass
class Field2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)


@dataclass
class RadialField:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.size)
        apply_ghost(self.values)


def make_grid2d(a: float, b: float, c: float, d: float, nx: int, ny: int) -> Grid2D:
    if not (b > a and d > c):
        raise ValueError(f"domain extents must be positive, got [{a},{b}]x[{c},{d}]")
    if int(nx) != nx or int(ny) != ny or nx < 3 or ny < 3:
        raise ValueError(f"need at least 3 points per axis, got nx={nx}, ny={ny}")
    return Grid2D(float(a), float(b), float(c), float(d), int(nx), int(ny))


def make_radial_grid(L: float, nr: int) -> RadialGrid:
    if not L > 0:
        raise ValueError(f"outer radius must be positive, got L={L}")
    if int(nr) != nr or nr < 3:
        raise ValueError(f"need at least 3 radial points, got nr={nr}")
    return RadialGrid(float(L), int(nr))


def apply_ghost(f: np.ndarray) -> np.ndarray:
    """Impose the discrete Neumann condition at r=0 in place."""
    f[0] = f[1]
    return f


def laplacian(grid: Grid2D, f: np.ndarray) -> np.ndarray:
    """Periodic five-point Laplacian."""
    return (
        (np.roll(f, 1, axis=1) - 2.0 * f + np.roll(f, -1, axis=1)) / grid.dx**2
        + (np.roll(f, 1, axis=0) - 2.0 * f + np.roll(f, -1, axis=0)) / grid.dy**2
    )


def centered_gradient(grid: Grid2D, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / (2.0 * grid.dx)
    gy = (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * grid.dy)
    return gx, gy


def discrete_gradient_l2(field: Field2D | np.ndarray, grid: Grid2D | None = None) -> float:
    """L2 norm of the centered-difference gradient, ``sqrt(sum |grad f|^2 dx dy)``."""
    grid, f = _unpack(field, grid)
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    gx, gy = centered_gradient(grid, f)
    return float(np.sqrt(np.sum(gx * gx + gy * gy) * grid.cell_area))


def radial_gradient_l2(grid: RadialGrid, f: np.ndarray) -> float:
    """Radial counterpart of :func:`discrete_gradient_l2` with ``2 pi r dr`` quadrature."""
    ext = np.append(f, f[-1])
    g = (ext[2:] - ext[:-2]) / (2.0 * grid.dr)
    r = grid.r[1:]
    return float(np.sqrt(2.0 * np.pi * np.sum(r * g * g) * grid.dr))


def _unpack(field, grid):
    if isinstance(field, (Field2D, RadialField)):
        return field.grid, field.values
    if grid is None:
        raise TypeError("a grid is required when passing a bare array")
    return grid, np.asarray(field, dtype=float)


# -- initial conditions -------------------------------------------------------

IC_KINDS = ("gaussian", "indicator_disc", "indicator_annuli", "indicator_twobump")


def build_initial_condition(grid: Grid2D | RadialGrid, kind: str, **params) -> Field2D | RadialField:
    """Sample an initial profile at the grid nodes.

    ``gaussian``: ``amplitude * exp(-rate * |x - center|^2)``.
    ``indicator_disc``: ``value`` where ``r^2 <= radius2``.
    ``indicator_annuli``: ``value`` where ``r^2`` lies in any open interval of
    ``bands`` (default the double annulus ``(0.5, 1), (1.5, 2)``).
    ``indicator_twobump``: ``value`` on the two rectangles
    ``[-1,-0.1]x[0.1,1]`` and ``[0,1]x[-1,0]`` (2D only).
    """
    if kind not in IC_KINDS:
        raise ValueError(f"unknown initial condition kind {kind!r}")
    amp = float(params.get("amplitude", params.get("value", 1.0)))
    if amp < 0:
        raise ValueError(f"amplitude must be nonnegative, got {amp}")

    radial = isinstance(grid, RadialGrid)
    if radial:
        r2 = grid.r**2
        xx = yy = None
    else:
        cx, cy = params.get("center", (0.0, 0.0))
        xx, yy = grid.mesh()
        xx = xx - cx
        yy = yy - cy
        r2 = xx**2 + yy**2

    if kind == "gaussian":
        rate = float(params.get("rate", 1.0))
        values = amp * np.exp(-rate * r2)
    elif kind == "indicator_disc":
        radius2 = float(params.get("radius2", 0.1))
        values = np.where(r2 <= radius2, amp, 0.0)
    elif kind == "indicator_annuli":
        bands = params.get("bands", ((0.5, 1.0), (1.5, 2.0)))
        inside = np.zeros_like(r2, dtype=bool)
        for lo, hi in bands:
            inside |= (r2 > lo) & (r2 < hi)
        values = np.where(inside, amp, 0.0)
    else:
        if radial:
            raise ValueError("indicator_twobump is not radially symmetric")
        first = (xx >= -1.0) & (xx <= -0.1) & (yy >= 0.1) & (yy <= 1.0)
        second = (xx >= 0.0) & (xx <= 1.0) & (yy >= -1.0) & (yy <= 0.0)
        values = np.where(first | second, amp, 0.0)

    if radial:
        return RadialField(grid, values)
    return Field2D(grid, values)
