"""Uniform 2-D grid, node-centered fields, quadrature and finite-difference calculus.

Node values are stored as (ny, nx) arrays; the canonical flat ordering is
row-major with index = iy * nx + ix, which is also the CSV row order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError, ValidationError

#: header used by every field CSV written or read by this package
FIELD_CSV_HEADER = ["ix", "iy", "x", "y", "value"]


def _fmt(x: float) -> str:
    """Shortest round-trip decimal form; keeps CSV output byte-reproducible."""
    return repr(float(x))


@dataclass(frozen=True)
class Grid2D:
    """Uniform rectangular grid of nx * ny nodes spanning [x_min,x_max] x [y_min,y_max] (mm)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.x_min < self.x_max):
            raise ValidationError(f"grid: x_min must be < x_max, got [{self.x_min}, {self.x_max}]")
        if not (self.y_min < self.y_max):
            raise ValidationError(f"grid: y_min must be < y_max, got [{self.y_min}, {self.y_max}]")
        if self.nx < 3 or self.ny < 3:
            raise ValidationError(f"grid: nx and ny must be >= 3, got nx={self.nx}, ny={self.ny}")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @cached_property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @cached_property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) node coordinate arrays, each (ny, nx)."""
        return np.meshgrid(self.xs, self.ys)

    @cached_property
    def nodes(self) -> np.ndarray:
        """All node coordinates as an (n_nodes, 2) array in flat row-major order."""
        X, Y = self.mesh
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights per node, shape (ny, nx); sums to the domain area."""
        wx = np.full(self.nx, self.hx)
        wx[0] = wx[-1] = self.hx / 2
        wy = np.full(self.ny, self.hy)
        wy[0] = wy[-1] = self.hy / 2
        return np.outer(wy, wx)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return (
            (p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
            & (p[:, 1] >= self.y_min) & (p[:, 1] <= self.y_max)
        )


def _as_node_values(grid: Grid2D, values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape == (grid.n_nodes,):
        arr = arr.reshape(grid.ny, grid.nx)
    if arr.shape != (grid.ny, grid.nx):
        raise ValidationError(
            f"field values must have shape ({grid.ny}, {grid.nx}) or ({grid.n_nodes},), got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("field values must be finite")
    return arr


@dataclass
class ScalarField:
    """One real value per grid node."""

    grid: Grid2D
    values: np.ndarray  # (ny, nx)

    def __post_init__(self):
        self.values = _as_node_values(self.grid, self.values)


@dataclass
class VectorField:
    """One 2-vector per grid node, stored as separate x and y components."""

    grid: Grid2D
    vx: np.ndarray  # (ny, nx)
    vy: np.ndarray  # (ny, nx)

    def __post_init__(self):
        self.vx = _as_node_values(self.grid, self.vx)
        self.vy = _as_node_values(self.grid, self.vy)

    def max_norm(self) -> float:
        """max over nodes of the sup-norm |v|_inf."""
        return float(np.maximum(np.abs(self.vx), np.abs(self.vy)).max())


@dataclass
class DensityField(ScalarField):
    """Nonnegative scalar field with trapezoidal mass 1 (probability density per mm^2)."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0):
            raise ValidationError(
                f"density must be nonnegative, min value {self.values.min():.3e}"
            )
        mass = float(np.sum(self.values * self.grid.quad_weights))
        if abs(mass - 1.0) > 1e-9:
            raise ValidationError(f"density mass must be 1 within 1e-9, got {mass!r}")

    @property
    def node_mass(self) -> np.ndarray:
        """Probability mass carried by each node (density times quadrature weight)."""
        return self.values * self.grid.quad_weights


def field_from_function(grid: Grid2D, fn) -> ScalarField:
    """Sample fn(x, y) at the nodes; fn must accept broadcast arrays."""
    X, Y = grid.mesh
    return ScalarField(grid, np.broadcast_to(fn(X, Y), (grid.ny, grid.nx)).copy())


def integrate(f: ScalarField) -> float:
    """Trapezoidal quadrature of f over the domain; exact for bilinear fields."""
    return float(np.sum(f.values * f.grid.quad_weights))


def gradient(f: ScalarField) -> VectorField:
    """Second-order gradient: central differences inside, one-sided at the boundary."""
    gy, gx = np.gradient(f.values, f.grid.hy, f.grid.hx, edge_order=2)
    return VectorField(f.grid, gx, gy)


def divergence(v: VectorField) -> ScalarField:
    """Second-order divergence with the same stencil family as gradient."""
    dvx = np.gradient(v.vx, v.grid.hx, axis=1, edge_order=2)
    dvy = np.gradient(v.vy, v.grid.hy, axis=0, edge_order=2)
    return ScalarField(v.grid, dvx + dvy)


def _second_derivative(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    # one-sided second-order second derivative at the edges
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def laplacian(f: ScalarField) -> ScalarField:
    """5-point Laplacian on interior nodes, one-sided second-order at the boundary."""
    if f.grid.nx < 4 or f.grid.ny < 4:
        raise ValidationError("laplacian needs nx, ny >= 4 for boundary stencils")
    lap = _second_derivative(f.values, f.grid.hx, axis=1) + _second_derivative(
        f.values, f.grid.hy, axis=0
    )
    return ScalarField(f.grid, lap)


def interpolate(f: ScalarField, points) -> np.ndarray | float:
    """Bilinear interpolation of f at one point (2,) or many points (m, 2).

    Raises DomainError for points outside the grid rectangle.
    """
    g = f.grid
    p = np.atleast_2d(np.asarray(points, dtype=float))
    inside = g.contains(p)
    if not np.all(inside):
        bad = p[~inside][0]
        raise DomainError(f"point ({bad[0]}, {bad[1]}) is outside the grid domain")
    tx = (p[:, 0] - g.x_min) / g.hx
    ty = (p[:, 1] - g.y_min) / g.hy
    ix = np.clip(tx.astype(int), 0, g.nx - 2)
    iy = np.clip(ty.astype(int), 0, g.ny - 2)
    fx = tx - ix
    fy = ty - iy
    v = f.values
    out = (
        v[iy, ix] * (1 - fx) * (1 - fy)
        + v[iy, ix + 1] * fx * (1 - fy)
        + v[iy + 1, ix] * (1 - fx) * fy
        + v[iy + 1, ix + 1] * fx * fy
    )
    if np.ndim(points) == 1:
        return float(out[0])
    return out


def normalize(f: ScalarField) -> DensityField:
    """Scale a nonnegative field so its trapezoidal mass is exactly 1."""
    if np.any(f.values < 0):
        raise ValidationError(
            f"cannot normalize a field with negative entries (min {f.values.min():.3e})"
        )
    mass = integrate(f)
    if mass <= 0:
        raise ValidationError(f"cannot normalize a field with nonpositive mass {mass!r}")
    return DensityField(f.grid, f.values / mass)


def write_field_csv(f: ScalarField, path) -> None:
    """Write `ix,iy,x,y,value`, one row per node, flat row-major order."""
    g = f.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_CSV_HEADER)
        for iy in range(g.ny):
            for ix in range(g.nx):
                w.writerow([ix, iy, _fmt(g.xs[ix]), _fmt(g.ys[iy]), _fmt(f.values[iy, ix])])


def read_field_csv(path) -> ScalarField:
    """Rebuild a ScalarField (grid geometry included) from write_field_csv output."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != FIELD_CSV_HEADER:
        raise ValidationError(f"{path}: not a field CSV (bad header)")
    data = np.array([[float(c) for c in row] for row in rows[1:]])
    nx = int(data[:, 0].max()) + 1
    ny = int(data[:, 1].max()) + 1
    if len(data) != nx * ny:
        raise ValidationError(f"{path}: expected {nx * ny} rows, got {len(data)}")
    grid = Grid2D(
        x_min=data[:, 2].min(), x_max=data[:, 2].max(),
        y_min=data[:, 3].min(), y_max=data[:, 3].max(),
        nx=nx, ny=ny,
    )
    values = np.empty((ny, nx))
    values[data[:, 1].astype(int), data[:, 0].astype(int)] = data[:, 4]
    return ScalarField(grid, values)
