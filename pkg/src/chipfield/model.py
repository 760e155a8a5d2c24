"""Capacitive coupling kernels, clamped control policy, and the controlled drift.

The interaction between chiplets is mediated by distance-dependent capacitance
kernels C(r) (erf-sum form) and the electrode voltage field.  Every chiplet sees
the capacitance-weighted average voltage of its neighbourhood; the pair
potentials are built from squared voltage mismatches, and the drift is the
negative grid gradient of the density-convolved potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DomainError, ValidationError
from .grid import (
    DensityField,
    Grid2D,
    ScalarField,
    VectorField,
    gradient,
    interpolate,
)

#: defensive floor on the weighted-control denominator; never active for valid densities
UBAR_DENOMINATOR_FLOOR = 1e-15


@dataclass(frozen=True)
class CapacitanceModel:
    """Erf-sum capacitance kernel C(r) = sum_i a_i [erf((r+delta)/c_i) - erf((r-delta)/c_i)].

    terms: (amplitude, length_scale_mm) pairs; delta: half electrode pitch (mm);
    role: "cc" for chiplet-to-chiplet, "ce" for chiplet-to-electrode.
    """

    terms: tuple[tuple[float, float], ...]
    delta: float
    role: str

    def __post_init__(self):
        if self.role not in ("cc", "ce"):
            raise ValidationError(f"capacitance role must be 'cc' or 'ce', got {self.role!r}")
        if self.delta <= 0:
            raise ValidationError(f"capacitance delta must be positive, got {self.delta!r}")
        if not self.terms:
            raise ValidationError("capacitance model needs at least one term")
        amps = [a for a, _ in self.terms]
        if any(a < 0 for a in amps) or not any(a > 0 for a in amps):
            raise ValidationError("capacitance amplitudes must be >= 0 with at least one > 0")
        if any(c <= 0 for _, c in self.terms):
            raise ValidationError("capacitance length scales must be positive")


def capacitance(model: CapacitanceModel, r) -> np.ndarray | float:
    """Evaluate the kernel at distances r >= 0 (mm); positive and decreasing in r."""
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0):
        raise DomainError(f"capacitance distance must be >= 0, got min {arr.min()!r}")
    out = np.zeros_like(arr)
    for a, c in model.terms:
        out = out + a * (erf((arr + model.delta) / c) - erf((arr - model.delta) / c))
    if np.ndim(r) == 0:
        return float(out)
    return out


def sample_capacitance_model(
    role: str, delta: float, n_terms: int = 3, seed: int | None = None, rng=None
) -> CapacitanceModel:
    """Draw amplitudes and length scales uniformly from [0, 1] (seeded)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    terms = tuple((float(rng.uniform()), float(rng.uniform())) for _ in range(n_terms))
    return CapacitanceModel(terms=terms, delta=delta, role=role)


@dataclass(frozen=True)
class ControlPolicy:
    """Linear voltage policy u(x) = <gains, x> clamped into [u_min, u_max] volts."""

    gains: tuple[float, float]  # V/mm
    u_min: float = -400.0
    u_max: float = 400.0

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValidationError(f"voltage bounds need u_min < u_max, got [{self.u_min}, {self.u_max}]")
        if not all(np.isfinite(self.gains)):
            raise ValidationError(f"control gains must be finite, got {self.gains!r}")


def eval_control(policy: ControlPolicy, points, t: float = 0.0) -> np.ndarray | float:
    """Clamped voltage at one point (2,) or many points (m, 2); time-invariant policy."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    u = p @ np.asarray(policy.gains, dtype=float)
    u = np.clip(u, policy.u_min, policy.u_max)
    if np.ndim(points) == 1:
        return float(u[0])
    return u


@dataclass
class PairKernels:
    """Node-pair capacitance matrices, precomputed once per (grid, kernels) pair.

    Building these is the only O(N^2) erf evaluation; every context sharing the
    same grid and capacitance models should reuse one instance.
    """

    grid: Grid2D
    ccap: CapacitanceModel
    ecap: CapacitanceModel
    cc_matrix: np.ndarray = field(init=False)  # (N, N) C_cc(|x_i - x_j|)
    ce_matrix: np.ndarray = field(init=False)  # (N, N) C_ce(|x_i - x_j|)

    def __post_init__(self):
        nodes = self.grid.nodes
        diff = nodes[:, None, :] - nodes[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        self.cc_matrix = capacitance(self.ccap, r)
        self.ce_matrix = capacitance(self.ecap, r)


def compute_ubar(
    density: DensityField,
    policy: ControlPolicy,
    ecap: CapacitanceModel,
    t: float = 0.0,
    kernels: PairKernels | None = None,
) -> ScalarField:
    """Capacitance-weighted average control seen at every node.

    ubar(x) = int C_ce(|x-y|) u(y) rho(y) dy / int C_ce(|x-y|) rho(y) dy by node
    quadrature; the result is a convex combination of clamped voltages and is
    clipped into [u_min, u_max] to absorb roundoff.
    """
    grid = density.grid
    if not np.all(np.isfinite(density.values)):
        raise ValidationError("density contains non-finite values")
    if kernels is None:
        kernels = PairKernels(grid, ccap=ecap, ecap=ecap)
    K = kernels.ce_matrix
    m = density.node_mass.ravel()
    u = eval_control(policy, grid.nodes, t)
    num = K @ (m * u)
    den = np.maximum(K @ m, UBAR_DENOMINATOR_FLOOR)
    ubar = np.clip(num / den, policy.u_min, policy.u_max)
    return ScalarField(grid, ubar.reshape(grid.ny, grid.nx))


@dataclass
class InteractionContext:
    """Frozen snapshot of everything the potentials need at one instant.

    Immutable after construction: the weighted-control cache is built eagerly
    from the supplied density, so a new context must be made whenever the
    density changes.
    """

    density: DensityField
    policy: ControlPolicy
    ccap: CapacitanceModel
    ecap: CapacitanceModel
    t: float = 0.0
    kernels: PairKernels | None = None
    ubar: ScalarField = field(init=False)
    node_control: np.ndarray = field(init=False)  # u at nodes, flat
    node_mass: np.ndarray = field(init=False)     # rho * quad weight, flat

    def __post_init__(self):
        if self.kernels is None:
            self.kernels = PairKernels(self.density.grid, self.ccap, self.ecap)
        elif self.kernels.grid is not self.density.grid and self.kernels.grid != self.density.grid:
            raise ValidationError("pair kernels were built for a different grid")
        self.ubar = compute_ubar(
            self.density, self.policy, self.ecap, self.t, kernels=self.kernels
        )
        self.node_control = eval_control(self.policy, self.density.grid.nodes, self.t)
        self.node_mass = self.density.node_mass.ravel()

    @property
    def grid(self) -> Grid2D:
        return self.density.grid


def phi_cc(x, y, ctx: InteractionContext) -> float:
    """Chiplet-to-chiplet pair potential 0.5 C_cc(|x-y|) (ubar(y) - ubar(x))^2.

    Symmetric in (x, y) and nonnegative; off-node points use the bilinear
    interpolant of the cached weighted control.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ub_x = interpolate(ctx.ubar, x)
    ub_y = interpolate(ctx.ubar, y)
    r = float(np.linalg.norm(x - y))
    return 0.5 * capacitance(ctx.ccap, r) * (ub_y - ub_x) ** 2


def phi_ce(x, y, ctx: InteractionContext) -> float:
    """Chiplet-to-electrode pair potential 0.5 C_ce(|x-y|) (u(y) - ubar(x))^2.

    Not symmetric in general: x enters through the weighted control, y through
    the raw policy voltage.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ub_x = interpolate(ctx.ubar, x)
    u_y = eval_control(ctx.policy, y, ctx.t)
    r = float(np.linalg.norm(x - y))
    return 0.5 * capacitance(ctx.ecap, r) * (u_y - ub_x) ** 2


def convolve_potential(ctx: InteractionContext) -> ScalarField:
    """Density-weighted potential sum (rho * phi)(x_i) = sum_j phi(x_i, x_j) m_j at all nodes.

    Pairwise voltage differences are formed explicitly so a constant control
    yields an exactly zero field.
    """
    grid = ctx.grid
    ub = ctx.ubar.values.ravel()
    u = ctx.node_control
    m = ctx.node_mass
    d_cc = ub[None, :] - ub[:, None]
    d_ce = u[None, :] - ub[:, None]
    vals = 0.5 * ((ctx.kernels.cc_matrix * d_cc**2) @ m + (ctx.kernels.ce_matrix * d_ce**2) @ m)
    return ScalarField(grid, vals.reshape(grid.ny, grid.nx))


def drift_field(ctx: InteractionContext) -> VectorField:
    """Controlled drift f = -grad (rho * phi), by quadrature then finite differences."""
    g = gradient(convolve_potential(ctx))
    return VectorField(ctx.grid, -g.vx, -g.vy)


def drift_bound_report(ctx: InteractionContext) -> float:
    """Numerical sup-norm bound of the drift over the nodes (finite by construction)."""
    return drift_field(ctx).max_norm()
