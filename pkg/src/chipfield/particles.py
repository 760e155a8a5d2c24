"""Finite-population interacting SDE simulator.

Particles move under the controlled drift plus isotropic noise of strength
sqrt(2/beta).  The drift can be evaluated in two modes: "meanfield" pulls the
drift of a grid density (an InteractionContext) and interpolates it at the
particle positions; "empirical" differentiates the potential of the particle
cloud itself, with the empirical measure (1/n) sum_j delta_{x_j} replacing the
density in every nonlocal integral.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import BlowupError, DomainError, ValidationError
from .grid import DensityField, Grid2D, ScalarField, VectorField, interpolate, normalize
from .model import (
    CapacitanceModel,
    ControlPolicy,
    InteractionContext,
    capacitance,
    drift_field,
    eval_control,
)

PARTICLE_CSV_HEADER = ["step", "t", "particle_id", "x", "y"]

#: evaluation points processed per chunk in empirical mode (bounds the O(chunk * n) matrices)
_EMPIRICAL_CHUNK = 512


@dataclass
class ParticleEnsemble:
    """n particle positions (mm) at a common time, plus the RNG driving their noise."""

    positions: np.ndarray  # (n, 2)
    t: float
    rng: np.random.Generator

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValidationError(f"positions must be (n, 2), got {self.positions.shape}")
        if len(self.positions) < 1:
            raise ValidationError("ensemble needs at least one particle")

    @property
    def n(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class SdeConfig:
    """Step size, inverse temperature, seed and drift-mode knobs for the SDE loop.

    beta = math.inf runs the deterministic (noise-free) limit.
    """

    dt: float
    beta: float = 1.0
    seed: int = 0
    drift_mode: str = "meanfield"
    fd_step: float = 1e-3  # central-difference step (mm) for the empirical drift

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError(f"dt must be positive, got {self.dt!r}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta!r}")
        if self.drift_mode not in ("meanfield", "empirical"):
            raise ValidationError(f"drift_mode must be 'meanfield' or 'empirical', got {self.drift_mode!r}")
        if self.fd_step <= 0:
            raise ValidationError(f"fd_step must be positive, got {self.fd_step!r}")

    @property
    def noise_scale_per_sqrt_dt(self) -> float:
        return 0.0 if np.isinf(self.beta) else np.sqrt(2.0 / self.beta)


@dataclass(frozen=True)
class EmpiricalModel:
    """Policy and kernels needed to evaluate the drift from the particle cloud itself."""

    policy: ControlPolicy
    ccap: CapacitanceModel
    ecap: CapacitanceModel


def init_ensemble(mean, cov, n: int, seed: int) -> ParticleEnsemble:
    """Draw n i.i.d. Gaussian positions; reproducible for a given seed."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    mean = np.asarray(mean, dtype=float).reshape(2)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-12):
        raise ValidationError("covariance must be a symmetric 2x2 matrix")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValidationError("covariance must be positive definite") from None
    rng = np.random.default_rng(seed)
    positions = mean + rng.standard_normal((n, 2)) @ L.T
    return ParticleEnsemble(positions=positions, t=0.0, rng=rng)


def empirical_ubar(points, positions, policy: ControlPolicy, ecap: CapacitanceModel,
                   t: float = 0.0) -> np.ndarray:
    """Weighted control under the empirical measure: kernel-weighted mean voltage of the cloud."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    diff = p[:, None, :] - positions[None, :, :]
    K = capacitance(ecap, np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))
    u = eval_control(policy, positions, t)
    den = np.maximum(K.sum(axis=1), 1e-15)
    return np.clip((K @ u) / den, policy.u_min, policy.u_max)


def _empirical_potential(points, ens_positions, ubar_particles, model: EmpiricalModel,
                         t: float = 0.0) -> np.ndarray:
    """V(z) = (1/n) sum_j phi(z, x_j) with ubar taken from empirical sums."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    ub_p = empirical_ubar(p, ens_positions, model.policy, model.ecap, t)
    u_j = eval_control(model.policy, ens_positions, t)
    out = np.empty(len(p))
    for lo in range(0, len(p), _EMPIRICAL_CHUNK):
        hi = min(lo + _EMPIRICAL_CHUNK, len(p))
        diff = p[lo:hi, None, :] - ens_positions[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        d_cc = ubar_particles[None, :] - ub_p[lo:hi, None]
        d_ce = u_j[None, :] - ub_p[lo:hi, None]
        vals = 0.5 * (capacitance(model.ccap, r) * d_cc**2 + capacitance(model.ecap, r) * d_ce**2)
        out[lo:hi] = vals.mean(axis=1)
    return out


def _empirical_drift_many(points, ens: ParticleEnsemble, model: EmpiricalModel,
                          fd_step: float) -> np.ndarray:
    """Central-difference drift -grad V at many points, (m, 2)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    ubar_particles = empirical_ubar(ens.positions, ens.positions, model.policy, model.ecap, ens.t)
    h = fd_step
    shifts = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    stacked = (p[:, None, :] + shifts[None, :, :]).reshape(-1, 2)
    V = _empirical_potential(stacked, ens.positions, ubar_particles, model, ens.t).reshape(-1, 4)
    return np.column_stack([-(V[:, 0] - V[:, 1]) / (2 * h), -(V[:, 2] - V[:, 3]) / (2 * h)])


def empirical_drift(x, ens: ParticleEnsemble, policy: ControlPolicy, ccap: CapacitanceModel,
                    ecap: CapacitanceModel, fd_step: float = 1e-3) -> np.ndarray:
    """Drift at a single point under the empirical measure of the ensemble."""
    model = EmpiricalModel(policy=policy, ccap=ccap, ecap=ecap)
    return _empirical_drift_many(np.asarray(x, dtype=float).reshape(1, 2), ens, model, fd_step)[0]


def _reflect(vals: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Mirror-fold values into [lo, hi] (handles multiple crossings)."""
    period = 2.0 * (hi - lo)
    y = np.mod(vals - lo, period)
    y = np.where(y > (hi - lo), period - y, y)
    return lo + y


def euler_maruyama_step(
    ens: ParticleEnsemble,
    cfg: SdeConfig,
    interaction: InteractionContext | EmpiricalModel | VectorField | None,
    grid: Grid2D | None = None,
) -> ParticleEnsemble:
    """One Euler-Maruyama step x += f dt + sqrt(2 dt / beta) xi, reflecting at the walls.

    interaction=None runs pure diffusion.  Mean-field mode needs an
    InteractionContext built on the current grid density (or the already
    computed drift VectorField); empirical mode an EmpiricalModel.  The grid
    (for reflection) is taken from the context when not passed explicitly.
    """
    if grid is None:
        if isinstance(interaction, InteractionContext):
            grid = interaction.grid
        elif isinstance(interaction, VectorField):
            grid = interaction.grid
        else:
            raise ValidationError("a grid is required for boundary reflection")
    if isinstance(interaction, (InteractionContext, VectorField)):
        fld = interaction if isinstance(interaction, VectorField) else drift_field(interaction)
        drift = np.column_stack([
            interpolate(ScalarField(grid, fld.vx), ens.positions),
            interpolate(ScalarField(grid, fld.vy), ens.positions),
        ])
    elif isinstance(interaction, EmpiricalModel):
        drift = _empirical_drift_many(ens.positions, ens, interaction, cfg.fd_step)
    elif interaction is None:
        drift = np.zeros_like(ens.positions)
    else:
        raise ValidationError(f"unsupported interaction object {type(interaction).__name__}")

    new_pos = ens.positions + drift * cfg.dt
    scale = cfg.noise_scale_per_sqrt_dt * np.sqrt(cfg.dt)
    if scale > 0:
        new_pos = new_pos + scale * ens.rng.standard_normal(ens.positions.shape)
    bad = ~np.isfinite(new_pos).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise BlowupError(f"particle {idx} became non-finite at t={ens.t + cfg.dt!r}")
    new_pos[:, 0] = _reflect(new_pos[:, 0], grid.x_min, grid.x_max)
    new_pos[:, 1] = _reflect(new_pos[:, 1], grid.y_min, grid.y_max)
    return ParticleEnsemble(positions=new_pos, t=ens.t + cfg.dt, rng=ens.rng)


@dataclass
class SimulationResult:
    final: ParticleEnsemble
    snapshots: list  # (step, t, positions copy)


def simulate(
    ens: ParticleEnsemble,
    cfg: SdeConfig,
    steps: int,
    interaction: InteractionContext | EmpiricalModel | None = None,
    grid: Grid2D | None = None,
    record_every: int = 0,
) -> SimulationResult:
    """Run `steps` Euler-Maruyama steps, recording position snapshots.

    Snapshots are taken at step 0, every record_every steps (when > 0), and at
    the final step.  Deterministic per (initial ensemble seed, config).
    """
    snapshots = [(0, ens.t, ens.positions.copy())]
    for k in range(1, steps + 1):
        ens = euler_maruyama_step(ens, cfg, interaction, grid)
        if (record_every > 0 and k % record_every == 0) or k == steps:
            snapshots.append((k, ens.t, ens.positions.copy()))
    return SimulationResult(final=ens, snapshots=snapshots)


def histogram_density(ens: ParticleEnsemble, grid: Grid2D) -> DensityField:
    """Project the empirical measure onto the grid by bilinear (cloud-in-cell) deposit.

    Each particle splits its 1/n mass over the four corners of its cell; the
    node masses are then divided by the quadrature weights and normalized, so
    the result integrates to 1.
    """
    if not np.all(grid.contains(ens.positions)):
        raise DomainError("all particles must lie inside the grid domain")
    tx = (ens.positions[:, 0] - grid.x_min) / grid.hx
    ty = (ens.positions[:, 1] - grid.y_min) / grid.hy
    ix = np.clip(tx.astype(int), 0, grid.nx - 2)
    iy = np.clip(ty.astype(int), 0, grid.ny - 2)
    fx = tx - ix
    fy = ty - iy
    mass = np.zeros((grid.ny, grid.nx))
    np.add.at(mass, (iy, ix), (1 - fx) * (1 - fy))
    np.add.at(mass, (iy, ix + 1), fx * (1 - fy))
    np.add.at(mass, (iy + 1, ix), (1 - fx) * fy)
    np.add.at(mass, (iy + 1, ix + 1), fx * fy)
    mass /= ens.n
    return normalize(ScalarField(grid, mass / grid.quad_weights))


def write_particles_csv(snapshots, path) -> None:
    """Write `step,t,particle_id,x,y` rows for every recorded snapshot."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARTICLE_CSV_HEADER)
        for step, t, positions in snapshots:
            for pid, (x, y) in enumerate(positions):
                w.writerow([step, repr(float(t)), pid, repr(float(x)), repr(float(y))])
