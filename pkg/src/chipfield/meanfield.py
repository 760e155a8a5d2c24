"""Free-energy functional and the nonlocal Fokker-Planck evolution of the density.

Two interchangeable time steppers evolve d rho/dt = -div(rho f) + (1/beta) lap rho:

* an entropic Wasserstein-proximal (JKO) step, solved by a log-domain dual
  fixed point over a separable grid Gibbs kernel, and
* an explicit conservative finite-volume step with no-flux walls, used as an
  independent cross-check.

The free energy (interaction energy plus scaled negative entropy) is recorded
along either flow and monitored for Lyapunov decay.  beta = math.inf selects
the deterministic limit: the entropy terms drop and the same machinery runs
with the interaction energy alone.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ConvergenceError, ValidationError
from .grid import (
    DensityField,
    Grid2D,
    ScalarField,
    VectorField,
    divergence,
    gradient,
    normalize,
)
from .model import InteractionContext, convolve_potential, drift_field
from .particles import ParticleEnsemble, histogram_density
from .transport import DiscreteMeasure, sinkhorn_w2

logger = logging.getLogger(__name__)

#: floor applied inside log(rho) evaluations; 0 * log 0 is taken as 0
DENSITY_LOG_FLOOR = 1e-300

#: default dual fixed-point tolerance of the proximal step
JKO_DEFAULT_TOL = 1e-9

ENERGY_CSV_HEADER = ["step", "t", "phi_cc", "phi_ce", "internal", "total"]


def _beta_inv(beta: float) -> float:
    if not beta > 0:
        raise ValidationError(f"beta must be positive (math.inf for the deterministic limit), got {beta!r}")
    return 0.0 if math.isinf(beta) else 1.0 / beta


def _ctx_for(density: DensityField, ctx: InteractionContext) -> InteractionContext:
    """Reuse ctx if it was built on this density, else rebuild (kernels shared)."""
    if ctx.density is density:
        return ctx
    return InteractionContext(
        density=density, policy=ctx.policy, ccap=ctx.ccap, ecap=ctx.ecap,
        t=ctx.t, kernels=ctx.kernels,
    )


@dataclass
class EnergyBreakdown:
    """Interaction and internal contributions to the free energy."""

    phi_cc: float
    phi_ce: float
    internal: float  # (1/beta) * E_rho[log rho]
    total: float


@dataclass
class FlowState:
    """Density trajectory state for either scheme, with its energy history."""

    density: DensityField
    t: float
    scheme: str  # "jko" or "explicit_fd"
    energy_history: list = field(default_factory=list)  # (t, EnergyBreakdown)
    clip_log: list = field(default_factory=list)        # (t, clipped mass) from explicit steps
    snapshots: list = field(default_factory=list)       # (t, DensityField)


def energy(density: DensityField, ctx: InteractionContext, beta: float) -> EnergyBreakdown:
    """Free energy of a density: double-quadrature interaction terms plus entropy term."""
    binv = _beta_inv(beta)
    ctx = _ctx_for(density, ctx)
    m = ctx.node_mass
    ub = ctx.ubar.values.ravel()
    u = ctx.node_control
    d_cc = ub[None, :] - ub[:, None]
    d_ce = u[None, :] - ub[:, None]
    p_cc = 0.5 * float(m @ ((ctx.kernels.cc_matrix * d_cc**2) @ m))
    p_ce = 0.5 * float(m @ ((ctx.kernels.ce_matrix * d_ce**2) @ m))
    if binv == 0.0:
        internal = 0.0
    else:
        rho = density.values.ravel()
        pos = m > 0
        internal = binv * float(m[pos] @ np.log(np.maximum(rho[pos], DENSITY_LOG_FLOOR)))
    return EnergyBreakdown(phi_cc=p_cc, phi_ce=p_ce, internal=internal,
                           total=p_cc + p_ce + internal)


def free_energy_derivative(density: DensityField, ctx: InteractionContext,
                           beta: float) -> ScalarField:
    """Variational derivative (rho * phi) + (1/beta)(1 + log rho) at the nodes."""
    binv = _beta_inv(beta)
    ctx = _ctx_for(density, ctx)
    conv = convolve_potential(ctx).values
    if binv > 0.0:
        conv = conv + binv * (1.0 + np.log(np.maximum(density.values, DENSITY_LOG_FLOOR)))
    return ScalarField(density.grid, conv)


def stable_dt_bound(grid: Grid2D, beta: float, drift_max: float) -> float:
    """CFL-type bound dt <= h^2 / (4/beta + h * max|f|) for the explicit scheme."""
    binv = _beta_inv(beta)
    h = min(grid.hx, grid.hy)
    denom = 4.0 * binv + h * drift_max
    return math.inf if denom == 0.0 else h * h / denom


def _fd_update(density: DensityField, fld: VectorField, beta: float,
               dt: float) -> tuple[DensityField, float]:
    """Conservative no-flux finite-volume update; returns (new density, clipped mass)."""
    binv = _beta_inv(beta)
    g = density.grid
    rho = density.values
    # x-direction face fluxes (ny, nx-1): centered advection minus diffusion
    adv = 0.25 * (rho[:, 1:] + rho[:, :-1]) * (fld.vx[:, 1:] + fld.vx[:, :-1])
    dif = binv * (rho[:, 1:] - rho[:, :-1]) / g.hx
    flux_x = adv - dif
    cx = np.full(g.nx, g.hx)
    cx[0] = cx[-1] = g.hx / 2
    div = np.zeros_like(rho)
    div[:, 0] += flux_x[:, 0] / cx[0]
    div[:, 1:-1] += (flux_x[:, 1:] - flux_x[:, :-1]) / cx[1:-1]
    div[:, -1] += -flux_x[:, -1] / cx[-1]
    # y-direction
    adv = 0.25 * (rho[1:, :] + rho[:-1, :]) * (fld.vy[1:, :] + fld.vy[:-1, :])
    dif = binv * (rho[1:, :] - rho[:-1, :]) / g.hy
    flux_y = adv - dif
    cy = np.full(g.ny, g.hy)
    cy[0] = cy[-1] = g.hy / 2
    div[0, :] += flux_y[0, :] / cy[0]
    div[1:-1, :] += (flux_y[1:, :] - flux_y[:-1, :]) / cy[1:-1][:, None]
    div[-1, :] += -flux_y[-1, :] / cy[-1]
    new = rho - dt * div
    clipped = 0.0
    neg = new < 0
    if neg.any():
        clipped = float(-np.sum(new[neg] * g.quad_weights[neg]))
        new = np.where(neg, 0.0, new)
        logger.debug("explicit step clipped %.3e negative mass", clipped)
    return normalize(ScalarField(g, new)), clipped


def explicit_fd_step(state: FlowState, ctx: InteractionContext, beta: float,
                     dt: float) -> FlowState:
    """One explicit step of d rho/dt = -div(rho f) + (1/beta) lap rho with no-flux walls.

    Mass is conserved by construction; negative undershoots are clipped to 0,
    renormalized and logged.  Violating the stability bound raises ConfigError.
    """
    ctx = _ctx_for(state.density, ctx)
    fld = drift_field(ctx)
    bound = stable_dt_bound(state.density.grid, beta, fld.max_norm())
    if dt > bound * (1 + 1e-12):
        raise ConfigError(
            f"explicit scheme unstable: dt={dt!r} exceeds bound {bound!r} "
            f"(grid h={min(state.density.grid.hx, state.density.grid.hy)!r})"
        )
    new_density, clipped = _fd_update(state.density, fld, beta, dt)
    new_ctx = _ctx_for(new_density, ctx)
    return replace(
        state,
        density=new_density,
        t=state.t + dt,
        energy_history=state.energy_history + [(state.t + dt, energy(new_density, new_ctx, beta))],
        clip_log=state.clip_log + [(state.t + dt, clipped)],
    )


class GridGibbs:
    """Log-domain application of the Gibbs kernel exp(-|x-y|^2 / (2 eps)) on grid nodes.

    The squared distance separates over the axes, so one kernel pass costs
    O(N (nx + ny)) logsumexp work instead of O(N^2).
    """

    def __init__(self, grid: Grid2D, eps: float):
        if eps <= 0:
            raise ValidationError(f"eps must be positive, got {eps!r}")
        self.grid = grid
        self.eps = eps
        xs, ys = grid.xs, grid.ys
        self.log_kx = -((xs[:, None] - xs[None, :]) ** 2) / (2 * eps)  # (nx, nx)
        self.log_ky = -((ys[:, None] - ys[None, :]) ** 2) / (2 * eps)  # (ny, ny)

    def apply(self, log_field: np.ndarray) -> np.ndarray:
        """log( K exp(log_field) ) for a (ny, nx) log field; K is symmetric."""
        a = logsumexp(log_field[:, None, :] + self.log_kx[None, :, :], axis=2)  # (ny, nx)
        return logsumexp(a[None, :, :] + self.log_ky[:, :, None], axis=1)       # (ny, nx)


def default_jko_eps(grid: Grid2D) -> float:
    """Default entropic regularization h^2, the smallest grid-resolved kernel width.

    The Gibbs kernel has standard deviation sqrt(eps); below one grid spacing
    the discrete transport problem cannot represent sub-cell displacements and
    the proximal flow freezes, so eps is tied to h^2 from above, not below.
    """
    h = min(grid.hx, grid.hy)
    return h * h


def _jko_fixed_point(kernel: GridGibbs, log_m_prev, psi, log_w, beta, tau, eps,
                     tol, max_iter, log_v0=None, log_s0=None, debias=True):
    """Dual scaling fixed point of the (debiased) entropic proximal step.

    The transport term is the entropic cost
        T(p, m) = min over M in Pi(p, m) of 0.5 <C, M> + eps <M, log M - 1>,
    debiased to T(p, m) - 0.5 T(m, m) so the fixed point of the flow is the
    discrete Gibbs measure rather than a kernel-blurred copy of it; the full
    objective adds tau <m, psi + (1/beta) log(m / w)>.  Stationarity forces
    M = diag(u) K diag(v) with u = p / (K v), plus a symmetric self-coupling
    potential sigma with sigma (K sigma) = m, and a damped closed-form
    v-update.  Everything runs in the log domain; log_v0 / log_s0 warm-start
    the duals across steps.
    """
    binv = _beta_inv(beta)
    alpha = tau * binv / eps
    base = -(tau / eps) * psi
    log_v = log_v0 if log_v0 is not None else base / (1.0 + alpha)
    log_s = log_s0 if log_s0 is not None else 0.5 * log_m_prev
    resid = math.inf
    for it in range(1, max_iter + 1):
        log_u = log_m_prev - kernel.apply(log_v)
        log_ku = kernel.apply(log_u)
        if debias:
            log_m = log_v + log_ku
            ds = 0.0
            for _ in range(3):
                log_s_new = 0.5 * (log_s + log_m - kernel.apply(log_s))
                ds = float(np.abs(log_s_new - log_s).max())
                log_s = log_s_new
            correction = log_s
        else:
            ds = 0.0
            correction = 0.0
        log_v_new = (base - alpha * (log_ku - log_w + 1.0) + correction) / (1.0 + alpha)
        resid = max(float(np.abs(log_v_new - log_v).max()), ds)
        log_v = log_v_new
        if resid <= tol:
            log_u = log_m_prev - kernel.apply(log_v)
            return log_v + kernel.apply(log_u), log_v, log_s, it, resid
    raise ConvergenceError(
        f"jko dual fixed point stalled at residual {resid:.3e} after {max_iter} iterations "
        f"(tau={tau!r}, eps={eps!r})",
        residual=resid,
        iterations=max_iter,
    )


def _jko_step_impl(density_prev, ctx, beta, tau, eps, tol, max_iter, kernel=None,
                   log_v0=None, log_s0=None, psi_sign=1.0, debias=True):
    grid = density_prev.grid
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau!r}")
    if kernel is None:
        kernel = GridGibbs(grid, eps)
    ctx = _ctx_for(density_prev, ctx)
    psi = psi_sign * convolve_potential(ctx).values
    w = grid.quad_weights
    m_prev = density_prev.node_mass
    log_m_prev = np.log(np.maximum(m_prev, DENSITY_LOG_FLOOR))
    log_mass, log_v, log_s, iters, resid = _jko_fixed_point(
        kernel, log_m_prev, psi, np.log(w), beta, tau, eps, tol, max_iter,
        log_v0, log_s0, debias,
    )
    mass = np.exp(log_mass)
    mass /= mass.sum()
    out = normalize(ScalarField(grid, mass / w))
    return out, log_v, log_s, iters, resid


def jko_step(
    density_prev: DensityField,
    ctx: InteractionContext,
    beta: float,
    tau: float,
    eps: float | None = None,
    tol: float = JKO_DEFAULT_TOL,
    max_iter: int = 200000,
    debias: bool = True,
) -> DensityField:
    """One Wasserstein-proximal step from density_prev.

    Minimizes 0.5 W^2(rho, prev) + tau E_rho[prev-convolved potential
    + (1/beta) log rho] over grid densities, with the convolution term and the
    weighted control frozen at the previous iterate (ctx must be built on
    density_prev).  W^2 is entropically regularized with strength eps
    (default h^2) and solved by a log-domain dual fixed point.

    debias=True (default) subtracts half the entropic self-cost of the output,
    which cancels the kernel-blur bias of the raw entropic cost; the raw
    variant adds roughly eps of spurious variance per step.
    """
    if eps is None:
        eps = default_jko_eps(density_prev.grid)
    out, _, _, _, _ = _jko_step_impl(density_prev, ctx, beta, tau, eps, tol,
                                     max_iter, debias=debias)
    return out


def _entropic_cost_dense(log_a, log_b, C, eps, tol, max_iter):
    """min over M in Pi(a, b) of 0.5 <C, M> + eps <M, log M - 1>, dense solver."""
    log_gamma = -C / (2 * eps)
    log_v = np.zeros_like(log_b)
    for _ in range(max_iter):
        log_u = log_a - logsumexp(log_gamma + log_v[None, :], axis=1)
        log_v_new = log_b - logsumexp(log_gamma + log_u[:, None], axis=0)
        if np.abs(log_v_new - log_v).max() <= tol:
            log_v = log_v_new
            break
        log_v = log_v_new
    else:
        raise ConvergenceError("objective coupling did not converge")
    log_u = log_a - logsumexp(log_gamma + log_v[None, :], axis=1)
    log_M = log_u[:, None] + log_gamma + log_v[None, :]
    M = np.exp(log_M)
    with np.errstate(invalid="ignore"):
        m_log_m = np.where(M > 0, M * log_M, 0.0)
    return 0.5 * float(np.sum(M * C)) + eps * float(np.sum(m_log_m - M))


def jko_objective(candidate: DensityField, density_prev: DensityField,
                  ctx: InteractionContext, beta: float, tau: float, eps: float,
                  tol: float = 1e-10, max_iter: int = 200000,
                  debias: bool = True) -> float:
    """Proximal objective of a candidate density (diagnostic / test oracle).

    T(prev, m) - 0.5 T(m, m) + tau <m, psi + (1/beta) log rho>, with
    T the entropic transport cost 0.5 <C, M> + eps <M, log M - 1> at the
    optimal coupling (the constant -0.5 T(prev, prev) completing the symmetric
    divergence is omitted; it does not affect comparisons).  Dense O(N^2)
    computation, intended for small grids and acceptance checks.
    """
    binv = _beta_inv(beta)
    grid = density_prev.grid
    ctx = _ctx_for(density_prev, ctx)
    psi = convolve_potential(ctx).values.ravel()
    nodes = grid.nodes
    diff = nodes[:, None, :] - nodes[None, :, :]
    C = np.einsum("ijk,ijk->ij", diff, diff)
    m_a = density_prev.node_mass.ravel()
    m_b = candidate.node_mass.ravel()
    log_a = np.log(np.maximum(m_a, DENSITY_LOG_FLOOR))
    log_b = np.log(np.maximum(m_b, DENSITY_LOG_FLOOR))
    value = _entropic_cost_dense(log_a, log_b, C, eps, tol, max_iter)
    if debias:
        value -= 0.5 * _entropic_cost_dense(log_b, log_b, C, eps, tol, max_iter)
    rho_b = candidate.values.ravel()
    pos = m_b > 0
    potential = float(m_b @ psi)
    if binv > 0.0:
        potential += binv * float(m_b[pos] @ np.log(np.maximum(rho_b[pos], DENSITY_LOG_FLOOR)))
    return value + tau * potential


def run_flow(
    initial: DensityField,
    ctx: InteractionContext,
    beta: float,
    scheme: str,
    step_size: float,
    steps: int,
    eps: float | None = None,
    jko_tol: float = JKO_DEFAULT_TOL,
    snapshot_every: int = 0,
    drift_sign: float = 1.0,
    debias: bool = True,
) -> FlowState:
    """Evolve the density for `steps` steps of either scheme, recording energies.

    step_size is tau for the proximal scheme and dt for the explicit one.  The
    interaction context is rebuilt from each new density (kernels shared), so
    the weighted control always lags one step, matching the frozen-coefficient
    proximal step.  drift_sign is a validation hook that flips the drift.
    """
    if scheme not in ("jko", "explicit_fd"):
        raise ValidationError(f"scheme must be 'jko' or 'explicit_fd', got {scheme!r}")
    grid = initial.grid
    if eps is None:
        eps = default_jko_eps(grid)
    ctx = _ctx_for(initial, ctx)
    state = FlowState(
        density=initial,
        t=0.0,
        scheme=scheme,
        energy_history=[(0.0, energy(initial, ctx, beta))],
        snapshots=[(0.0, initial)] if snapshot_every > 0 else [],
    )
    kernel = GridGibbs(grid, eps) if scheme == "jko" else None
    log_v = log_s = None
    for k in range(1, steps + 1):
        if scheme == "jko":
            new_density, log_v, log_s, _, _ = _jko_step_impl(
                state.density, ctx, beta, step_size, eps, jko_tol,
                max_iter=200000, kernel=kernel, log_v0=log_v, log_s0=log_s,
                psi_sign=drift_sign, debias=debias,
            )
            clipped = 0.0
        else:
            fld = drift_field(ctx)
            if drift_sign != 1.0:
                fld = VectorField(grid, drift_sign * fld.vx, drift_sign * fld.vy)
            bound = stable_dt_bound(grid, beta, fld.max_norm())
            if step_size > bound * (1 + 1e-12):
                raise ConfigError(
                    f"explicit scheme unstable: dt={step_size!r} exceeds bound {bound!r}"
                )
            new_density, clipped = _fd_update(state.density, fld, beta, step_size)
        ctx = _ctx_for(new_density, ctx)
        t = k * step_size
        state = replace(
            state,
            density=new_density,
            t=t,
            energy_history=state.energy_history + [(t, energy(new_density, ctx, beta))],
            clip_log=state.clip_log + ([(t, clipped)] if scheme == "explicit_fd" else []),
        )
        if snapshot_every > 0 and (k % snapshot_every == 0 or k == steps):
            state.snapshots.append((t, new_density))
    return state


@dataclass
class LyapunovReport:
    """Outcome of the energy-monotonicity check along a flow."""

    passed: bool
    n_steps: int
    violations: list  # (step index k, increase, allowed slack)


def lyapunov_check(state: FlowState) -> LyapunovReport:
    """Flag every step whose total energy rose by more than 1e-8 * (1 + |previous|)."""
    hist = state.energy_history
    if len(hist) < 2:
        raise ValidationError("lyapunov check needs at least two energy history entries")
    violations = []
    for k in range(1, len(hist)):
        prev = hist[k - 1][1].total
        cur = hist[k][1].total
        allowed = 1e-8 * (1.0 + abs(prev))
        if cur > prev + allowed:
            violations.append((k, cur - prev, allowed))
    return LyapunovReport(passed=not violations, n_steps=len(hist) - 1, violations=violations)


def gradient_flow_residual(
    density_prev: DensityField,
    density_next: DensityField,
    dt: float,
    ctx: InteractionContext,
    beta: float,
) -> float:
    """Interior L1 defect of a step pair against the gradient-flow form of the PDE.

    residual = | (rho_k - rho_{k-1})/dt - div(rho_{k-1} grad dPhi/drho) |
    integrated over interior nodes, with the derivative taken at rho_{k-1}.
    """
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt!r}")
    grid = density_prev.grid
    dphi = free_energy_derivative(density_prev, ctx, beta)
    g = gradient(dphi)
    flux = VectorField(grid, density_prev.values * g.vx, density_prev.values * g.vy)
    rhs = divergence(flux).values
    lhs = (density_next.values - density_prev.values) / dt
    res = np.abs(lhs - rhs)
    w = grid.quad_weights
    return float(np.sum(res[1:-1, 1:-1] * w[1:-1, 1:-1]))


def particle_consistency_metric(
    ens: ParticleEnsemble, pde_density: DensityField, grid: Grid2D, eps: float
) -> float:
    """Entropic W2 (mm) between the particle histogram and a PDE density on the grid."""
    hist = histogram_density(ens, grid)
    wa = hist.node_mass.ravel()
    wb = pde_density.node_mass.ravel()
    a = DiscreteMeasure(grid.nodes, wa / wa.sum())
    b = DiscreteMeasure(grid.nodes, wb / wb.sum())
    cost, _ = sinkhorn_w2(a, b, eps)
    return float(np.sqrt(max(cost, 0.0)))


def write_energy_csv(state: FlowState, path) -> None:
    """Write `step,t,phi_cc,phi_ce,internal,total` for the recorded history."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ENERGY_CSV_HEADER)
        for step, (t, e) in enumerate(state.energy_history):
            w.writerow([step, repr(float(t)), repr(e.phi_cc), repr(e.phi_ce),
                        repr(e.internal), repr(e.total)])
