"""Controlled mean-field simulator for dielectrophoretic chiplet populations.

A population of micron-scale chiplets in a dielectric fluid, steered by an
electrode voltage policy, is modelled three ways that must agree with each
other: a finite-population interacting SDE, an explicit finite-difference
solution of the nonlocal Fokker-Planck equation, and a Wasserstein-proximal
(JKO) evolution of the same density whose free energy decays monotonically.
"""

from .errors import (
    BlowupError,
    CapacityError,
    ChipfieldError,
    ConfigError,
    ConvergenceError,
    DomainError,
    ValidationError,
)
from .grid import (
    DensityField,
    Grid2D,
    ScalarField,
    VectorField,
    divergence,
    field_from_function,
    gradient,
    integrate,
    interpolate,
    laplacian,
    normalize,
    read_field_csv,
    write_field_csv,
)
from .model import (
    CapacitanceModel,
    ControlPolicy,
    InteractionContext,
    PairKernels,
    capacitance,
    compute_ubar,
    convolve_potential,
    drift_bound_report,
    drift_field,
    eval_control,
    phi_cc,
    phi_ce,
    sample_capacitance_model,
)
from .particles import (
    EmpiricalModel,
    ParticleEnsemble,
    SdeConfig,
    empirical_drift,
    empirical_ubar,
    euler_maruyama_step,
    histogram_density,
    init_ensemble,
    simulate,
)
from .transport import (
    DiscreteMeasure,
    TransportPlan,
    cost_matrix,
    exact_w2,
    sinkhorn_w2,
)
from .meanfield import (
    EnergyBreakdown,
    FlowState,
    LyapunovReport,
    default_jko_eps,
    energy,
    explicit_fd_step,
    free_energy_derivative,
    gradient_flow_residual,
    jko_objective,
    jko_step,
    lyapunov_check,
    particle_consistency_metric,
    run_flow,
    stable_dt_bound,
)

__version__ = "0.1.0"
