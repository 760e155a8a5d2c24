"""Squared-Wasserstein distance between discrete planar measures.

Two solvers: an exact linear-programming oracle restricted to tiny coupling
sizes, and a log-domain Sinkhorn solver with geometric eps-scaling for
production use.  Ground cost is squared Euclidean distance in mm^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import CapacityError, ConvergenceError, ValidationError

#: largest m1 * m2 the exact LP oracle accepts
EXACT_MAX_COUPLING = 64

#: geometric eps-scaling factor, from max-cost/10 down to the target eps
EPS_SCALING_FACTOR = 0.5


@dataclass
class DiscreteMeasure:
    """Weighted point masses in the plane; weights sum to 1."""

    support: np.ndarray  # (m, 2) mm
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.support.shape != (len(self.weights), 2):
            raise ValidationError(
                f"support shape {self.support.shape} does not match {len(self.weights)} weights"
            )
        if not np.all(np.isfinite(self.support)):
            raise ValidationError("support points must be finite")
        if np.any(self.weights < 0):
            raise ValidationError(f"weights must be nonnegative, min {self.weights.min():.3e}")
        total = float(self.weights.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"weights must sum to 1 within 1e-12, got {total!r}")


@dataclass
class TransportPlan:
    """A coupling between two discrete measures and its transport cost."""

    coupling: np.ndarray  # (m1, m2), nonnegative
    cost: float           # sum coupling * squared distance


def cost_matrix(a_support, b_support) -> np.ndarray:
    """C[i, j] = squared Euclidean distance between a_support[i] and b_support[j]."""
    a = np.atleast_2d(np.asarray(a_support, dtype=float))
    b = np.atleast_2d(np.asarray(b_support, dtype=float))
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def exact_w2(a: DiscreteMeasure, b: DiscreteMeasure) -> tuple[float, TransportPlan]:
    """Exact W2 by linear programming; oracle-scale only (m1*m2 <= 64).

    Returns (W, plan) where W is the distance itself (square root of the cost).
    """
    m1, m2 = len(a.weights), len(b.weights)
    if m1 * m2 > EXACT_MAX_COUPLING:
        raise CapacityError(
            f"exact solver limited to {EXACT_MAX_COUPLING} coupling entries, got {m1}x{m2}"
        )
    C = cost_matrix(a.support, b.support)
    # marginal constraints; the last row is redundant but HiGHS presolve copes
    A_eq = np.zeros((m1 + m2, m1 * m2))
    for i in range(m1):
        A_eq[i, i * m2 : (i + 1) * m2] = 1.0
    for j in range(m2):
        A_eq[m1 + j, j::m2] = 1.0
    b_eq = np.concatenate([a.weights, b.weights])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise ConvergenceError(f"transport LP failed: {res.message}")
    coupling = res.x.reshape(m1, m2)
    cost = float(np.sum(coupling * C))
    return float(np.sqrt(max(cost, 0.0))), TransportPlan(coupling, cost)


def _log_sinkhorn_at_eps(log_a, log_b, C, eps, tol, max_iter, f, g):
    """Balance exp((f + g - C)/eps) to the given marginals; returns updated duals.

    f, g are dual potentials (cost units), warm-startable across eps levels.
    """
    it = 0
    violation = np.inf
    while it < max_iter:
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        it += 1
        if it % 10 == 0 or it < 10:
            log_row = logsumexp((f[:, None] + g[None, :] - C) / eps, axis=1)
            violation = float(np.abs(np.exp(log_row) - np.exp(log_a)).max())
            if violation < tol:
                return f, g, it, violation
    log_row = logsumexp((f[:, None] + g[None, :] - C) / eps, axis=1)
    violation = float(np.abs(np.exp(log_row) - np.exp(log_a)).max())
    if violation >= tol:
        raise ConvergenceError(
            f"sinkhorn did not reach marginal tolerance {tol:g} within {max_iter} iterations "
            f"(residual {violation:.3e})",
            residual=violation,
            iterations=it,
        )
    return f, g, it, violation


def sinkhorn_w2(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    eps: float,
    tol: float = 1e-9,
    max_iter: int = 100000,
) -> tuple[float, TransportPlan]:
    """Entropic approximation of the squared W2 cost.

    Log-domain scaling iterations with a geometric eps-scaling schedule
    (factor 0.5 from max-cost/10 down to the target eps, duals warm-started).
    Returns (cost, plan) where cost is the raw transport cost of the entropic
    plan, sum(coupling * C), with the entropy term excluded.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps!r}")
    ia = np.flatnonzero(a.weights > 0)
    ib = np.flatnonzero(b.weights > 0)
    C = cost_matrix(a.support[ia], b.support[ib])
    wa = a.weights[ia]
    wb = b.weights[ib]
    log_a = np.log(wa)
    log_b = np.log(wb)

    # schedule: geometric descent into the target eps
    eps_levels = []
    lvl = max(float(C.max()) / 10.0, eps)
    while lvl > eps:
        eps_levels.append(lvl)
        lvl *= EPS_SCALING_FACTOR
    eps_levels.append(eps)

    f = np.zeros(len(wa))
    g = np.zeros(len(wb))
    for lvl in eps_levels:
        # intermediate levels only pre-condition the duals; loose tolerance
        lvl_tol = tol if lvl == eps else max(tol, 1e-4)
        f, g, _, _ = _log_sinkhorn_at_eps(log_a, log_b, C, lvl, lvl_tol, max_iter, f, g)

    M = np.exp((f[:, None] + g[None, :] - C) / eps)
    cost = float(np.sum(M * C))
    coupling = np.zeros((len(a.weights), len(b.weights)))
    coupling[np.ix_(ia, ib)] = M
    return cost, TransportPlan(coupling, cost)


def write_plan_csv(plan: TransportPlan, path) -> None:
    """Debug export: `i,j,mass` rows for every nonzero coupling entry."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "mass"])
        for i, j in zip(*np.nonzero(plan.coupling)):
            w.writerow([int(i), int(j), repr(float(plan.coupling[i, j]))])
