"""Alternating minimisation of the mixture objective, with restarts.

Each outer iteration first refits the experts for the current weights and
then refits the weights for the new experts. Both steps are exact or
descent block updates of the same convex-in-each-block objective, so the
recorded cost never increases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .core import (
    Dataset,
    Expert,
    HyperParams,
    LossBreakdown,
    MixtureModel,
    check_weights,
    stack_params,
)
from .expert_fit import fit_experts
from .objective import total_cost
from .weight_fit import fit_weights_windowed

THETA_OMEGA_TOL = "theta_omega_tol"
COST_TOL = "cost_tol"
K_MAX = "k_max"
TERMINATION_REASONS = (THETA_OMEGA_TOL, COST_TOL, K_MAX)


class NumericalFailure(ArithmeticError):
    """The objective became non-finite during fitting."""


@dataclass(frozen=True, eq=False)
class FitReport:
    model: MixtureModel
    iterations: int
    termination_reason: str
    restart_index: int = 0
    all_restart_costs: tuple[float, ...] = ()

    @property
    def final_cost(self) -> float:
        return self.model.final_cost

    def summary(self) -> str:
        lines = [
            f"final cost        {self.final_cost:.10g}",
            f"iterations        {self.iterations}",
            f"termination       {self.termination_reason}",
            f"selected restart  {self.restart_index}",
        ]
        if self.all_restart_costs:
            costs = ", ".join(f"{c:.6g}" for c in self.all_restart_costs)
            lines.append(f"restart costs     {costs}")
        for i, e in enumerate(self.model.experts, start=1):
            theta = " ".join(f"{v:+.4f}" for v in e.theta)
            lines.append(f"theta_{i} ({e.kind})  {theta}")
        return "\n".join(lines)


def check_termination(
    theta_delta: float,
    omega_delta: float,
    cost_delta: float,
    hyper: HyperParams,
    k: int,
) -> Optional[str]:
    """Stopping rule of the outer loop; ``None`` means keep iterating.

    Tolerance rules take precedence over the iteration cap, and the joint
    parameter/weight rule over the cost rule.

    >>> h = HyperParams(k_max=10)
    >>> check_termination(0.0, 0.0, 0.0, h, 1)
    'theta_omega_tol'
    >>> check_termination(1.0, 1.0, h.eps_J / 2, h, 3)
    'cost_tol'
    >>> check_termination(1.0, 1.0, 1.0, h, 10)
    'k_max'
    >>> check_termination(1.0, 1.0, 1.0, h, 3) is None
    True
    """
    if min(theta_delta, omega_delta, cost_delta) < 0:
        raise ValueError("deltas must be non-negative")
    if theta_delta < hyper.eps_theta and omega_delta < hyper.eps_omega:
        return THETA_OMEGA_TOL
    if cost_delta < hyper.eps_J:
        return COST_TOL
    if k >= hyper.k_max:
        return K_MAX
    return None


def _cost(dataset, experts, W, hyper) -> LossBreakdown:
    b = total_cost(dataset, experts, W, hyper)
    if not np.isfinite(b.total):
        raise NumericalFailure("objective is not finite; check data scaling and hyper-parameters")
    return b


def alternation_step(
    dataset: Dataset,
    expert_specs: Sequence[Expert],
    W,
    hyper: HyperParams,
    theta_init=None,
) -> tuple[list[Expert], np.ndarray]:
    """One outer iteration: experts for fixed weights, then weights."""
    experts = fit_experts(dataset, expert_specs, W, hyper, theta_init=theta_init)
    W_new = fit_weights_windowed(dataset, experts, W, hyper)
    return experts, W_new


def coordinate_descent(
    dataset: Dataset,
    expert_specs: Sequence[Expert],
    omega_init,
    hyper: HyperParams,
) -> FitReport:
    """Alternate expert and weight updates from ``omega_init`` until a stop rule fires."""
    specs = list(expert_specs)
    if len(specs) != hyper.n_experts:
        raise ValueError(f"hyper.n_experts={hyper.n_experts} but {len(specs)} experts given")
    W = np.array(check_weights(omega_init, len(specs)))
    if W.shape[0] != dataset.T:
        raise ValueError(f"omega_init has {W.shape[0]} rows, dataset has {dataset.T}")

    trace: list[LossBreakdown] = []
    theta_prev: Optional[np.ndarray] = None
    thetas = None
    experts: list[Expert] = specs
    reason = K_MAX
    k = 0
    for k in range(1, hyper.k_max + 1):
        experts, W_new = alternation_step(dataset, specs, W, hyper, theta_init=thetas)
        thetas = [e.theta for e in experts]
        stacked = stack_params(experts)
        b = _cost(dataset, experts, W_new, hyper)
        if trace:
            d_theta = float(np.linalg.norm(stacked - theta_prev))
            d_omega = float(np.linalg.norm(W_new - W))
            d_cost = abs(trace[-1].total - b.total)
        else:
            d_theta = d_omega = d_cost = np.inf
        trace.append(b)
        W = np.array(W_new)
        theta_prev = stacked
        stop = check_termination(d_theta, d_omega, d_cost, hyper, k)
        if stop is not None:
            reason = stop
            break
    model = MixtureModel(experts, W, hyper, tuple(trace))
    return FitReport(model, k, reason)


def random_weight_sequences(T: int, M: int, n: int, seed) -> list[np.ndarray]:
    """``n`` weight sequences with rows drawn uniformly from the simplex.

    Each sequence uses its own child of ``SeedSequence(seed)``, so the
    ``i``-th draw does not depend on ``n``.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(c).dirichlet(np.ones(M), size=T) for c in children]


def multistart_fit(
    dataset: Dataset,
    expert_specs: Sequence[Expert],
    hyper: HyperParams,
    omega_prior=None,
    n_jobs: int = 1,
) -> FitReport:
    """Run the alternating fit from ``hyper.n_restarts`` starts and keep the cheapest.

    The first start is ``omega_prior`` when given; the others (or all of
    them) are random row-wise uniform draws seeded by ``hyper.seed``. Ties
    in the final cost go to the lowest restart index.
    """
    N = hyper.n_restarts
    M = len(expert_specs)
    starts = random_weight_sequences(dataset.T, M, N, hyper.seed)
    if omega_prior is not None:
        starts[0] = np.asarray(omega_prior, dtype=float)
    if n_jobs == 1 or N == 1:
        reports = [coordinate_descent(dataset, expert_specs, W0, hyper) for W0 in starts]
    else:
        reports = Parallel(n_jobs=n_jobs)(
            delayed(coordinate_descent)(dataset, expert_specs, W0, hyper) for W0 in starts
        )
    costs = tuple(r.final_cost for r in reports)
    best = min(range(N), key=lambda i: (costs[i], i))
    r = reports[best]
    return FitReport(r.model, r.iterations, r.termination_reason, best, costs)
