"""Expert parameter updates for fixed mixture weights.

Three routes are provided:

* :func:`fit_separable` -- when the mixture term is switched off (``c == 0``)
  the problem decouples into one weighted ridge regression per expert.
* :func:`fit_joint` -- exact minimiser of the full expert objective, solving
  the stacked normal equations of all experts at once.
* :func:`fit_admm` -- the averaged sharing ADMM, which only ever solves
  per-expert problems plus a scalar update per time step.

All three minimise, over the experts' parameters::

    sum_t c (y - W(t).f)^2 + beta sum_t sum_i W_i(t) c_i (y - f_i)^2
        + lambda_theta sum_i ||theta_i||^2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .core import (
    Dataset,
    Expert,
    HyperParams,
    RankDeficiencyError,
    check_weights,
    expert_outputs,
)


def _check_spd(H: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(H)):
        raise FloatingPointError(f"{what}: normal matrix is not finite; rescale the data")
    evals = np.linalg.eigvalsh(H)
    scale = max(float(evals[-1]), np.finfo(float).tiny)
    if evals[0] <= H.shape[0] * np.finfo(float).eps * scale:
        rank = int(np.sum(evals > H.shape[0] * np.finfo(float).eps * scale))
        raise RankDeficiencyError(
            f"{what}: normal matrix is rank deficient (rank {rank} of {H.shape[0]}); "
            "use lambda_theta > 0 or richer data"
        )


def _solve_spd(H: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    """Solve a symmetric positive definite system, refusing singular ones."""
    _check_spd(H, what)
    return linalg.solve(H, b, assume_a="pos")


def _prepare(dataset: Dataset, experts: Sequence[Expert], W, hyper: HyperParams):
    if len(experts) != hyper.n_experts:
        raise ValueError(f"{len(experts)} experts given, hyper expects {hyper.n_experts}")
    W = check_weights(W, len(experts))
    if W.shape[0] != dataset.T:
        raise ValueError(f"weights have {W.shape[0]} rows, dataset has {dataset.T}")
    Phis = [e.features(dataset.X) for e in experts]
    return W, Phis


def fit_separable(
    dataset: Dataset, expert_specs: Sequence[Expert], W, hyper: HyperParams
) -> list[Expert]:
    """Per-expert weighted ridge fits, ignoring the mixture term.

    Expert ``i`` minimises
    ``beta sum_t W_i(t) c_i (y(t) - phi_i(x(t)) theta_i)^2 + lambda_theta ||theta_i||^2``.
    """
    W, Phis = _prepare(dataset, expert_specs, W, hyper)
    y = dataset.y
    out = []
    for i, (spec, Phi) in enumerate(zip(expert_specs, Phis)):
        w = hyper.beta * hyper.local_coefs[i] * W[:, i]
        H = Phi.T @ (w[:, None] * Phi) + hyper.lambda_theta * np.eye(Phi.shape[1])
        b = Phi.T @ (w * y)
        out.append(spec.with_params(_solve_spd(H, b, f"expert {i}")))
    return out


def fit_joint(
    dataset: Dataset, expert_specs: Sequence[Expert], W, hyper: HyperParams
) -> list[Expert]:
    """Exact minimiser of the expert objective for fixed weights.

    The blended prediction is linear in the stacked parameters, so the whole
    problem is one weighted ridge regression with design
    ``[W_1 Phi_1, ..., W_M Phi_M]`` plus block-diagonal local terms.
    """
    W, Phis = _prepare(dataset, expert_specs, W, hyper)
    y = dataset.y
    sizes = [P.shape[1] for P in Phis]
    A = np.hstack([W[:, [i]] * P for i, P in enumerate(Phis)])
    H = hyper.c * (A.T @ A)
    b = hyper.c * (A.T @ y)
    if hyper.beta > 0:
        off = np.cumsum([0] + sizes)
        for i, P in enumerate(Phis):
            w = hyper.beta * hyper.local_coefs[i] * W[:, i]
            sl = slice(off[i], off[i + 1])
            H[sl, sl] += P.T @ (w[:, None] * P)
            b[sl] += P.T @ (w * y)
    H[np.diag_indices_from(H)] += hyper.lambda_theta
    theta = _solve_spd(H, b, "joint expert fit")
    parts = np.split(theta, np.cumsum(sizes)[:-1])
    return [s.with_params(p) for s, p in zip(expert_specs, parts)]


# --------------------------------------------------------------------------
# Averaged sharing ADMM
# --------------------------------------------------------------------------


@dataclass
class AdmmState:
    """Averaged auxiliary variable, averaged scaled dual and residual history."""

    zbar: np.ndarray
    ubar: np.ndarray
    primal_residual: float = float("inf")
    dual_residual: float = float("inf")
    iteration: int = 0
    converged: bool = False
    history: list[tuple[int, float, float]] = field(default_factory=list)


def _mixture_over_m(F: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("tm,tm->t", W, F) / W.shape[1]


def init_admm_state(dataset: Dataset, experts: Sequence[Expert], W) -> AdmmState:
    """Consensus-feasible start: ``zbar = W.f / M`` and zero duals."""
    W = np.asarray(W, dtype=float)
    F = expert_outputs(experts, dataset.X)
    return AdmmState(zbar=_mixture_over_m(F, W), ubar=np.zeros(dataset.T))


def _theta_system(Phi, w_loc, omega, theta_prev, d, y, hyper: HyperParams):
    """Normal equations of the per-expert ADMM subproblem."""
    p = Phi.shape[1]
    H = (
        2.0 * Phi.T @ (w_loc[:, None] * Phi)
        + 2.0 * hyper.lambda_theta * np.eye(p)
        + hyper.rho * Phi.T @ ((omega**2)[:, None] * Phi)
    )
    b = 2.0 * Phi.T @ (w_loc * y) + hyper.rho * Phi.T @ (omega * (omega * (Phi @ theta_prev) - d))
    return H, b


def _consensus_offset(dataset, experts, W, state) -> np.ndarray:
    F = expert_outputs(experts, dataset.X)
    return _mixture_over_m(F, W) - state.zbar + state.ubar


def theta_subproblem_objective(
    dataset: Dataset,
    experts: Sequence[Expert],
    i: int,
    theta,
    W,
    state: AdmmState,
    hyper: HyperParams,
) -> float:
    """Value of expert ``i``'s ADMM subproblem at ``theta``.

    ``experts`` carry the previous iterate; the augmentation penalises
    ``W_i (f_i(theta) - f_i(theta_prev)) + W.f_prev / M - zbar + ubar``.
    """
    W = np.asarray(W, dtype=float)
    Phi = experts[i].features(dataset.X)
    theta = np.asarray(theta, dtype=float)
    resid = dataset.y - Phi @ theta
    h = hyper.beta * hyper.local_coefs[i] * np.sum(W[:, i] * resid**2)
    h += hyper.lambda_theta * float(theta @ theta)
    delta = W[:, i] * (Phi @ (theta - experts[i].theta)) + _consensus_offset(
        dataset, experts, W, state
    )
    return float(h + 0.5 * hyper.rho * np.sum(delta**2))


def admm_theta_step(
    dataset: Dataset,
    experts: Sequence[Expert],
    i: int,
    W,
    state: AdmmState,
    hyper: HyperParams,
) -> np.ndarray:
    """Minimise expert ``i``'s augmented subproblem in closed form.

    Reads only the previous iterate held in ``experts`` and ``state``, so the
    updates of different experts are independent of each other.
    """
    W = np.asarray(W, dtype=float)
    Phi = experts[i].features(dataset.X)
    w_loc = hyper.beta * hyper.local_coefs[i] * W[:, i]
    d = _consensus_offset(dataset, experts, W, state)
    H, b = _theta_system(Phi, w_loc, W[:, i], experts[i].theta, d, dataset.y, hyper)
    return _solve_spd(H, b, f"ADMM step for expert {i}")


def admm_zbar_step(
    dataset: Dataset, experts: Sequence[Expert], W, state: AdmmState, hyper: HyperParams
) -> np.ndarray:
    """Closed-form update of the averaged auxiliary variable.

    Per time step ``zbar`` minimises
    ``c (y - M zbar)^2 + (rho M / 2) (zbar - abar)^2`` with
    ``abar = W.f / M + ubar``.
    """
    W = np.asarray(W, dtype=float)
    M = W.shape[1]
    F = expert_outputs(experts, dataset.X)
    abar = _mixture_over_m(F, W) + state.ubar
    return (2.0 * hyper.c * dataset.y + hyper.rho * abar) / (2.0 * hyper.c * M + hyper.rho)


def admm_dual_step(
    dataset: Dataset, experts: Sequence[Expert], W, state: AdmmState
) -> tuple[np.ndarray, float]:
    """Scaled dual ascent on the consensus residual ``W.f / M - zbar``.

    Returns the new ``ubar`` and the primal residual (max over time).
    """
    W = np.asarray(W, dtype=float)
    F = expert_outputs(experts, dataset.X)
    r = _mixture_over_m(F, W) - state.zbar
    return state.ubar + r, float(np.max(np.abs(r))) if r.size else 0.0


def fit_admm(
    dataset: Dataset,
    expert_specs: Sequence[Expert],
    W,
    hyper: HyperParams,
    theta_init: Optional[Sequence[np.ndarray]] = None,
) -> tuple[list[Expert], AdmmState]:
    """Averaged sharing ADMM for the coupled expert problem.

    Starts from the separable fit (or ``theta_init``) with a
    consensus-feasible auxiliary variable and zero duals, then iterates the
    expert, auxiliary and dual updates until both residuals drop below
    ``hyper.admm_tol`` or ``hyper.j_max`` iterations have run.
    """
    W, Phis = _prepare(dataset, expert_specs, W, hyper)
    if theta_init is None:
        experts = fit_separable(dataset, expert_specs, W, hyper)
    else:
        experts = [s.with_params(t) for s, t in zip(expert_specs, theta_init)]
    state = init_admm_state(dataset, experts, W)
    M = len(experts)
    y = dataset.y

    # the left-hand sides do not change across iterations
    factors = []
    for i, Phi in enumerate(Phis):
        w_loc = hyper.beta * hyper.local_coefs[i] * W[:, i]
        H, _ = _theta_system(Phi, w_loc, W[:, i], experts[i].theta, np.zeros(dataset.T), y, hyper)
        _check_spd(H, f"ADMM step for expert {i}")
        factors.append((linalg.cho_factor(H), 2.0 * Phi.T @ (w_loc * y)))

    F = np.column_stack([P @ e.theta for P, e in zip(Phis, experts)])
    z_local = W * F + (state.zbar - _mixture_over_m(F, W))[:, None]
    for j in range(1, hyper.j_max + 1):
        d = _mixture_over_m(F, W) - state.zbar + state.ubar
        new = []
        for i, (Phi, (cho, b0)) in enumerate(zip(Phis, factors)):
            b = b0 + hyper.rho * Phi.T @ (W[:, i] * (W[:, i] * F[:, i] - d))
            new.append(linalg.cho_solve(cho, b))
        experts = [e.with_params(t) for e, t in zip(experts, new)]
        F = np.column_stack([P @ t for P, t in zip(Phis, new)])

        avg = _mixture_over_m(F, W)
        abar = avg + state.ubar
        zbar = (2.0 * hyper.c * y + hyper.rho * abar) / (2.0 * hyper.c * M + hyper.rho)
        r = avg - zbar
        state.ubar = state.ubar + r
        state.zbar = zbar

        z_new = W * F + (zbar - avg)[:, None]
        state.primal_residual = float(np.max(np.abs(r)))
        state.dual_residual = float(hyper.rho * np.max(np.abs(z_new - z_local)))
        z_local = z_new
        state.iteration = j
        state.history.append((j, state.primal_residual, state.dual_residual))
        if state.primal_residual <= hyper.admm_tol and state.dual_residual <= hyper.admm_tol:
            state.converged = True
            break
    return experts, state


def fit_experts(
    dataset: Dataset,
    expert_specs: Sequence[Expert],
    W,
    hyper: HyperParams,
    theta_init: Optional[Sequence[np.ndarray]] = None,
) -> list[Expert]:
    """Expert update used by the alternating fit.

    With ``c == 0`` the separable closed form is exact. Otherwise the
    configured solver runs: the stacked exact solve or the ADMM.
    """
    if hyper.c == 0:
        return fit_separable(dataset, expert_specs, W, hyper)
    if hyper.expert_solver == "admm":
        return fit_admm(dataset, expert_specs, W, hyper, theta_init=theta_init)[0]
    return fit_joint(dataset, expert_specs, W, hyper)
