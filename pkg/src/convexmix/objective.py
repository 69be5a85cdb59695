"""Loss terms of the fitting objective.

The objective of a weight sequence ``W`` and experts ``Theta`` is::

    J = sum_t [ c (y - W(t).f)^2 + beta sum_i W_i(t) c_i (y - f_i)^2 ]
        + lambda_theta sum_i ||theta_i||^2
        + eta sum_{t>=2} ||W(t) - W(t-1)||^2

Each quadratic term has a Gaussian reading: the mixture loss matches an
output noise of standard deviation ``sqrt(1/(2c))``, the local loss one of
``sqrt(1/(2 c_i))`` per expert, and the ridge term a zero-mean prior on
``theta`` with standard deviation ``sqrt(1/(2 lambda_theta))``. Nothing in
the package depends on that reading.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import (
    Dataset,
    Expert,
    HyperParams,
    LossBreakdown,
    expert_outputs,
    one_hot,
)


def mix_loss(y: float, omega, preds, c: float) -> float:
    """Squared error of the blended prediction, ``c (y - omega . preds)^2``."""
    omega = np.asarray(omega, dtype=float)
    preds = np.asarray(preds, dtype=float)
    if omega.shape != preds.shape:
        raise ValueError(f"omega {omega.shape} and preds {preds.shape} differ")
    return float(c * (y - omega @ preds) ** 2)


def local_loss(x, y: float, experts: Sequence[Expert], omega, c_list) -> float:
    """Weight-masked squared errors of the individual experts."""
    omega = np.asarray(omega, dtype=float)
    c_list = np.asarray(c_list, dtype=float)
    if not (len(experts) == omega.size == c_list.size):
        raise ValueError("omega, experts and c_list must all have length M")
    preds = expert_outputs(experts, np.asarray(x, dtype=float).reshape(1, -1))[0]
    return float(np.sum(omega * c_list * (y - preds) ** 2))


def step_loss(x, y: float, omega, experts: Sequence[Expert], hyper: HyperParams) -> float:
    """Per-sample loss: mixture term plus ``beta`` times the local term."""
    preds = expert_outputs(experts, np.asarray(x, dtype=float).reshape(1, -1))[0]
    mix = mix_loss(y, omega, preds, hyper.c)
    if hyper.beta == 0:
        return mix
    return mix + hyper.beta * local_loss(x, y, experts, omega, hyper.local_coefs)


def step_terms(y, W, F, hyper: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised mixture and (un-scaled) local losses for every time step.

    ``F`` holds expert predictions, shape (T, M). Returns two arrays of
    length T; the per-step loss is ``mix + beta * local``.
    """
    y = np.asarray(y, dtype=float)
    R = y[:, None] - F
    mix = hyper.c * np.einsum("tm,tm->t", W, R) ** 2
    local = (W * R**2) @ hyper.local_coefs
    return mix, local


def shaper(W, eta: float) -> float:
    """Smoothness penalty ``eta sum_t ||W(t) - W(t-1)||^2``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if eta == 0 or W.shape[0] < 2:
        return 0.0
    return float(eta * np.sum(np.diff(W, axis=0) ** 2))


def regularizer(experts: Sequence[Expert], lambda_theta: float) -> float:
    """Quadratic group regularizer ``lambda_theta sum_i ||theta_i||^2``."""
    if lambda_theta == 0:
        return 0.0
    return float(lambda_theta * sum(float(e.theta @ e.theta) for e in experts))


def total_cost(
    dataset: Dataset, experts: Sequence[Expert], W, hyper: HyperParams
) -> LossBreakdown:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[0] != dataset.T:
        raise ValueError(f"weights have {W.shape[0]} rows, dataset has {dataset.T}")
    if W.shape[1] != len(experts):
        raise ValueError(f"weights have {W.shape[1]} columns for {len(experts)} experts")
    F = expert_outputs(experts, dataset.X)
    mix, local = step_terms(dataset.y, W, F, hyper)
    mix_sum = float(mix.sum())
    local_sum = float(local.sum())
    reg = regularizer(experts, hyper.lambda_theta)
    shp = shaper(W, hyper.eta)
    return LossBreakdown(
        mix_term=mix_sum,
        local_term=local_sum,
        regularizer_term=reg,
        shaper_term=shp,
        total=mix_sum + hyper.beta * local_sum + reg + shp,
    )


def jump_cost(
    dataset: Dataset, experts: Sequence[Expert], modes, hyper: HyperParams
) -> float:
    """Objective of a jump model with mode sequence ``modes`` (0-based).

    Each sample is explained by its active expert alone, and every mode
    switch costs ``2 eta`` (the squared distance between two vertices of the
    simplex). This is the objective evaluated at the one-hot weights induced
    by ``modes``, written without reference to weights.
    """
    M = len(experts)
    modes = np.asarray(modes, dtype=int).reshape(-1)
    if modes.size != dataset.T:
        raise ValueError(f"mode sequence has length {modes.size}, dataset has {dataset.T}")
    if modes.size and (modes.min() < 0 or modes.max() >= M):
        raise ValueError(f"modes must lie in 0..{M - 1}")
    F = expert_outputs(experts, dataset.X)
    active = F[np.arange(dataset.T), modes]
    resid2 = (dataset.y - active) ** 2
    fit = hyper.c * resid2.sum() + hyper.beta * np.sum(hyper.local_coefs[modes] * resid2)
    switches = int(np.count_nonzero(np.diff(modes)))
    return float(fit + regularizer(experts, hyper.lambda_theta) + 2.0 * hyper.eta * switches)


def jump_weights(modes, M: int) -> np.ndarray:
    """One-hot weight sequence induced by a mode sequence."""
    return one_hot(modes, M)
