"""Weight prediction once the experts are fixed.

Three routes are available:

* :func:`predict_recursive` -- one step, from the previous weight row only;
* :func:`predict_filtered` -- one step ahead, re-solving the smoothed weight
  problem over the recent history of observed outputs;
* :class:`GatingModel` -- a nearest-neighbour map from regressors to the
  weights found during training.

In the first two the current output is unknown, so it is optimised jointly
with the current weight row by alternating two exact half-steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from .core import (
    SIMPLEX_TOL,
    Expert,
    HyperParams,
    check_weights,
    expert_outputs,
)
from .weight_fit import _make_qp, _solve_rows, project_simplex_rows

DEFAULT_HORIZON = 500


def output_estimate(omega, preds, hyper: HyperParams) -> float:
    """Output minimising the per-step loss for a fixed weight row.

    The stationary point of ``c (y - w.f)^2 + beta sum_i w_i c_i (y - f_i)^2``
    is the weighted average ``(c w.f + beta sum w_i c_i f_i) / (c + beta sum w_i c_i)``.
    """
    omega = np.asarray(omega, dtype=float)
    preds = np.asarray(preds, dtype=float)
    loc = hyper.beta * omega * hyper.local_coefs
    den = hyper.c + loc.sum()
    if den <= 0:
        return float(omega @ preds)
    return float((hyper.c * (omega @ preds) + loc @ preds) / den)


def recursive_objective(y, omega, preds, omega_prev, hyper: HyperParams) -> float:
    """``c (y - w.f)^2 + beta sum w_i c_i (y - f_i)^2 + eta ||w - w_prev||^2``."""
    omega = np.asarray(omega, dtype=float)
    preds = np.asarray(preds, dtype=float)
    val = hyper.c * (y - omega @ preds) ** 2
    val += hyper.beta * float(np.sum(omega * hyper.local_coefs * (y - preds) ** 2))
    val += hyper.eta * float(np.sum((omega - np.asarray(omega_prev, dtype=float)) ** 2))
    return float(val)


def _alternate(
    solve_rows, row_preds, W0, hyper: HyperParams, max_iter: int, tol: float, secant: bool = False
):
    """Alternate the closed-form output update with the weight QP.

    ``solve_rows(W, y_cur)`` returns new weights given the current output
    estimate for the last row; ``row_preds`` are the expert predictions for
    that row.

    The plain alternation is a descent method but can crawl. With
    ``secant=True`` the scalar output is instead driven to a root of
    ``g(y) = y*(W(y)) - y`` by secant steps; ``g`` is piecewise affine, so a
    couple of QP solves usually suffice. Since ``y*`` is a weighted average
    of the expert predictions, the root is bracketed by their range; steps
    that leave the current bracket, or keep moving the same end of it, are
    replaced by bisection.
    """
    W = W0
    y_cur = output_estimate(W[-1], row_preds, hyper)
    lo, hi = float(np.min(row_preds)), float(np.max(row_preds))  # g(lo) >= 0 >= g(hi)
    converged = False
    prev = None  # (y, g) of the previous evaluation
    same_side = 0
    last_side = 0
    for _ in range(max_iter):
        W_new = solve_rows(W, y_cur)
        y_fix = output_estimate(W_new[-1], row_preds, hyper)
        g = y_fix - y_cur
        step = max(abs(g), float(np.max(np.abs(W_new - W))))
        W = W_new
        if step <= tol:
            y_cur = y_fix
            converged = True
            break
        if not secant:
            y_cur = y_fix
            continue
        side = 1 if g > 0 else -1
        if g > 0:
            lo = max(lo, y_cur)
        else:
            hi = min(hi, y_cur)
        same_side = same_side + 1 if side == last_side else 1
        last_side = side
        y_next = y_fix
        if prev is not None and prev[0] != y_cur:
            slope = (g - prev[1]) / (y_cur - prev[0])
            if slope < 0:
                y_next = y_cur - g / slope
        if not lo < y_next < hi or same_side > 2:
            y_next = 0.5 * (lo + hi)
            same_side = 0
        prev = (y_cur, g)
        y_cur = y_next
    return W, y_cur, converged


def predict_recursive(
    x_new,
    omega_prev,
    experts: Sequence[Expert],
    hyper: HyperParams,
    max_iter: int = 5000,
    tol: float = 1e-8,
) -> tuple[float, np.ndarray]:
    """Jointly pick the output and weight row for a new regressor.

    Minimises :func:`recursive_objective` over ``y`` and the simplex row,
    starting from ``omega_prev``.
    """
    M = len(experts)
    prev = np.array(check_weights(omega_prev, M)[0])
    preds = expert_outputs(experts, np.asarray(x_new, dtype=float).reshape(1, -1))[0]

    def solve(W, y_cur):
        qp = _make_qp(preds[None, :], np.array([y_cur]), hyper, anchor=prev)
        return _solve_rows(qp, W, hyper.weight_tol, hyper.weight_max_iter)[0]

    W, y_hat, ok = _alternate(solve, preds, prev[None, :], hyper, max_iter, tol, secant=True)
    if not ok:
        warnings.warn("recursive prediction did not settle; returning the last iterate", ConvergenceWarning, stacklevel=2)
    return y_hat, np.array(check_weights(W))[0]


def predict_recursive_sequence(
    X_seq,
    y_seq,
    experts: Sequence[Expert],
    hyper: HyperParams,
    omega_start=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Chain :func:`predict_recursive` over a sequence, correcting as outputs arrive.

    Step ``t`` predicts from the previous weight row. Once ``y_seq[t]`` is
    known, that row is re-fitted to it (a single-row weight problem anchored
    at the prediction) before moving on. Without the correction the weights
    could never leave ``omega_start``, since an unknown output is always
    matched exactly by the mixture. ``y_seq`` may be one shorter than
    ``X_seq``.

    Returns the predicted outputs and the weight row used for each prediction.
    """
    X_seq = np.asarray(X_seq, dtype=float)
    if X_seq.ndim == 1:
        X_seq = X_seq.reshape(-1, 1)
    y_seq = np.asarray(y_seq, dtype=float).reshape(-1)
    T = X_seq.shape[0]
    if y_seq.size not in (T, T - 1):
        raise ValueError(f"need {T} or {T - 1} outputs for {T} regressors, got {y_seq.size}")
    M = len(experts)
    prev = np.full(M, 1.0 / M) if omega_start is None else np.array(check_weights(omega_start, M)[0])
    F = expert_outputs(experts, X_seq)
    y_hat = np.empty(T)
    omegas = np.empty((T, M))
    for t in range(T):
        y_hat[t], omegas[t] = predict_recursive(X_seq[t], prev, experts, hyper)
        if t < y_seq.size:
            qp = _make_qp(F[t][None, :], y_seq[t:t + 1], hyper, anchor=omegas[t])
            prev = project_simplex_rows(_solve_rows(qp, omegas[t][None, :], hyper.weight_tol, hyper.weight_max_iter)[0])[0]
        else:
            prev = omegas[t]
    return y_hat, np.array(check_weights(omegas))


def predict_filtered(
    X_seq,
    y_seq,
    experts: Sequence[Expert],
    hyper: HyperParams,
    horizon: int = DEFAULT_HORIZON,
    omega_start=None,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """One-step-ahead predictions over a sequence.

    At step ``t`` only ``y_seq[:t]`` is used: the smoothed weight problem is
    solved over the last ``horizon`` observed samples plus the current one,
    whose output is treated as unknown. ``y_seq`` may have the same length
    as ``X_seq`` (its last entry is then never used) or one fewer.

    Returns the predicted outputs and the weight row used at each step.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    X_seq = np.asarray(X_seq, dtype=float)
    if X_seq.ndim == 1:
        X_seq = X_seq.reshape(-1, 1)
    y_seq = np.asarray(y_seq, dtype=float).reshape(-1)
    T = X_seq.shape[0]
    if y_seq.size not in (T, T - 1):
        raise ValueError(f"need {T} or {T - 1} outputs for {T} regressors, got {y_seq.size}")
    M = len(experts)
    F = expert_outputs(experts, X_seq)
    start = np.full(M, 1.0 / M) if omega_start is None else np.array(check_weights(omega_start, M)[0])

    y_hat = np.empty(T)
    omegas = np.empty((T, M))
    W_hist = np.empty((0, M))  # current estimates for rows [lo, t)
    lo = 0
    unsettled = 0
    for t in range(T):
        new_lo = max(0, t - horizon)
        if new_lo > lo:
            W_hist = W_hist[new_lo - lo:]
            lo = new_lo
        anchor = None if lo == 0 else omegas[lo - 1]
        last = W_hist[-1] if W_hist.shape[0] else start
        W0 = np.vstack([W_hist, last[None, :]])
        y_obs = y_seq[lo:t]
        Fw = F[lo:t + 1]

        def solve(W, y_cur):
            qp = _make_qp(Fw, np.append(y_obs, y_cur), hyper, anchor=anchor)
            return _solve_rows(qp, W, hyper.weight_tol, hyper.weight_max_iter)[0]

        W, y_t, ok = _alternate(solve, F[t], W0, hyper, max_iter, tol, secant=True)
        unsettled += not ok
        W = project_simplex_rows(W)
        y_hat[t] = y_t
        omegas[t] = W[-1]
        W_hist = W
    if unsettled:
        warnings.warn(f"{unsettled} filtered step(s) did not settle", ConvergenceWarning, stacklevel=2)
    return y_hat, np.array(check_weights(omegas))


# --------------------------------------------------------------------------
# gating
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GatingModel:
    """Inverse-distance k-nearest-neighbour map from regressors to weights.

    Neighbours at equal distance are ranked by their stored index. If any
    of the ``k`` neighbours coincides with the query, only the coincident
    ones are averaged, so a stored regressor returns its own weight row.
    """

    k: int
    train_x: np.ndarray
    train_w: np.ndarray

    def __post_init__(self):
        X = np.array(self.train_x, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        W = np.array(check_weights(self.train_w))
        if X.shape[0] != W.shape[0]:
            raise ValueError("train_x and train_w must have the same number of rows")
        if not 1 <= self.k <= X.shape[0]:
            raise ValueError(f"k must lie in 1..{X.shape[0]}, got {self.k}")
        X.setflags(write=False)
        W.setflags(write=False)
        object.__setattr__(self, "train_x", X)
        object.__setattr__(self, "train_w", W)

    @property
    def n_experts(self) -> int:
        return self.train_w.shape[1]

    def neighbors(self, X, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``k`` nearest stored regressors."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.train_x.shape[1]:
            raise ValueError(f"expected {self.train_x.shape[1]} inputs, got {X.shape[1]}")
        n = X.shape[0]
        dist = np.empty((n, self.k))
        idx = np.empty((n, self.k), dtype=int)
        for a in range(0, n, chunk):
            diff = X[a:a + chunk, None, :] - self.train_x[None, :, :]
            d = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
            order = np.argsort(d, axis=1, kind="stable")[:, : self.k]
            idx[a:a + chunk] = order
            dist[a:a + chunk] = np.take_along_axis(d, order, axis=1)
        return dist, idx

    def predict(self, X) -> np.ndarray:
        dist, idx = self.neighbors(X)
        rows = self.train_w[idx]  # (n, k, M)
        exact = dist == 0
        with np.errstate(divide="ignore"):
            wts = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), 1.0 / dist)
        out = np.einsum("nk,nkm->nm", wts, rows) / wts.sum(axis=1, keepdims=True)
        single = (wts > 0).sum(axis=1) == 1
        out[single] = rows[single, np.argmax(wts[single], axis=1)]
        off = np.abs(out.sum(axis=1) - 1) > SIMPLEX_TOL * 1e-3
        off |= (out < 0).any(axis=1)
        if off.any():
            out[off] = project_simplex_rows(out[off])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "knn",
            "k": self.k,
            "train_x": [[float(v) for v in r] for r in self.train_x],
            "train_w": [[float(v) for v in r] for r in self.train_w],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GatingModel":
        if d.get("kind", "knn") != "knn":
            raise ValueError(f"unsupported gating kind {d.get('kind')!r}")
        return cls(int(d["k"]), np.array(d["train_x"], dtype=float), np.array(d["train_w"], dtype=float))


def train_gating(train_x, omega_star, k: int = 5) -> GatingModel:
    return GatingModel(k, train_x, omega_star)


def gate_predict(model: GatingModel, x_new) -> np.ndarray:
    """Weight row for a single regressor (or rows for a 2-D batch)."""
    x = np.asarray(x_new, dtype=float)
    out = model.predict(x)
    return out[0] if x.ndim == 1 else out
