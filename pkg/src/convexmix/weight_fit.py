"""Mixture-weight updates for fixed experts.

Every row of the weight sequence lives on the probability simplex. The
per-step loss is a convex quadratic in the row, and the smoothness penalty
couples neighbouring rows, so the update is a simplex-constrained QP:

* with ``eta == 0`` it splits into one tiny QP per time step
  (:func:`solve_weights_pointwise`);
* otherwise it is solved over overlapping windows of ``W`` rows that share a
  single sample (:func:`fit_weights_windowed`), each window being a QP in
  ``W * M`` variables (:func:`solve_weights_window`).

All QPs share one solver: projected gradient with Armijo backtracking,
sped up by an exact Newton step on the face each gradient step lands on.
Both steps are accepted only when they do not raise the objective.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy import linalg
from sklearn.exceptions import ConvergenceWarning

from .core import (
    Dataset,
    Expert,
    HyperParams,
    check_weights,
    expert_outputs,
    uniform_weights,
)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex.

    Sort-and-threshold: the projection is ``max(v - tau, 0)`` where ``tau``
    is chosen so that the result sums to one.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    return project_simplex_rows(v[None, :])[0]


def project_simplex_rows(V) -> np.ndarray:
    """Row-wise simplex projection of a 2-D array."""
    V = np.asarray(V, dtype=float)
    n, M = V.shape
    if M == 1:
        return np.ones_like(V)
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    k = np.arange(1, M + 1)
    cond = U - css / k > 0
    last = M - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(n), last] / (last + 1)
    return np.maximum(V - tau[:, None], 0.0)


# --------------------------------------------------------------------------
# simplex-constrained QP over a block of rows
# --------------------------------------------------------------------------


@dataclass
class SolveInfo:
    converged: bool
    n_iter: int
    objective: float
    grad_map_norm: float


class _RowsQP:
    """``sum_r c (y_r - w_r.f_r)^2 + w_r.b_r`` plus chain transitions.

    The rows ``w_r`` are coupled by ``eta ||w_{r+1} - w_r||^2`` and,
    optionally, by the same penalty towards a fixed ``anchor`` before the
    first row and a fixed ``nxt`` after the last one. With ``eta == 0`` the
    rows are independent.
    """

    def __init__(self, F, y, B, c, eta, anchor=None, nxt=None):
        self.F, self.y, self.B = F, y, B
        self.c, self.eta = float(c), float(eta)
        self.anchor = anchor if eta > 0 else None
        self.nxt = nxt if eta > 0 else None
        n, M = F.shape
        self.n, self.M = n, M
        deg = np.zeros(n)
        if eta > 0:
            deg[1:] += 1
            deg[:-1] += 1
            if self.anchor is not None:
                deg[0] += 1
            if self.nxt is not None:
                deg[-1] += 1
        # Hessian: per-row blocks plus -2 eta I between neighbouring rows
        self.Hd = 2 * self.c * F[:, :, None] * F[:, None, :] + (2 * self.eta * deg)[:, None, None] * np.eye(M)
        bound = np.abs(self.Hd).sum(axis=2).max() + (4 * self.eta if n > 1 else 0.0)
        self.lipschitz = max(float(bound), 1e-300)

    def value(self, W) -> float:
        r = self.y - np.einsum("nm,nm->n", W, self.F)
        val = self.c * float(r @ r) + float(np.einsum("nm,nm->", W, self.B))
        if self.eta > 0:
            D = np.diff(W, axis=0)
            val += self.eta * float(np.einsum("nm,nm->", D, D))
            if self.anchor is not None:
                val += self.eta * float(np.sum((W[0] - self.anchor) ** 2))
            if self.nxt is not None:
                val += self.eta * float(np.sum((W[-1] - self.nxt) ** 2))
        return val

    def grad(self, W) -> np.ndarray:
        r = self.y - np.einsum("nm,nm->n", W, self.F)
        G = -2 * self.c * r[:, None] * self.F + self.B
        if self.eta > 0:
            D = np.diff(W, axis=0)
            G[1:] += 2 * self.eta * D
            G[:-1] -= 2 * self.eta * D
            if self.anchor is not None:
                G[0] += 2 * self.eta * (W[0] - self.anchor)
            if self.nxt is not None:
                G[-1] += 2 * self.eta * (W[-1] - self.nxt)
        return G

    def hess_apply(self, D) -> np.ndarray:
        out = np.einsum("nmk,nk->nm", self.Hd, D)
        if self.eta > 0 and self.n > 1:
            out[1:] -= 2 * self.eta * D[:-1]
            out[:-1] -= 2 * self.eta * D[1:]
        return out

    def curvature(self, D) -> float:
        """``D' H D`` for a direction ``D`` of shape (n, M)."""
        val = float(np.einsum("nm,nmk,nk->", D, self.Hd, D))
        if self.eta > 0 and self.n > 1:
            val -= 4 * self.eta * float(np.einsum("nm,nm->", D[:-1], D[1:]))
        return val

    def face_minimizer(self, W, free) -> np.ndarray:
        """Minimise over rows summing to one with ``W[~free] = 0``.

        The KKT system is banded once each row's multiplier is placed right
        after its weights. A tiny proximal term towards ``W`` keeps it
        non-singular when the objective is flat along the face.
        """
        n, M = self.n, self.M
        K = M + 1
        N = n * K
        bw = K
        ab = np.zeros((2 * bw + 1, N))

        def put(i, j, v):
            ab[bw + i - j, j] = v

        rows = np.arange(n) * K
        delta = 1e-12 * self.lipschitz
        for a in range(M):
            for b in range(M):
                put(rows + a, rows + b, self.Hd[:, a, b] + (delta if a == b else 0.0))
            put(rows + a, rows + M, 1.0)
            put(rows + M, rows + a, 1.0)
            if n > 1 and self.eta > 0:
                put(rows[:-1] + a, rows[1:] + a, -2 * self.eta)
                put(rows[1:] + a, rows[:-1] + a, -2 * self.eta)
        rhs = np.zeros((n, K))
        rhs[:, :M] = delta * W - (self.grad(np.zeros_like(W)))
        rhs[:, M] = 1.0
        rhs = rhs.reshape(-1)

        fixed = (rows[:, None] + np.arange(M))[~free]
        if fixed.size:
            for k in range(-bw, bw + 1):
                j = fixed + k
                ok = (j >= 0) & (j < N)
                ab[bw - k, j[ok]] = 0.0
            ab[bw, fixed] = 1.0
            rhs[fixed] = 0.0
        sol = linalg.solve_banded((bw, bw), ab, rhs, check_finite=False)
        return sol.reshape(n, K)[:, :M]


def _solve_rows(qp: _RowsQP, W0, tol: float, max_iter: int) -> tuple[np.ndarray, SolveInfo]:
    """Projected gradient with Armijo backtracking and face Newton steps.

    Each iteration takes one backtracked projected-gradient step (factor
    0.5, first trial step 1.0) and then tries the exact minimiser over the
    face that step landed on; the trial is kept only if it lowers the
    objective, so iterates descend monotonically. Independent rows
    (``eta == 0``) get their own step sizes and acceptance tests. Stops once
    the gradient-mapping norm ``||W - P(W - s grad)|| / s`` is below ``tol``,
    or below the rounding noise of the gradient when that is larger (only
    the case for very stiff problems, e.g. ``eta`` around 1e12).
    """
    X = project_simplex_rows(np.array(W0, dtype=float))
    tol = max(tol, 64 * np.finfo(float).eps * qp.lipschitz * np.sqrt(X.size))
    separable = qp.eta == 0
    # independent rows each get their own step size, so a stiff row does
    # not slow down the flat ones
    s = np.ones((qp.n, 1)) if separable else 1.0
    gm = np.inf
    it = 0
    # objective changes are evaluated from the quadratic model, which is
    # exact and free of the cancellation that plagues differences of values
    while it < max_iter:
        it += 1
        g = qp.grad(X)
        for _ in range(200):
            D = project_simplex_rows(X - s * g) - X
            if separable:
                bad = np.einsum("nm,nmk,nk->n", D, qp.Hd, D) > np.einsum("nm,nm->n", D, D) / s[:, 0]
                if not bad.any():
                    break
                s[bad] *= 0.5
            else:
                if qp.curvature(D) <= float(np.einsum("nm,nm->", D, D)) / s:
                    break
                s *= 0.5
        gm = float(np.sqrt(np.sum((D / s) ** 2)))
        X = X + D
        if gm <= tol:
            break
        g = g + qp.hess_apply(D)
        try:
            cand = qp.face_minimizer(X, X > 0)
        except (linalg.LinAlgError, ValueError):
            continue
        step = cand - X
        if separable:
            # independent rows: accept or shrink each row's step on its own
            pending = np.ones(qp.n, dtype=bool)
            for alpha in (1.0, 0.5, 0.25, 0.125):
                C = project_simplex_rows(X + alpha * step)
                E = C - X
                gain = np.einsum("nm,nm->n", g, E) + 0.5 * np.einsum("nm,nmk,nk->n", E, qp.Hd, E)
                take = pending & (gain <= 0)
                X[take] = C[take]
                pending &= ~take
                if not pending.any():
                    break
            continue
        for alpha in (1.0, 0.5, 0.25, 0.125):
            C = project_simplex_rows(X + alpha * step)
            E = C - X
            if float(np.einsum("nm,nm->", g, E)) + 0.5 * qp.curvature(E) <= 0:
                X = C
                break
    fx = qp.value(X)
    return X, SolveInfo(converged=gm <= tol, n_iter=it, objective=fx, grad_map_norm=gm)


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------


def _local_penalty(F: np.ndarray, y: np.ndarray, hyper: HyperParams) -> np.ndarray:
    """Linear coefficients ``beta c_i (y - f_i)^2`` of the per-step loss."""
    return hyper.beta * hyper.local_coefs[None, :] * (y[:, None] - F) ** 2


def window_objective(
    dataset: Dataset,
    experts: Sequence[Expert],
    W,
    hyper: HyperParams,
    omega_anchor=None,
    omega_next=None,
) -> float:
    """Value minimised by :func:`solve_weights_window` for rows ``W``."""
    return _make_qp(
        expert_outputs(experts, dataset.X), np.asarray(dataset.y, dtype=float), hyper,
        None if omega_anchor is None else np.asarray(omega_anchor, float),
        None if omega_next is None else np.asarray(omega_next, float),
    ).value(np.asarray(W, dtype=float))


def _make_qp(F, y, hyper: HyperParams, anchor=None, nxt=None, eta=None) -> _RowsQP:
    eta = hyper.eta if eta is None else eta
    return _RowsQP(F, y, _local_penalty(F, y, hyper), hyper.c, eta, anchor, nxt)


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


def _warn(what: str, info: SolveInfo, max_iter: int) -> None:
    if not info.converged:
        warnings.warn(
            f"{what} did not reach the projected-gradient tolerance within "
            f"{max_iter} iterations (gradient-mapping norm "
            f"{info.grad_map_norm:.2e}); returning the best iterate",
            ConvergenceWarning,
            stacklevel=3,
        )


_MAX_ENUM_EXPERTS = 8


def _rows_by_enumeration(qp: _RowsQP) -> np.ndarray:
    """Exact minimiser of each independent row by enumerating supports.

    Some minimiser is an extreme point of the optimal set, and on the face
    spanned by its support the reduced Hessian is positive definite (a flat
    direction there would leave the point in the middle of optimal points).
    Solving every such face and keeping the cheapest feasible candidate
    therefore finds the optimum.
    """
    n, M = qp.n, qp.M
    best = np.full(n, np.inf)
    X = np.zeros((n, M))
    floor = 1e-10 * qp.lipschitz
    for k in range(1, M + 1):
        for S in itertools.combinations(range(M), k):
            S = list(S)
            cand = np.zeros((n, M))
            cand[:, S[0]] = 1.0
            ok = np.ones(n, dtype=bool)
            if k > 1:
                # x_S = e_0 + Z u keeps the row summing to one
                Z = np.vstack([-np.ones((1, k - 1)), np.eye(k - 1)])
                H = qp.Hd[:, S][:, :, S]
                Hr = np.einsum("ai,nab,bj->nij", Z, H, Z)
                gr = qp.grad(cand)[:, S] @ Z
                ok = np.linalg.eigvalsh(Hr)[:, 0] > floor
                if not ok.any():
                    continue
                u = np.linalg.solve(Hr[ok], -gr[ok][:, :, None])[:, :, 0]
                cand[np.ix_(ok, S)] += u @ Z.T
                ok &= cand.min(axis=1) >= -1e-12
            cand = project_simplex_rows(cand)
            r = qp.y - np.einsum("nm,nm->n", cand, qp.F)
            val = qp.c * r * r + np.einsum("nm,nm->n", cand, qp.B)
            take = ok & (val < best)
            best[take] = val[take]
            X[take] = cand[take]
    return X


def _pointwise_arrays(F: np.ndarray, y: np.ndarray, hyper: HyperParams) -> np.ndarray:
    qp = _make_qp(F, y, hyper, eta=0.0)
    X, info = _solve_rows(qp, uniform_weights(*F.shape), hyper.weight_tol, hyper.weight_max_iter)
    if not info.converged and qp.M <= _MAX_ENUM_EXPERTS:
        # projected gradient crawls on rows whose loss is nearly flat
        X, info = _solve_rows(qp, _rows_by_enumeration(qp), hyper.weight_tol, hyper.weight_max_iter)
    _warn("pointwise weight fit", info, hyper.weight_max_iter)
    return X


def solve_weights_pointwise(
    dataset: Dataset, experts: Sequence[Expert], hyper: HyperParams
) -> np.ndarray:
    """Per-step optimal weights when no smoothness penalty is applied.

    Every row starts from the uniform vector, so when the loss is flat in
    some direction the returned row stays as close to uniform as the
    optimality conditions allow.
    """
    F = expert_outputs(experts, dataset.X)
    return check_weights(_pointwise_arrays(F, np.asarray(dataset.y), hyper))


def _window_arrays(F, y, W0, anchor, nxt, hyper: HyperParams) -> tuple[np.ndarray, SolveInfo]:
    qp = _make_qp(F, y, hyper, anchor, nxt)
    return _solve_rows(qp, W0, hyper.weight_tol, hyper.weight_max_iter)


def solve_weights_window(
    dataset: Dataset,
    experts: Sequence[Expert],
    omega_init,
    hyper: HyperParams,
    omega_anchor=None,
    omega_next=None,
) -> np.ndarray:
    """Smoothness-coupled weights for a block of consecutive samples.

    Minimises the summed per-step losses plus ``eta`` times the squared
    differences between consecutive rows. ``omega_anchor`` is a fixed row
    preceding the block and ``omega_next`` a fixed row following it; each
    contributes one extra transition term when given.
    """
    F = expert_outputs(experts, dataset.X)
    W0 = check_weights(omega_init, F.shape[1])
    if W0.shape[0] != dataset.T:
        raise ValueError("omega_init must have one row per sample in the window")
    anchor = None if omega_anchor is None else check_weights(omega_anchor, F.shape[1])[0]
    nxt = None if omega_next is None else check_weights(omega_next, F.shape[1])[0]
    W, info = _window_arrays(F, np.asarray(dataset.y), W0, anchor, nxt, hyper)
    _warn("window weight fit", info, hyper.weight_max_iter)
    return check_weights(W)


@dataclass(frozen=True)
class WindowPlan:
    """Windows of ``length`` rows, consecutive windows sharing one row."""

    T: int
    length: int

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("window length must be >= 2")
        if self.T < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def starts(self) -> list[int]:
        if self.T == 1:
            return [0]
        return list(range(0, self.T - 1, self.length - 1))

    def __iter__(self) -> Iterator[tuple[int, int]]:
        for a in self.starts:
            yield a, min(a + self.length, self.T)

    def __len__(self) -> int:
        return len(self.starts)


def fit_weights_windowed(
    dataset: Dataset,
    experts: Sequence[Expert],
    omega_prev,
    hyper: HyperParams,
) -> np.ndarray:
    """Window-by-window weight update starting from ``omega_prev``.

    Windows are visited left to right. Each one is warm-started from the
    current rows, tied to the last row kept from the previous window and to
    the not-yet-updated row after it; its final row is then overwritten by
    the next window. Every window solve is a descent step on the full
    objective, so the result never costs more than ``omega_prev``.

    With ``eta == 0`` the rows decouple and the pointwise solver is used for
    every window length.
    """
    F = expert_outputs(experts, dataset.X)
    y = np.asarray(dataset.y)
    cur = np.array(check_weights(omega_prev, F.shape[1]))
    if cur.shape[0] != dataset.T:
        raise ValueError(f"omega_prev has {cur.shape[0]} rows, dataset has {dataset.T}")
    if hyper.eta == 0:
        return check_weights(_pointwise_arrays(F, y, hyper))
    unconverged = []
    for a, b in WindowPlan(dataset.T, hyper.window):
        anchor = cur[a - 1] if a > 0 else None
        nxt = cur[b] if b < dataset.T else None
        W, info = _window_arrays(F[a:b], y[a:b], cur[a:b], anchor, nxt, hyper)
        cur[a:b] = W
        if not info.converged:
            unconverged.append(info.grad_map_norm)
    if unconverged:
        warnings.warn(
            f"{len(unconverged)} window(s) stopped before the projected-gradient "
            f"tolerance (worst gradient-mapping norm {max(unconverged):.2e})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return check_weights(cur)
