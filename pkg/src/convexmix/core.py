"""Domain types shared across the package.

A mixture is a set of ``M`` experts ``f_i(x; theta_i) = phi_i(x) @ theta_i``
blended at every time step by a row of non-negative weights summing to one.
Weight sequences are plain ``(T, M)`` float arrays; :func:`check_weights`
is the single gate that validates (and clamps floating-point drift off) them.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9

EXPERT_KINDS = ("linear", "polynomial")
EXPERT_SOLVERS = ("joint", "admm")


class InvalidWeightsError(ValueError):
    """Raised when a weight sequence violates the simplex by more than the tolerance."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations are singular and no ridge term is available to fix them."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Time-ordered regressor/output pairs.

    Parameters
    ----------
    X : array-like of shape (T, n_inputs)
        Regressors ``x(t)``.
    y : array-like of shape (T,)
        Scalar outputs ``y(t)``.
    true_weights : array-like of shape (T, M), optional
        Ground-truth mixture weights, when the data come from a benchmark.
    """

    X: np.ndarray
    y: np.ndarray
    true_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise ValueError(f"regressors must be 2-D, got shape {X.shape}")
        if y.ndim != 1:
            y = y.reshape(-1)
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if X.shape[0] != y.shape[0]:
            raise ValueError(
                f"regressors and outputs differ in length: {X.shape[0]} != {y.shape[0]}"
            )
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "y", _readonly(y))
        if self.true_weights is not None:
            W = check_weights(self.true_weights)
            if W.shape[0] != X.shape[0]:
                raise ValueError("true_weights length does not match the dataset")
            object.__setattr__(self, "true_weights", W)

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.T

    def subset(self, index) -> "Dataset":
        """Rows selected by ``index`` (slice, boolean mask or integer array)."""
        W = None if self.true_weights is None else self.true_weights[index]
        return Dataset(self.X[index], self.y[index], W)


def build_arx_regressors(outputs, inputs, ny: int, nu: int) -> Dataset:
    """Lagged ARX regressors ``[y(t-1)..y(t-ny), u(t-1)..u(t-nu)]``.

    The first ``max(ny, nu)`` samples lack a full history and are dropped.

    >>> ds = build_arx_regressors([1, 2, 3], [4, 5, 6], ny=2, nu=2)
    >>> ds.X.tolist(), ds.y.tolist()
    ([[2.0, 1.0, 5.0, 4.0]], [3.0])
    """
    y = np.asarray(outputs, dtype=float).reshape(-1)
    u = np.asarray(inputs, dtype=float).reshape(-1)
    if y.size == 0 or u.size == 0:
        raise ValueError("empty output or input sequence")
    if y.size != u.size:
        raise ValueError(f"outputs and inputs differ in length: {y.size} != {u.size}")
    if ny < 0 or nu < 0 or ny + nu < 1:
        raise ValueError("need ny, nu >= 0 and ny + nu >= 1")
    start = max(ny, nu)
    if y.size <= start:
        raise ValueError(f"sequence of length {y.size} too short for lags ({ny}, {nu})")
    rows = np.arange(start, y.size)
    cols = [y[rows - k] for k in range(1, ny + 1)]
    cols += [u[rows - k] for k in range(1, nu + 1)]
    return Dataset(np.column_stack(cols), y[rows])


# --------------------------------------------------------------------------
# Experts
# --------------------------------------------------------------------------


def monomial_exponents(n_inputs: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples of a polynomial feature map.

    The constant term comes first, followed by every exponent tuple of total
    degree ``1..degree`` in ascending lexicographic order, e.g. for two
    inputs and degree 2: ``1, x2, x2^2, x1, x1 x2, x1^2``.
    """
    if n_inputs < 1 or degree < 1:
        raise ValueError("n_inputs and degree must be >= 1")
    others = [
        a
        for a in itertools.product(range(degree + 1), repeat=n_inputs)
        if 1 <= sum(a) <= degree
    ]
    others.sort()
    return ((0,) * n_inputs,) + tuple(others)


@dataclass(frozen=True, eq=False)
class Expert:
    """A local model that is linear in its parameters.

    ``kind="linear"`` uses the identity feature map (no intercept), so the
    parameter vector has one entry per input. ``kind="polynomial"`` uses the
    monomials returned by :func:`monomial_exponents`.
    """

    n_inputs: int
    kind: str = "linear"
    degree: int = 1
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.n_inputs < 1:
            raise ValueError("n_inputs must be >= 1")
        if self.kind == "linear" and self.degree != 1:
            raise ValueError("linear experts have degree 1")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.theta is None:
            theta = np.zeros(self.n_params)
        else:
            theta = np.array(self.theta, dtype=float).reshape(-1)
            if theta.size != self.n_params:
                raise ValueError(
                    f"expected {self.n_params} parameters, got {theta.size}"
                )
        object.__setattr__(self, "theta", _readonly(theta))

    @classmethod
    def linear(cls, n_inputs: int, theta=None) -> "Expert":
        return cls(n_inputs, "linear", 1, theta)

    @classmethod
    def polynomial(cls, n_inputs: int, degree: int, theta=None) -> "Expert":
        return cls(n_inputs, "polynomial", degree, theta)

    @property
    def exponents(self) -> tuple[tuple[int, ...], ...]:
        if self.kind == "linear":
            return tuple(tuple(int(i == j) for j in range(self.n_inputs))
                         for i in range(self.n_inputs))
        return monomial_exponents(self.n_inputs, self.degree)

    @property
    def n_params(self) -> int:
        if self.kind == "linear":
            return self.n_inputs
        return len(monomial_exponents(self.n_inputs, self.degree))

    def features(self, X) -> np.ndarray:
        """Evaluate the feature map on regressors of shape (T, n_inputs)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_inputs:
            raise ValueError(
                f"expert expects {self.n_inputs} inputs, got {X.shape[1]}"
            )
        if self.kind == "linear":
            return X
        E = np.array(self.exponents)
        return np.prod(X[:, None, :] ** E[None, :, :], axis=2)

    def predict(self, X) -> np.ndarray:
        return self.features(X) @ self.theta

    def with_params(self, theta) -> "Expert":
        return dataclasses.replace(self, theta=theta)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "degree": self.degree,
            "n_inputs": self.n_inputs,
            "feature_order": [list(e) for e in self.exponents],
            "theta": [float(v) for v in self.theta],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Expert":
        expert = cls(int(d["n_inputs"]), d["kind"], int(d["degree"]), d["theta"])
        order = d.get("feature_order")
        if order is not None and [list(e) for e in expert.exponents] != order:
            raise ValueError("stored feature order does not match this version")
        return expert


def parse_expert_spec(spec: str, n_inputs: int) -> Expert:
    """``"linear"`` or ``"poly<d>"`` / ``"polynomial<d>"`` to an unfitted expert."""
    s = spec.strip().lower()
    if s == "linear":
        return Expert.linear(n_inputs)
    for prefix in ("polynomial", "poly"):
        if s.startswith(prefix) and s[len(prefix):].isdigit():
            return Expert.polynomial(n_inputs, int(s[len(prefix):]))
    raise ValueError(f"cannot parse expert spec {spec!r}")


def expert_outputs(experts: Sequence[Expert], X) -> np.ndarray:
    """Stacked predictions, shape (T, M)."""
    return np.column_stack([e.predict(X) for e in experts])


def stack_params(experts: Sequence[Expert]) -> np.ndarray:
    return np.concatenate([e.theta for e in experts])


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightViolation:
    t: int
    i: Optional[int]  # None for a row-sum violation
    kind: str  # "lower", "upper" or "sum"
    magnitude: float


@dataclass(frozen=True)
class WeightReport:
    violations: tuple[WeightViolation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def first(self) -> Optional[WeightViolation]:
        return self.violations[0] if self.violations else None

    def __bool__(self) -> bool:
        return self.ok


def validate_weights(W, tol: float = SIMPLEX_TOL) -> WeightReport:
    """Report the first row of ``W`` that leaves the probability simplex.

    All violations found in that row are listed, bound violations before the
    row-sum violation. An empty report means every row is feasible.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    low = W < -tol
    high = W > 1 + tol
    sums = W.sum(axis=1) - 1.0
    bad_sum = np.abs(sums) > tol
    bad_rows = np.flatnonzero(low.any(axis=1) | high.any(axis=1) | bad_sum | ~np.isfinite(W).all(axis=1))
    if bad_rows.size == 0:
        return WeightReport()
    t = int(bad_rows[0])
    out = []
    for i, w in enumerate(W[t]):
        if not np.isfinite(w):
            out.append(WeightViolation(t, i, "nonfinite", float("nan")))
        elif w < -tol:
            out.append(WeightViolation(t, i, "lower", float(-w)))
        elif w > 1 + tol:
            out.append(WeightViolation(t, i, "upper", float(w - 1)))
    if bad_sum[t]:
        out.append(WeightViolation(t, None, "sum", float(abs(sums[t]))))
    return WeightReport(tuple(out))


def check_weights(W, n_experts: Optional[int] = None) -> np.ndarray:
    """Validated, clamped, read-only copy of a weight sequence.

    Entries within :data:`SIMPLEX_TOL` of the simplex are clipped and rows
    renormalised; anything further off raises :class:`InvalidWeightsError`.
    """
    W = np.array(W, dtype=float)
    if W.ndim == 1:
        W = W.reshape(1, -1)
    if W.ndim != 2 or W.shape[1] < 1:
        raise InvalidWeightsError(f"weights must be a (T, M) array, got shape {W.shape}")
    if n_experts is not None and W.shape[1] != n_experts:
        raise InvalidWeightsError(f"expected {n_experts} weight columns, got {W.shape[1]}")
    report = validate_weights(W)
    if not report.ok:
        v = report.first
        raise InvalidWeightsError(
            f"row {v.t} leaves the simplex ({v.kind} violation of {v.magnitude:.3g})"
        )
    clipped = (W < 0).any(axis=1) | (W > 1).any(axis=1)
    W = np.clip(W, 0.0, 1.0)
    # only rows that drifted are rescaled, so feasible input passes through bit-for-bit
    drift = clipped | (np.abs(W.sum(axis=1) - 1.0) > 8 * np.finfo(float).eps)
    W[drift] /= W[drift].sum(axis=1, keepdims=True)
    return _readonly(W)


def uniform_weights(T: int, M: int) -> np.ndarray:
    return np.full((T, M), 1.0 / M)


def one_hot(modes, M: int) -> np.ndarray:
    modes = np.asarray(modes, dtype=int).reshape(-1)
    if modes.size and (modes.min() < 0 or modes.max() >= M):
        raise ValueError(f"modes must lie in 0..{M - 1}")
    W = np.zeros((modes.size, M))
    W[np.arange(modes.size), modes] = 1.0
    return W


def mixture_predict(experts: Sequence[Expert], omega, x) -> float:
    """Convex combination ``sum_i omega_i f_i(x; theta_i)`` at a single regressor."""
    if len(experts) == 0:
        raise ValueError("no experts")
    omega = check_weights(np.asarray(omega, dtype=float).reshape(1, -1), len(experts))[0]
    x = np.asarray(x, dtype=float).reshape(1, -1)
    preds = np.array([e.predict(x)[0] for e in experts])
    return float(omega @ preds)


def mixture_output(experts: Sequence[Expert], W, X) -> np.ndarray:
    """Row-wise ``Omega(t) . f(x(t); Theta)`` for a whole sequence."""
    F = expert_outputs(experts, X)
    W = np.asarray(W, dtype=float)
    if W.shape != F.shape:
        raise ValueError(f"weights of shape {W.shape} do not match predictions {F.shape}")
    return np.einsum("tm,tm->t", W, F)


# --------------------------------------------------------------------------
# Hyper-parameters and fitted model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperParams:
    """Tunables of the alternating fit and its inner solvers.

    Defaults reproduce the numerical benchmark configuration
    (``M=2, lambda_theta=5e-3, eta=50, rho=1e-9, beta=1e-6, j_max=120,
    k_max=70``). ``c`` and ``c_i`` weight the mixture and local squared
    losses; ``c_i=None`` means all ones.

    ``expert_solver`` selects how the expert update is computed: ``"joint"``
    solves the stacked weighted-ridge normal equations exactly, ``"admm"``
    runs the averaged sharing ADMM for ``j_max`` iterations.
    """

    n_experts: int = 2
    beta: float = 1e-6
    lambda_theta: float = 5e-3
    eta: float = 50.0
    rho: float = 1e-9
    c: float = 1.0
    c_i: Optional[tuple[float, ...]] = None
    window: int = 100
    eps_theta: float = 1e-6
    eps_omega: float = 1e-6
    eps_J: float = 1e-9
    k_max: int = 70
    j_max: int = 120
    n_restarts: int = 5
    seed: int = 0
    expert_solver: str = "joint"
    admm_tol: float = 1e-8
    weight_tol: float = 1e-8
    weight_max_iter: int = 5000

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ValueError(msg)

        need(self.n_experts >= 1, "n_experts must be >= 1")
        need(self.beta >= 0, "beta must be >= 0")
        need(self.lambda_theta >= 0, "lambda_theta must be >= 0")
        need(self.eta >= 0, "eta must be >= 0")
        need(self.rho > 0, "rho must be > 0")
        need(self.c >= 0, "c must be >= 0")
        need(self.window >= 2, "window must be >= 2")
        need(min(self.eps_theta, self.eps_omega, self.eps_J) >= 0, "tolerances must be >= 0")
        need(self.k_max >= 1, "k_max must be >= 1")
        need(self.j_max >= 1, "j_max must be >= 1")
        need(self.n_restarts >= 1, "n_restarts must be >= 1")
        need(self.expert_solver in EXPERT_SOLVERS, f"expert_solver must be one of {EXPERT_SOLVERS}")
        need(self.weight_max_iter >= 1, "weight_max_iter must be >= 1")
        if self.c_i is not None:
            ci = tuple(float(v) for v in np.atleast_1d(self.c_i))
            need(len(ci) == self.n_experts, "c_i needs one entry per expert")
            need(all(v > 0 for v in ci), "c_i entries must be > 0")
            object.__setattr__(self, "c_i", ci)

    @property
    def local_coefs(self) -> np.ndarray:
        if self.c_i is None:
            return np.ones(self.n_experts)
        return np.array(self.c_i)

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["c_i"] is not None:
            d["c_i"] = list(d["c_i"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HyperParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown hyper-parameters: {sorted(unknown)}")
        d = dict(d)
        if d.get("c_i") is not None:
            d["c_i"] = tuple(d["c_i"])
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the fitting objective; ``total`` is their sum with ``beta`` applied."""

    mix_term: float
    local_term: float
    regularizer_term: float
    shaper_term: float
    total: float


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Fitted experts, their training weights and (optionally) a gating model."""

    experts: tuple[Expert, ...]
    train_weights: np.ndarray
    hyper: HyperParams
    cost_trace: tuple[LossBreakdown, ...] = ()
    gating: Any = None

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(
            self, "train_weights", check_weights(self.train_weights, len(self.experts))
        )
        object.__setattr__(self, "cost_trace", tuple(self.cost_trace))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def costs(self) -> np.ndarray:
        return np.array([b.total for b in self.cost_trace])

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1].total if self.cost_trace else float("nan")

    def predict(self, X, W) -> np.ndarray:
        """Mixture output for regressors ``X`` under weight rows ``W``."""
        return mixture_output(self.experts, check_weights(W, self.n_experts), X)

    def with_gating(self, gating) -> "MixtureModel":
        return dataclasses.replace(self, gating=gating)
