"""scikit-learn front end for the alternating mixture fit."""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import Dataset, HyperParams, parse_expert_spec
from .inference import GatingModel, predict_filtered
from .trainer import multistart_fit


class ConvexMixtureRegressor(RegressorMixin, BaseEstimator):
    """Time-varying convex combination of linear-in-parameters experts.

    ``experts`` is either a single spec (``"linear"``, ``"poly2"``, ...)
    repeated ``n_experts`` times or a sequence of specs, one per expert.
    Samples passed to :meth:`fit` must be in time order.

    After fitting, :meth:`predict` maps new regressors to weights through a
    k-nearest-neighbour gating model; :meth:`predict_one_step` instead uses
    past outputs to track the weights one step ahead.

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> X = rng.normal(size=(60, 2))
    >>> y = X @ [1.0, -2.0]
    >>> est = ConvexMixtureRegressor(n_experts=1, n_restarts=1, k_max=5).fit(X, y)
    >>> bool(np.allclose(est.experts_[0].theta, [1.0, -2.0], atol=1e-2))
    True
    """

    def __init__(
        self,
        n_experts: int = 2,
        experts: Union[str, Sequence[str]] = "linear",
        beta: float = 1e-6,
        lambda_theta: float = 5e-3,
        eta: float = 50.0,
        rho: float = 1e-9,
        c: float = 1.0,
        c_i: Optional[Sequence[float]] = None,
        window: int = 100,
        eps_theta: float = 1e-6,
        eps_omega: float = 1e-6,
        eps_J: float = 1e-9,
        k_max: int = 70,
        j_max: int = 120,
        n_restarts: int = 5,
        expert_solver: str = "joint",
        gating_k: int = 5,
        random_state: int = 0,
        n_jobs: int = 1,
    ):
        self.n_experts = n_experts
        self.experts = experts
        self.beta = beta
        self.lambda_theta = lambda_theta
        self.eta = eta
        self.rho = rho
        self.c = c
        self.c_i = c_i
        self.window = window
        self.eps_theta = eps_theta
        self.eps_omega = eps_omega
        self.eps_J = eps_J
        self.k_max = k_max
        self.j_max = j_max
        self.n_restarts = n_restarts
        self.expert_solver = expert_solver
        self.gating_k = gating_k
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _hyper(self) -> HyperParams:
        return HyperParams(
            n_experts=self.n_experts,
            beta=self.beta,
            lambda_theta=self.lambda_theta,
            eta=self.eta,
            rho=self.rho,
            c=self.c,
            c_i=None if self.c_i is None else tuple(self.c_i),
            window=self.window,
            eps_theta=self.eps_theta,
            eps_omega=self.eps_omega,
            eps_J=self.eps_J,
            k_max=self.k_max,
            j_max=self.j_max,
            n_restarts=self.n_restarts,
            seed=self.random_state,
            expert_solver=self.expert_solver,
        )

    def _specs(self, n_inputs: int):
        names = [self.experts] * self.n_experts if isinstance(self.experts, str) else list(self.experts)
        if len(names) != self.n_experts:
            raise ValueError(f"{len(names)} expert specs for n_experts={self.n_experts}")
        return [parse_expert_spec(s, n_inputs) for s in names]

    def fit(self, X, y, omega_init=None):
        X, y = check_X_y(X, y, y_numeric=True)
        hyper = self._hyper()
        data = Dataset(X, y)
        self.report_ = multistart_fit(data, self._specs(X.shape[1]), hyper, omega_prior=omega_init, n_jobs=self.n_jobs)
        self.model_ = self.report_.model
        self.experts_ = self.model_.experts
        self.weights_ = np.array(self.model_.train_weights)
        self.gating_ = GatingModel(min(self.gating_k, X.shape[0]), X, self.weights_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_weights(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X)
        return self.gating_.predict(X)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.predict(X, self.gating_.predict(X))

    def predict_one_step(self, X, y) -> np.ndarray:
        """One-step-ahead outputs; ``y[t]`` is only used from step ``t + 1`` on."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        return predict_filtered(X, y, self.experts_, self.model_.hyper)[0]
