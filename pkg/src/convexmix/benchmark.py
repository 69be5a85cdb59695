"""Synthetic switched-ARX benchmark, validation metrics and sweeps.

The generator blends two second-order ARX models,

    y(t) = sum_i w_i(t) [y(t-1), y(t-2), u(t-1), u(t-2)] . theta_i + e(t),

driven by a binary input, with zero initial conditions and Gaussian noise.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .core import Dataset, Expert, HyperParams, check_weights
from .inference import predict_filtered
from .trainer import multistart_fit

TABLE1_THETA = (
    (0.50, -0.30, 0.90, -0.80),
    (0.10, 0.40, -0.60, -0.50),
)

SWEEP_PARAMS = ("lambda_theta", "eta", "rho", "noise_var")
SWEEP_COLUMNS = ("param", "value", "fold", "mae", "gof", "snr_db", "final_cost")


class UnstableSimulation(ArithmeticError):
    """The simulated output blew up."""


@dataclass(frozen=True)
class BenchmarkSpec:
    """Settings of the synthetic benchmark.

    ``amplitude`` defaults to 2.25, which puts the realised SNR of the
    default configuration at about 20 dB. ``weight_profile`` is either
    ``"plateau_ramp"`` (expert 1 alone up to ``t1``, a half-cosine hand-over
    until ``t2``, expert 2 alone afterwards, with 1-based ``t``) or an
    explicit ``(T, M)`` array.
    """

    T: int = 6000
    theta_true: tuple[tuple[float, ...], ...] = TABLE1_THETA
    noise_var: float = 4e-2
    weight_profile: Any = "plateau_ramp"
    t1: int = 1000
    t2: int = 5000
    amplitude: float = 2.25
    hold: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        if self.hold < 1:
            raise ValueError("hold must be >= 1")
        theta = tuple(tuple(float(v) for v in th) for th in self.theta_true)
        if not theta or any(len(th) != 4 for th in theta):
            raise ValueError("each true parameter vector needs 4 entries")
        object.__setattr__(self, "theta_true", theta)
        if isinstance(self.weight_profile, str):
            if self.weight_profile != "plateau_ramp":
                raise ValueError(f"unknown weight profile {self.weight_profile!r}")
            if len(theta) != 2:
                raise ValueError("the plateau_ramp profile needs exactly two experts")
            if not 0 <= self.t1 < self.t2:
                raise ValueError("need 0 <= t1 < t2")
        else:
            W = check_weights(self.weight_profile, len(theta))
            if W.shape[0] != self.T:
                raise ValueError("custom weight profile must have T rows")
            object.__setattr__(self, "weight_profile", W)

    @property
    def n_experts(self) -> int:
        return len(self.theta_true)

    def replace(self, **changes) -> "BenchmarkSpec":
        return dataclasses.replace(self, **changes)

    def true_weights(self) -> np.ndarray:
        if isinstance(self.weight_profile, str):
            w1 = true_weight_profile(self.T, self.t1, self.t2)
            return np.column_stack([w1, 1.0 - w1])
        return np.array(self.weight_profile)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["theta_true"] = [list(t) for t in self.theta_true]
        if not isinstance(self.weight_profile, str):
            d["weight_profile"] = np.asarray(self.weight_profile).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BenchmarkSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown benchmark settings: {sorted(unknown)}")
        return cls(**d)


def true_weight_profile(T: int, t1: int = 1000, t2: int = 5000) -> np.ndarray:
    """Weight of the first expert: 1, then a half-cosine ramp to 0."""
    t = np.arange(1, T + 1, dtype=float)
    ramp = 0.5 * (1.0 + np.cos(np.pi * (t - t1) / (t2 - t1)))
    return np.where(t <= t1, 1.0, np.where(t <= t2, ramp, 0.0))


def gen_prbs(T: int, amplitude: float = 1.0, hold: int = 1, seed=0) -> np.ndarray:
    """Random binary sequence in ``{-a, +a}`` with each level held ``hold`` steps."""
    if T < 1 or hold < 1:
        raise ValueError("need T >= 1 and hold >= 1")
    rng = np.random.default_rng(seed)
    levels = rng.choice(np.array([-1.0, 1.0]), size=math.ceil(T / hold))
    return amplitude * np.repeat(levels, hold)[:T]


def _sub_seeds(seed) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    u_seed, e_seed = np.random.SeedSequence(seed).spawn(2)
    return u_seed, e_seed


def simulate_with_noise(spec: BenchmarkSpec) -> tuple[Dataset, np.ndarray]:
    """Benchmark dataset together with the noise sequence that produced it."""
    u_seed, e_seed = _sub_seeds(spec.seed)
    u = gen_prbs(spec.T, spec.amplitude, spec.hold, u_seed)
    e = np.random.default_rng(e_seed).normal(0.0, math.sqrt(spec.noise_var), spec.T)
    W = spec.true_weights()
    theta = np.array(spec.theta_true)  # (M, 4)
    T = spec.T
    y = np.zeros(T + 2)
    up = np.concatenate([[0.0, 0.0], u])
    X = np.empty((T, 4))
    mixed = W @ theta  # effective parameters per step
    for k in range(T):
        x = (y[k + 1], y[k], up[k + 1], up[k])
        X[k] = x
        yk = mixed[k, 0] * x[0] + mixed[k, 1] * x[1] + mixed[k, 2] * x[2] + mixed[k, 3] * x[3] + e[k]
        if not abs(yk) <= 1e9:
            raise UnstableSimulation(f"output diverged at t={k + 1} (|y| > 1e9); check theta_true")
        y[k + 2] = yk
    return Dataset(X, y[2:], W), e


def simulate_mixture(spec: BenchmarkSpec) -> Dataset:
    return simulate_with_noise(spec)[0]


def realized_snr(dataset: Dataset, noise: np.ndarray) -> float:
    """SNR in dB of the noise-free part ``y - e`` against the noise ``e``."""
    noise = np.asarray(noise, dtype=float)
    nv = float(np.var(noise))
    if nv == 0:
        return math.inf
    return snr_db(float(np.var(dataset.y - noise)), nv)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _pair(y_true, y_pred, min_len: int = 1):
    a = np.asarray(y_true, dtype=float).reshape(-1)
    b = np.asarray(y_pred, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} != {b.size}")
    if a.size < min_len:
        raise ValueError(f"need at least {min_len} samples")
    return a, b


def mae(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return float(np.mean(np.abs(a - b)))


def gof(y_true, y_pred) -> float:
    """``max(1 - SSE/SST, 0)`` with ``SST`` taken about the mean of ``y_true``."""
    a, b = _pair(y_true, y_pred, 2)
    sst = float(np.sum((a - a.mean()) ** 2))
    if sst == 0:
        raise ValueError("y_true is constant; goodness of fit is undefined")
    return max(1.0 - float(np.sum((a - b) ** 2)) / sst, 0.0)


def aligned_weight_mae(W_hat, W_true) -> tuple[float, tuple[int, ...]]:
    """Weight MAE under the expert relabelling that minimises it.

    Returns the error and the permutation ``p`` with ``W_hat[:, p]`` matched
    to ``W_true``.
    """
    A = np.asarray(W_hat, dtype=float)
    B = np.asarray(W_true, dtype=float)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"weight shapes differ: {A.shape} vs {B.shape}")
    best = min(itertools.permutations(range(A.shape[1])), key=lambda p: float(np.mean(np.abs(A[:, p] - B))))
    return float(np.mean(np.abs(A[:, best] - B))), tuple(best)


def snr_db(signal_var: float, noise_var: float) -> float:
    if signal_var <= 0 or noise_var <= 0:
        raise ValueError("variances must be positive")
    return 10.0 * math.log10(signal_var / noise_var)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


def fold_blocks(T: int, folds: int, frac: float = 0.1) -> list[tuple[int, int]]:
    """Contiguous validation blocks of ``frac * T`` samples starting at ``f T / folds``."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    size = max(1, int(round(frac * T)))
    out = []
    for f in range(folds):
        a = (f * T) // folds
        out.append((a, min(a + size, T)))
    return out


def validate_fold(
    dataset: Dataset,
    block: tuple[int, int],
    hyper: HyperParams,
    specs: Optional[Sequence[Expert]] = None,
    n_jobs: int = 1,
) -> dict[str, float]:
    """Fit on everything outside ``block`` and score one-step-ahead predictions inside it."""
    a, b = block
    keep = np.ones(dataset.T, dtype=bool)
    keep[a:b] = False
    train = dataset.subset(keep)
    if specs is None:
        specs = [Expert.linear(dataset.n_inputs) for _ in range(hyper.n_experts)]
    report = multistart_fit(train, specs, hyper, n_jobs=n_jobs)
    val = dataset.subset(slice(a, b))
    y_hat, _ = predict_filtered(val.X, val.y, report.model.experts, hyper)
    return {
        "mae": mae(val.y, y_hat),
        "gof": gof(val.y, y_hat),
        "final_cost": report.final_cost,
    }


def _cell(param, value, fold, block, spec, hyper):
    try:
        if param == "noise_var":
            spec = spec.replace(noise_var=float(value))
        else:
            hyper = hyper.replace(**{param: float(value)})
        data, e = simulate_with_noise(spec)
        snr = realized_snr(data, e)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = validate_fold(data, block, hyper)
        return {"param": param, "value": value, "fold": fold, "snr_db": snr, **res}
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        nan = float("nan")
        return {
            "param": param, "value": value, "fold": fold,
            "mae": nan, "gof": nan, "snr_db": nan, "final_cost": nan,
            "error": f"{type(exc).__name__}: {exc}",
        }


def sweep(
    param: str,
    values: Sequence[float],
    spec: BenchmarkSpec,
    hyper: HyperParams,
    folds: int = 10,
    n_jobs: int = 1,
) -> list[dict[str, Any]]:
    """Vary one setting, cross-validating each value on contiguous blocks.

    Returns one row per (value, fold) cell with the columns of
    :data:`SWEEP_COLUMNS`; a failing cell gets NaN metrics and an ``error``
    entry instead of aborting the sweep.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    blocks = fold_blocks(spec.T, folds)
    cells = [(v, f, blk) for v in values for f, blk in enumerate(blocks)]
    if n_jobs == 1:
        rows = [_cell(param, v, f, blk, spec, hyper) for v, f, blk in cells]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(_cell)(param, v, f, blk, spec, hyper) for v, f, blk in cells)
    return rows


def summarize_sweep(rows: Sequence[dict[str, Any]]) -> list[dict[str, float]]:
    """Mean MAE, GoF and SNR per swept value, ignoring failed cells."""
    out = []
    for v in dict.fromkeys(r["value"] for r in rows):
        cell = [r for r in rows if r["value"] == v and "error" not in r]
        if not cell:
            out.append({"value": v, "mae": float("nan"), "gof": float("nan"), "snr_db": float("nan")})
            continue
        out.append({
            "value": v,
            "mae": float(np.mean([r["mae"] for r in cell])),
            "gof": float(np.mean([r["gof"] for r in cell])),
            "snr_db": float(np.mean([r["snr_db"] for r in cell])),
        })
    return out
