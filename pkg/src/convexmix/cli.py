"""Command-line entry point: ``convexmix {gen,fit,predict,eval,sweep}``.

Settings come from, in decreasing priority, command-line flags, a JSON
``--config`` file (a flat object keyed by the flag names with dashes
replaced by underscores) and built-in defaults.

Exit status: 0 on success, 1 for invalid input or configuration, 2 when a
numerical failure stops the computation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .benchmark import (
    SWEEP_PARAMS,
    BenchmarkSpec,
    aligned_weight_mae,
    gof,
    mae,
    realized_snr,
    simulate_with_noise,
    summarize_sweep,
    sweep,
)
from .core import HyperParams, check_weights, parse_expert_spec
from .inference import DEFAULT_HORIZON, predict_filtered, predict_recursive_sequence, train_gating
from .io import (
    read_dataset_csv,
    read_model_json,
    read_predictions_csv,
    write_cost_trace_csv,
    write_dataset_csv,
    write_model_json,
    write_predictions_csv,
    write_sweep_csv,
)
from .trainer import multistart_fit

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    """Invalid command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# typed values
# --------------------------------------------------------------------------


def _positive_int(v) -> int:
    try:
        n = int(v)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"expected an integer, got {v!r}") from None
    if n < 1 or float(v) != n:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v!r}")
    return n


def _nonneg_int(v) -> int:
    try:
        n = int(v)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"expected an integer, got {v!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v!r}")
    return n


def _float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"expected a number, got {v!r}") from None


def _float_list(v) -> list[float]:
    items = v if isinstance(v, (list, tuple)) else [s for s in str(v).split(",") if s.strip()]
    return [_float(s) for s in items]


def _str_list(v) -> list[str]:
    items = v if isinstance(v, (list, tuple)) else str(v).split(",")
    return [str(s).strip() for s in items if str(s).strip()]


# (flag, dest, type, default, help)
COMMON = [
    ("--seed", "seed", _nonneg_int, 0, "master seed, split into data/restart/fold seeds"),
    ("--jobs", "jobs", _positive_int, 1, "parallel workers for restarts and sweep cells"),
]
SPEC_OPTS = [
    ("--T", "T", _positive_int, 6000, "horizon"),
    ("--noise-var", "noise_var", _float, 4e-2, "noise variance"),
    ("--amplitude", "amplitude", _float, 2.25, "input amplitude"),
    ("--hold", "hold", _positive_int, 1, "input hold length"),
    ("--t1", "t1", _nonneg_int, 1000, "end of the first plateau"),
    ("--t2", "t2", _positive_int, 5000, "end of the hand-over ramp"),
]
HYPER_OPTS = [
    ("--n-experts", "n_experts", _positive_int, 2, "number of experts M"),
    ("--experts", "experts", _str_list, None, "comma list of expert specs (linear, poly<d>)"),
    ("--beta", "beta", _float, 1e-6, "local-loss weight"),
    ("--lambda-theta", "lambda_theta", _float, 5e-3, "ridge weight"),
    ("--eta", "eta", _float, 50.0, "smoothness weight"),
    ("--rho", "rho", _float, 1e-9, "ADMM penalty"),
    ("--c", "c", _float, 1.0, "mixture-loss coefficient"),
    ("--c-i", "c_i", _float_list, None, "comma list of local-loss coefficients"),
    ("--window", "window", _positive_int, 100, "weight window length"),
    ("--eps-theta", "eps_theta", _float, 1e-6, "parameter-change tolerance"),
    ("--eps-omega", "eps_omega", _float, 1e-6, "weight-change tolerance"),
    ("--eps-j", "eps_J", _float, 1e-9, "cost-change tolerance"),
    ("--k-max", "k_max", _positive_int, 70, "outer iteration cap"),
    ("--j-max", "j_max", _positive_int, 120, "ADMM iteration cap"),
    ("--n-restarts", "n_restarts", _positive_int, 5, "random restarts"),
    ("--expert-solver", "expert_solver", str, "joint", "joint | admm"),
]


def _add(p: argparse.ArgumentParser, opts) -> None:
    for flag, dest, typ, _default, hlp in opts:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=hlp)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON file with default settings")
    common.add_argument("--out", type=Path, default=None, help="output path")
    _add(common, COMMON)

    parser = _Parser(prog="convexmix", description="Convex mixtures of local experts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate the synthetic benchmark")
    _add(p, SPEC_OPTS)

    p = sub.add_parser("fit", parents=[common], help="fit a mixture to a dataset CSV")
    p.add_argument("--data", type=Path, default=None, help="training dataset CSV")
    _add(p, HYPER_OPTS)
    p.add_argument("--gating-k", dest="gating_k", type=_positive_int, default=None, help="neighbours used by the gating model")

    p = sub.add_parser("predict", parents=[common], help="predict outputs and weights")
    p.add_argument("--model", type=Path, default=None, help="model JSON written by fit")
    p.add_argument("--data", type=Path, default=None, help="dataset CSV; y is only read one step behind")
    p.add_argument("--mode", choices=("gating", "recursive", "filtered"), default=None, help="weight predictor (default gating)")
    p.add_argument("--horizon", type=_positive_int, default=None, help="past samples kept by the filtered mode")

    p = sub.add_parser("eval", parents=[common], help="score predictions against a dataset")
    p.add_argument("--pred", type=Path, default=None, help="predictions CSV")
    p.add_argument("--data", type=Path, default=None, help="dataset CSV holding the true outputs")

    p = sub.add_parser("sweep", parents=[common], help="cross-validated one-at-a-time sweep")
    p.add_argument("--param", type=str, default=None, help="lambda-theta, eta, rho or noise-var")
    p.add_argument("--values", type=_float_list, default=None, help="comma list of values")
    p.add_argument("--folds", type=_positive_int, default=None, help="validation blocks per value (default 10)")
    _add(p, SPEC_OPTS)
    _add(p, HYPER_OPTS)
    return parser


OTHER_DEFAULTS: dict[str, Any] = {
    "gating_k": 5, "mode": "gating", "horizon": DEFAULT_HORIZON, "folds": 10,
    "data": None, "model": None, "pred": None, "param": None, "values": None, "out": None,
}
OTHER_TYPES: dict[str, Callable] = {
    "gating_k": _positive_int, "horizon": _positive_int, "folds": _positive_int,
    "values": _float_list, "data": Path, "model": Path, "pred": Path, "out": Path, "param": str, "mode": str,
}


def _all_opts():
    return COMMON + SPEC_OPTS + HYPER_OPTS


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, the config file and explicit flags."""
    cfg: dict[str, Any] = {}
    for _f, dest, _t, default, _h in _all_opts():
        cfg[dest] = default
    cfg.update(OTHER_DEFAULTS)
    types = {dest: t for _f, dest, t, _d, _h in _all_opts()}
    types.update(OTHER_TYPES)
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(types))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        for k, v in file_cfg.items():
            if v is None:
                continue
            try:
                cfg[k] = types[k](v)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config key {k!r}: {exc}") from None
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        cfg[k] = v
    return cfg


def _sub_seeds(seed: int) -> tuple[int, int, int]:
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1, dtype=np.uint64)[0]) for c in children)  # type: ignore[return-value]


def _need_file(cfg, key) -> Path:
    path = cfg.get(key)
    if path is None:
        raise UsageError(f"--{key} is required")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"--{key}: {path} does not exist")
    return path


def _out_path(cfg, default: str) -> Path:
    out = Path(cfg["out"] or default)
    parent = out.parent if str(out.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"--out: directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"--out: directory {parent} is not writable")
    return out


def _spec(cfg, seed) -> BenchmarkSpec:
    return BenchmarkSpec(
        T=cfg["T"], noise_var=cfg["noise_var"], amplitude=cfg["amplitude"], hold=cfg["hold"],
        t1=cfg["t1"], t2=cfg["t2"], seed=seed,
    )


def _hyper(cfg, seed) -> HyperParams:
    return HyperParams(
        n_experts=cfg["n_experts"], beta=cfg["beta"], lambda_theta=cfg["lambda_theta"], eta=cfg["eta"],
        rho=cfg["rho"], c=cfg["c"], c_i=None if cfg["c_i"] is None else tuple(cfg["c_i"]),
        window=cfg["window"], eps_theta=cfg["eps_theta"], eps_omega=cfg["eps_omega"], eps_J=cfg["eps_J"],
        k_max=cfg["k_max"], j_max=cfg["j_max"], n_restarts=cfg["n_restarts"], seed=seed,
        expert_solver=cfg["expert_solver"],
    )


def _expert_specs(cfg, n_inputs):
    names = cfg["experts"] or ["linear"] * cfg["n_experts"]
    if len(names) != cfg["n_experts"]:
        raise UsageError(f"{len(names)} expert specs given for --n-experts {cfg['n_experts']}")
    return [parse_expert_spec(s, n_inputs) for s in names]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(cfg) -> int:
    out = _out_path(cfg, "benchmark.csv")
    data_seed, _, _ = _sub_seeds(cfg["seed"])
    data, noise = simulate_with_noise(_spec(cfg, data_seed))
    write_dataset_csv(out, data)
    snr = realized_snr(data, noise)
    print(f"wrote {data.T} samples to {out}")
    print(f"snr_db {snr:.4f}")
    return EXIT_OK


def cmd_fit(cfg) -> int:
    data_path = _need_file(cfg, "data")
    out = _out_path(cfg, "model.json")
    _, restart_seed, _ = _sub_seeds(cfg["seed"])
    hyper = _hyper(cfg, restart_seed)
    data = read_dataset_csv(data_path)
    specs = _expert_specs(cfg, data.n_inputs)
    report = multistart_fit(data, specs, hyper, n_jobs=cfg["jobs"])
    model = report.model.with_gating(train_gating(data.X, report.model.train_weights, min(cfg["gating_k"], data.T)))
    extra = {
        "iterations": report.iterations,
        "termination_reason": report.termination_reason,
        "restart_index": report.restart_index,
        "all_restart_costs": list(report.all_restart_costs),
    }
    write_model_json(out, model, extra)
    trace_path = out.with_name(out.stem + ".trace.csv")
    write_cost_trace_csv(trace_path, model.cost_trace)
    print(report.summary())
    if data.true_weights is not None and data.true_weights.shape[1] == model.n_experts:
        err, perm = aligned_weight_mae(model.train_weights, data.true_weights)
        print(f"weight_mae_vs_truth {err:.6f} (expert order {[i + 1 for i in perm]})")
    print(f"wrote model to {out} and cost trace to {trace_path}")
    return EXIT_OK


def cmd_predict(cfg) -> int:
    model = read_model_json(_need_file(cfg, "model"))
    data = read_dataset_csv(_need_file(cfg, "data"))
    out = _out_path(cfg, "predictions.csv")
    n_in = model.experts[0].n_inputs
    if data.n_inputs != n_in:
        raise UsageError(f"model expects {n_in} regressors, dataset has {data.n_inputs}")
    mode = cfg["mode"]
    if mode == "gating":
        if model.gating is None:
            raise UsageError("model file holds no gating model")
        W = model.gating.predict(data.X)
        y_hat = model.predict(data.X, W)
    elif mode == "filtered":
        y_hat, W = predict_filtered(data.X, data.y, model.experts, model.hyper, horizon=cfg["horizon"])
    elif mode == "recursive":
        y_hat, W = predict_recursive_sequence(data.X, data.y, model.experts, model.hyper)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    write_predictions_csv(out, y_hat, check_weights(W))
    print(f"wrote {data.T} predictions ({mode}) to {out}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    y_hat, W = read_predictions_csv(_need_file(cfg, "pred"))
    data = read_dataset_csv(_need_file(cfg, "data"))
    if y_hat.size != data.T:
        raise UsageError(f"{y_hat.size} predictions for {data.T} samples")
    metrics = {"mae": mae(data.y, y_hat), "gof": gof(data.y, y_hat)}
    if data.true_weights is not None and W.shape == data.true_weights.shape:
        metrics["weight_mae"] = aligned_weight_mae(W, data.true_weights)[0]
    for k, v in metrics.items():
        print(f"{k} {v:.6f}")
    if cfg["out"] is not None:
        out = _out_path(cfg, "")
        out.write_text(json.dumps(metrics, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    param = (cfg["param"] or "").replace("-", "_")
    if param not in SWEEP_PARAMS:
        raise UsageError(f"--param must be one of {', '.join(p.replace('_', '-') for p in SWEEP_PARAMS)}")
    values = cfg["values"]
    if not values:
        raise UsageError("--values needs at least one number")
    if cfg["folds"] < 2:
        raise UsageError("--folds must be >= 2")
    out = _out_path(cfg, "sweep.csv")
    data_seed, restart_seed, _ = _sub_seeds(cfg["seed"])
    rows = sweep(param, values, _spec(cfg, data_seed), _hyper(cfg, restart_seed), cfg["folds"], cfg["jobs"])
    write_sweep_csv(out, rows)
    for r in summarize_sweep(rows):
        print(f"{param}={r['value']:g}  mae {r['mae']:.4f}  gof {r['gof']:.4f}  snr_db {r['snr_db']:.2f}")
    failed = [r for r in rows if "error" in r]
    for r in failed:
        print(f"cell value={r['value']:g} fold={r['fold']} failed: {r['error']}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "predict": cmd_predict, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    # LinAlgError derives from ValueError, so it has to be caught first
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
