"""File formats: dataset/prediction/trace CSVs and the model JSON document.

Floats are written with 17 significant digits, so every file round-trips
bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .core import Dataset, Expert, HyperParams, LossBreakdown, MixtureModel, check_weights
from .inference import GatingModel

MODEL_FORMAT = "convexmix-model"
MODEL_VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    os.replace(tmp, path)


def _read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: rows have {data.shape[1]} fields, header has {len(header)}")
    return header, data


def _numbered(header: Sequence[str], prefix: str) -> list[int]:
    """Column positions of ``prefix1, prefix2, ...`` in order."""
    cols = {h: i for i, h in enumerate(header)}
    out = []
    k = 1
    while f"{prefix}{k}" in cols:
        out.append(cols[f"{prefix}{k}"])
        k += 1
    return out


# --------------------------------------------------------------------------
# datasets and predictions
# --------------------------------------------------------------------------


def write_dataset_csv(path, dataset: Dataset) -> None:
    """``t,y,x1..xn[,omega1..omegaM]`` with 1-based ``t``."""
    n = dataset.n_inputs
    header = ["t", "y"] + [f"x{i}" for i in range(1, n + 1)]
    W = dataset.true_weights
    if W is not None:
        header += [f"omega{i}" for i in range(1, W.shape[1] + 1)]
    rows = []
    for t in range(dataset.T):
        r = [t + 1, float(dataset.y[t]), *map(float, dataset.X[t])]
        if W is not None:
            r += list(map(float, W[t]))
        rows.append(r)
    _write_rows(path, header, rows)


def read_dataset_csv(path) -> Dataset:
    header, data = _read_table(path)
    if "y" not in header:
        raise ValueError(f"{path}: missing 'y' column")
    xs = _numbered(header, "x")
    if not xs:
        raise ValueError(f"{path}: no regressor columns x1..xn")
    ws = _numbered(header, "omega")
    known = {"t", "y"} | {header[i] for i in xs + ws}
    extra = [h for h in header if h not in known]
    if extra:
        raise ValueError(f"{path}: unexpected columns {extra}")
    W = data[:, ws] if ws else None
    return Dataset(data[:, xs], data[:, header.index("y")], W)


def write_predictions_csv(path, y_hat, W) -> None:
    y_hat = np.asarray(y_hat, dtype=float).reshape(-1)
    W = np.asarray(W, dtype=float)
    header = ["t", "y_hat"] + [f"omega{i}" for i in range(1, W.shape[1] + 1)]
    _write_rows(path, header, ([t + 1, float(y_hat[t]), *map(float, W[t])] for t in range(y_hat.size)))


def read_predictions_csv(path) -> tuple[np.ndarray, np.ndarray]:
    header, data = _read_table(path)
    if "y_hat" not in header:
        raise ValueError(f"{path}: missing 'y_hat' column")
    ws = _numbered(header, "omega")
    return data[:, header.index("y_hat")], check_weights(data[:, ws]) if ws else np.empty((data.shape[0], 0))


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------


COST_TRACE_HEADER = ("k", "J", "mix", "local", "reg", "shaper")


def write_cost_trace_csv(path, trace: Sequence[LossBreakdown]) -> None:
    _write_rows(
        path,
        COST_TRACE_HEADER,
        ([k, b.total, b.mix_term, b.local_term, b.regularizer_term, b.shaper_term] for k, b in enumerate(trace, 1)),
    )


def write_admm_trace_csv(path, history: Sequence[tuple[int, float, float]]) -> None:
    _write_rows(path, ("j", "primal", "dual"), ([int(j), float(p), float(d)] for j, p, d in history))


def write_sweep_csv(path, rows: Sequence[dict[str, Any]]) -> None:
    from .benchmark import SWEEP_COLUMNS

    _write_rows(path, SWEEP_COLUMNS, ([r[c] for c in SWEEP_COLUMNS] for r in rows))


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


def _nan_safe(v: float) -> Optional[float]:
    return None if v is None or not math.isfinite(v) else float(v)


def model_to_dict(model: MixtureModel, extra: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    d: dict[str, Any] = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "experts": [e.to_dict() for e in model.experts],
        "hyper": model.hyper.to_dict(),
        "train_weights": [[float(v) for v in r] for r in model.train_weights],
        "cost_trace": [
            {"J": b.total, "mix": b.mix_term, "local": b.local_term, "reg": b.regularizer_term, "shaper": b.shaper_term}
            for b in model.cost_trace
        ],
        "gating": None if model.gating is None else model.gating.to_dict(),
    }
    if extra:
        d["report"] = {k: (_nan_safe(v) if isinstance(v, float) else v) for k, v in extra.items()}
    return d


def model_from_dict(d: dict[str, Any]) -> MixtureModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a model document")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    experts = [Expert.from_dict(e) for e in d["experts"]]
    trace = tuple(
        LossBreakdown(b["mix"], b["local"], b["reg"], b["shaper"], b["J"]) for b in d.get("cost_trace", [])
    )
    gating = None if d.get("gating") is None else GatingModel.from_dict(d["gating"])
    return MixtureModel(experts, np.array(d["train_weights"], dtype=float), HyperParams.from_dict(d["hyper"]), trace, gating)


def write_model_json(path, model: MixtureModel, extra: Optional[dict[str, Any]] = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, extra), fh, indent=1, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def read_model_json(path) -> MixtureModel:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    try:
        return model_from_dict(d)
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from None
