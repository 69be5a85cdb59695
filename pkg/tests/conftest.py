"""Suite-wide audit of every weight-producing public operation.

Each listed callable is wrapped, at every module attribute that refers to
it, so that its weight output is passed through ``validate_weights``. A
violation fails the calling test on the spot; the totals are reported at
the end of the run.
"""

from __future__ import annotations

import functools
import importlib
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from _support import ACCEPTANCE_LINES  # noqa: E402
from convexmix.core import validate_weights  # noqa: E402

AUDIT = {"checked": 0, "violations": []}

_MODULES = [
    "convexmix",
    "convexmix.weight_fit",
    "convexmix.trainer",
    "convexmix.inference",
    "convexmix.benchmark",
    "convexmix.estimator",
    "convexmix.cli",
]


def _check(name, W):
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        return
    AUDIT["checked"] += 1
    report = validate_weights(W)
    if not report.ok:
        AUDIT["violations"].append((name, report.first))
        raise AssertionError(f"{name} produced weights off the simplex: {report.first}")


_PRODUCERS = {
    "project_simplex": lambda out: [out],
    "solve_weights_pointwise": lambda out: [out],
    "solve_weights_window": lambda out: [out],
    "fit_weights_windowed": lambda out: [out],
    "predict_recursive": lambda out: [out[1]],
    "predict_filtered": lambda out: [out[1]],
    "predict_recursive_sequence": lambda out: [out[1]],
    "gate_predict": lambda out: [out],
    "random_weight_sequences": lambda out: list(out),
    "coordinate_descent": lambda out: [out.model.train_weights],
    "multistart_fit": lambda out: [out.model.train_weights],
}


def _wrap(name, fn, extract):
    if getattr(fn, "_audited", False):
        return fn

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        for W in extract(out):
            _check(name, W)
        return out

    wrapper._audited = True
    return wrapper


def _install():
    for modname in _MODULES:
        mod = importlib.import_module(modname)
        for name, extract in _PRODUCERS.items():
            fn = getattr(mod, name, None)
            if fn is not None:
                setattr(mod, name, _wrap(name, fn, extract))
    from convexmix.estimator import ConvexMixtureRegressor
    from convexmix.inference import GatingModel

    GatingModel.predict = _wrap("GatingModel.predict", GatingModel.predict, lambda out: [out])
    ConvexMixtureRegressor.predict_weights = _wrap(
        "ConvexMixtureRegressor.predict_weights", ConvexMixtureRegressor.predict_weights, lambda out: [out]
    )


_install()


def pytest_collection_modifyitems(items):
    # acceptance runs last so its audit check covers the rest of the suite
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    n = AUDIT["checked"]
    bad = len(AUDIT["violations"])
    terminalreporter.write_line(f"weight audit: {n} weight outputs validated, {bad} simplex violations")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
