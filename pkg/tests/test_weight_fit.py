import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convexmix.core import Dataset, Expert, HyperParams, validate_weights
from convexmix.objective import total_cost
from convexmix.weight_fit import (
    WindowPlan,
    fit_weights_windowed,
    project_simplex,
    project_simplex_rows,
    solve_weights_pointwise,
    solve_weights_window,
    window_objective,
)
from convexmix.weight_fit import _make_qp, _rows_by_enumeration

from _support import random_instance


def simplex_grid(M, step=1e-3):
    n = int(round(1 / step))
    if M == 1:
        return np.ones((1, 1))
    if M == 2:
        a = np.arange(n + 1) / n
        return np.column_stack([a, 1 - a])
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    a, b = i[keep] / n, j[keep] / n
    return np.column_stack([a, b, 1 - a - b])


GRID = {M: simplex_grid(M) for M in (1, 2, 3)}


def grid_project(v):
    G = GRID[len(v)]
    return G[np.argmin(np.sum((G - v) ** 2, axis=1))]


class TestProjection:
    def test_examples(self):
        assert project_simplex([0.5, 0.5]).tolist() == [0.5, 0.5]
        assert project_simplex([2.0, 0.0]).tolist() == [1.0, 0.0]
        assert np.allclose(project_simplex([0.2, 0.4, 0.1]), [0.3, 0.5, 0.2], atol=1e-15)

    def test_example_against_grid(self):
        assert np.max(np.abs(grid_project(np.array([0.2, 0.4, 0.1])) - [0.3, 0.5, 0.2])) <= 2e-3

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_matches_grid_oracle(self, M, seed):
        v = np.random.default_rng(seed).normal(scale=2.0, size=M)
        p = project_simplex(v)
        assert np.max(np.abs(p - grid_project(v))) <= 2e-3
        assert validate_weights(p).ok

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_projection_optimality(self, M, seed):
        # variational inequality: (v - p) . (q - p) <= 0 for every simplex point q
        rng = np.random.default_rng(seed)
        v = rng.normal(scale=3.0, size=M)
        p = project_simplex(v)
        Q = rng.dirichlet(np.ones(M), size=200)
        assert np.all((Q - p) @ (v - p) <= 1e-12)
        assert np.allclose(project_simplex(p), p, atol=1e-15)

    def test_rows(self):
        V = np.array([[2.0, 0.0], [0.5, 0.5], [-1.0, 3.0]])
        assert project_simplex_rows(V).tolist() == [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]

    def test_rejects(self):
        with pytest.raises(ValueError):
            project_simplex(np.zeros((2, 2)))


def _scan_objective(F, y, h):
    """Per-row objective on the 1e-3 grid of the two-expert simplex."""
    G = GRID[2]
    mix = h.c * (y[:, None] - F @ G.T) ** 2
    loc = h.beta * ((y[:, None] - F) ** 2 * h.local_coefs) @ G.T
    return mix + loc


class TestPointwise:
    def test_exact_expert_wins(self):
        X = np.ones((5, 1))
        experts = [Expert.linear(1, [2.0]), Expert.linear(1, [9.0])]
        ds = Dataset(X, np.full(5, 2.0))
        W = solve_weights_pointwise(ds, experts, HyperParams(beta=0.0, eta=0.0))
        assert np.allclose(W, [[1.0, 0.0]] * 5, atol=1e-9)

    def test_identical_experts_give_uniform(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 2))
        e = Expert.linear(2, [1.0, 1.0])
        ds = Dataset(X, rng.normal(size=6))
        W = solve_weights_pointwise(ds, [e, e, e], HyperParams(n_experts=3, beta=0.0, eta=0.0))
        assert np.max(np.abs(W - 1 / 3)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_matches_scan(self, seed, beta):
        rng = np.random.default_rng(seed)
        ds, experts, _ = random_instance(rng, 12, 2, noise=0.5)
        h = HyperParams(beta=beta, eta=0.0)
        W = solve_weights_pointwise(ds, experts, h)
        F = np.column_stack([e.predict(ds.X) for e in experts])
        scan = _scan_objective(F, ds.y, h).min(axis=1)
        got = h.c * (ds.y - np.sum(W * F, axis=1)) ** 2 + h.beta * np.sum(W * (ds.y[:, None] - F) ** 2, axis=1)
        assert np.all(got <= scan + 1e-3)


    @pytest.mark.parametrize("seed", range(5))
    def test_enumeration_beats_three_expert_grid(self, seed):
        rng = np.random.default_rng(seed)
        ds, experts, _ = random_instance(rng, 15, 3, noise=0.5)
        h = HyperParams(n_experts=3, beta=float(rng.uniform(0, 1)), eta=0.0)
        F = np.column_stack([e.predict(ds.X) for e in experts])
        W = _rows_by_enumeration(_make_qp(F, ds.y, h, eta=0.0))
        assert validate_weights(W).ok
        G = GRID[3]
        scan = h.c * (ds.y[:, None] - F @ G.T) ** 2 + h.beta * ((ds.y[:, None] - F) ** 2) @ G.T
        got = h.c * (ds.y - np.sum(W * F, axis=1)) ** 2 + h.beta * np.sum(W * (ds.y[:, None] - F) ** 2, axis=1)
        assert np.all(got <= scan.min(axis=1) + 1e-12)

    @pytest.mark.parametrize("offset", [0, 45, 69])
    def test_nearly_flat_rows_converge(self, offset):
        # instances on which plain projected gradient stalled at the iteration cap
        rng = np.random.default_rng(7000 + offset)
        M = int(rng.integers(2, 4))
        ds, experts, _ = random_instance(rng, int(rng.integers(20, 150)), M)
        h = HyperParams(n_experts=M, eta=0.0, beta=float(rng.uniform(0, 1)))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            W = solve_weights_pointwise(ds, experts, h)
        assert validate_weights(W).ok


class TestWindow:
    def test_without_smoothing_is_pointwise(self):
        rng = np.random.default_rng(1)
        ds, experts, W0 = random_instance(rng, 15, 3)
        h = HyperParams(n_experts=3, eta=0.0, beta=0.2)
        a = solve_weights_window(ds, experts, W0, h)
        b = solve_weights_pointwise(ds, experts, h)
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_huge_smoothing_pins_to_anchor(self):
        rng = np.random.default_rng(2)
        ds, experts, W0 = random_instance(rng, 10, 3)
        anchor = np.array([0.2, 0.5, 0.3])
        W = solve_weights_window(ds, experts, W0, HyperParams(n_experts=3, eta=1e12), omega_anchor=anchor)
        assert np.max(np.abs(W - anchor)) <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_descent(self, seed):
        rng = np.random.default_rng(seed)
        M = int(rng.integers(2, 4))
        ds, experts, W0 = random_instance(rng, 20, M, noise=0.3)
        h = HyperParams(n_experts=M, eta=float(rng.uniform(0, 20)), beta=float(rng.uniform(0, 1)))
        anchor = rng.dirichlet(np.ones(M))
        nxt = rng.dirichlet(np.ones(M))
        W = solve_weights_window(ds, experts, W0, h, anchor, nxt)
        assert validate_weights(W).ok
        after = window_objective(ds, experts, W, h, anchor, nxt)
        assert after <= window_objective(ds, experts, W0, h, anchor, nxt) + 1e-12
        # no feasible perturbation improves the solution
        for _ in range(20):
            D = rng.dirichlet(np.ones(M), size=20) - W
            trial = W + 1e-4 * D
            assert window_objective(ds, experts, trial, h, anchor, nxt) >= after - 1e-9

    def test_single_row_scan(self):
        rng = np.random.default_rng(4)
        ds, experts, _ = random_instance(rng, 1, 2, noise=1.0)
        h = HyperParams(beta=0.0, eta=3.0)
        anchor = np.array([0.8, 0.2])
        W = solve_weights_window(ds, experts, [[0.5, 0.5]], h, omega_anchor=anchor)
        G = GRID[2]
        F = np.column_stack([e.predict(ds.X) for e in experts])
        scan = (h.c * (ds.y[0] - G @ F[0]) ** 2 + h.eta * np.sum((G - anchor) ** 2, axis=1)).min()
        assert window_objective(ds, experts, W, h, anchor) <= scan + 1e-3

    def test_rows_mismatch(self):
        rng = np.random.default_rng(5)
        ds, experts, _ = random_instance(rng, 4, 2)
        with pytest.raises(ValueError):
            solve_weights_window(ds, experts, np.full((3, 2), 0.5), HyperParams())


class TestWindowPlan:
    def test_single_overlap(self):
        assert list(WindowPlan(10, 4)) == [(0, 4), (3, 7), (6, 10)]
        assert list(WindowPlan(11, 4)) == [(0, 4), (3, 7), (6, 10), (9, 11)]

    def test_covers_horizon(self):
        for T in range(1, 40):
            for L in (2, 3, 7, 50):
                spans = list(WindowPlan(T, L))
                assert spans[0][0] == 0 and spans[-1][1] == T
                assert all(b == a2 + 1 for (_, b), (a2, _) in zip(spans, spans[1:]))

    def test_rejects_short_windows(self):
        with pytest.raises(ValueError):
            WindowPlan(5, 1)


class TestWindowed:
    @pytest.mark.parametrize("seed", range(5))
    def test_window_size_irrelevant_without_smoothing(self, seed):
        rng = np.random.default_rng(seed)
        ds, experts, W0 = random_instance(rng, 37, 3)
        h = HyperParams(n_experts=3, eta=0.0, beta=0.1)
        ref = solve_weights_pointwise(ds, experts, h)
        for L in (2, 10, ds.T):
            W = fit_weights_windowed(ds, experts, W0, h.replace(window=L))
            assert np.max(np.abs(W - ref)) <= 1e-10

    def test_single_window_matches_window_solver(self):
        rng = np.random.default_rng(6)
        ds, experts, W0 = random_instance(rng, 30, 2)
        h = HyperParams(eta=5.0, window=30)
        a = fit_weights_windowed(ds, experts, W0, h)
        b = solve_weights_window(ds, experts, W0, h)
        assert np.max(np.abs(a - b)) <= 1e-12
        c = fit_weights_windowed(ds, experts, W0, h.replace(window=500))
        assert np.max(np.abs(a - c)) <= 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_never_increases_cost(self, seed):
        rng = np.random.default_rng(seed)
        M = int(rng.integers(2, 4))
        T = int(rng.integers(2, 80))
        ds, experts, W0 = random_instance(rng, T, M, noise=0.3)
        h = HyperParams(n_experts=M, eta=float(rng.uniform(0.1, 60)), window=int(rng.integers(2, 25)))
        W = fit_weights_windowed(ds, experts, W0, h)
        before = total_cost(ds, experts, W0, h).total
        assert total_cost(ds, experts, W, h).total <= before * (1 + 1e-9) + 1e-12

    def test_smoothing_reduces_roughness(self):
        rng = np.random.default_rng(7)
        ds, experts, W0 = random_instance(rng, 60, 2, noise=0.5)
        rough = fit_weights_windowed(ds, experts, W0, HyperParams(eta=0.01, window=10))
        smooth = fit_weights_windowed(ds, experts, W0, HyperParams(eta=100.0, window=10))
        assert np.sum(np.diff(smooth, axis=0) ** 2) < np.sum(np.diff(rough, axis=0) ** 2)

    @pytest.mark.slow
    def test_benchmark_descent(self):
        from convexmix.benchmark import BenchmarkSpec, simulate_mixture
        from convexmix.expert_fit import fit_experts

        ds = simulate_mixture(BenchmarkSpec())
        h = HyperParams()
        W0 = np.random.default_rng(0).dirichlet([1, 1], size=ds.T)
        experts = fit_experts(ds, [Expert.linear(4), Expert.linear(4)], W0, h)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            W = fit_weights_windowed(ds, experts, W0, h)
        assert total_cost(ds, experts, W, h).total <= total_cost(ds, experts, W0, h).total
