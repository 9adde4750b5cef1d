import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layersearch.lbfgs import (
    LbfgsConfig,
    LbfgsMemory,
    LineSearchFailed,
    NonFiniteAtStart,
    TerminationReason,
    minimize,
    two_loop_direction,
    wolfe_line_search,
)

TIGHT = LbfgsConfig(grad_tol=1e-12, loss_tol=0.0)


def sphere(x):
    return 0.5 * float(x @ x), x.copy()


def rosenbrock(x):
    a, b = x
    f = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    g = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    return f, g


def quadratic(A, b):
    def f(x):
        return 0.5 * float(x @ A @ x) - float(b @ x), A @ x - b

    return f


class TestMinimize:
    def test_sphere(self):
        res = minimize(sphere, np.array([1.0, 1.0]))
        assert np.linalg.norm(res.x) < 1e-6
        assert res.reason is TerminationReason.GRAD_TOL

    def test_shifted_parabola(self):
        def f(x):
            return 0.5 * float((x[0] - 3.0) ** 2), np.array([x[0] - 3.0])

        res = minimize(f, np.array([0.0]))
        assert res.x[0] == pytest.approx(3.0, abs=1e-5)

    def test_rosenbrock(self):
        res = minimize(rosenbrock, np.array([-1.2, 1.0]))
        assert np.max(np.abs(res.x - 1.0)) < 1e-4
        assert res.iterations_used < 500

    def test_already_at_minimum(self):
        res = minimize(sphere, np.zeros(3))
        assert res.iterations_used == 0
        assert res.reason is TerminationReason.GRAD_TOL

    def test_non_finite_at_start(self):
        def f(x):
            return np.inf, x

        with pytest.raises(NonFiniteAtStart):
            minimize(f, np.array([1.0]))

    def test_max_iter_respected(self):
        cfg = LbfgsConfig(max_iter=3, grad_tol=1e-300, loss_tol=1e-300)
        res = minimize(rosenbrock, np.array([-1.2, 1.0]), cfg)
        assert res.iterations_used == 3
        assert res.reason is TerminationReason.MAX_ITER

    def test_loss_never_increases(self, tmp_path):
        path = tmp_path / "trace.csv"
        minimize(rosenbrock, np.array([-1.2, 1.0]), trace=path)
        rows = path.read_text().strip().splitlines()[1:]
        losses = [float(r.split(",")[1]) for r in rows]
        f0, _ = rosenbrock(np.array([-1.2, 1.0]))
        assert all(b < a for a, b in zip([f0] + losses, losses))

    def test_deterministic_iterates(self):
        def run():
            seen = []

            def f(x):
                seen.append(x.copy())
                return rosenbrock(x)

            minimize(f, np.array([-1.2, 1.0]))
            return np.array(seen)

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_spd_quadratic_family(self):
        rng = np.random.default_rng(42)
        for d in range(1, 11):
            q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            lam = rng.uniform(0.5, 3.0, size=d)
            A = q @ np.diag(lam) @ q.T
            b = rng.normal(size=d)
            cfg = LbfgsConfig(grad_tol=1e-12, loss_tol=0.0, max_iter=2 * d + 5)
            res = minimize(quadratic(A, b), np.zeros(d), cfg)
            target = np.linalg.solve(A, b)
            assert np.max(np.abs(res.x - target)) <= 1e-8, f"d={d}"
            assert res.iterations_used <= 2 * d + 5

    def test_line_search_failure_terminates(self):
        def unbounded(x):
            return -float(x[0]), np.array([-1.0])

        res = minimize(unbounded, np.array([0.0]))
        assert res.reason is TerminationReason.LINE_SEARCH_FAILED

    def test_survives_non_finite_region(self):
        # objective blows up past x=2; line search must back off
        def f(x):
            if x[0] > 2.0:
                return np.inf, np.full(1, np.nan)
            return 0.5 * float((x[0] - 1.9) ** 2), np.array([x[0] - 1.9])

        res = minimize(f, np.array([0.0]), TIGHT)
        assert res.x[0] == pytest.approx(1.9, abs=1e-8)


class TestTwoLoop:
    def test_empty_memory_steepest_descent(self):
        mem = LbfgsMemory(5)
        d = two_loop_direction(np.array([2.0, -1.0]), mem)
        assert np.array_equal(d, [-2.0, 1.0])

    def test_single_pair_diagonal_quadratic(self):
        # D = diag(2, 5); storing the pair (e1, D e1) makes H act as
        # D^{-1} on the e1 subspace, so g = (4, 0) maps to -(2, 0)
        mem = LbfgsMemory(5)
        s = np.array([1.0, 0.0])
        mem.push(s, np.array([2.0, 0.0]))
        d = two_loop_direction(np.array([4.0, 0.0]), mem)
        assert d == pytest.approx([-2.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(2, 6))
    def test_descent_direction(self, seed, n_pairs, dim):
        rng = np.random.default_rng(seed)
        mem = LbfgsMemory(10)
        for _ in range(n_pairs):
            s = rng.normal(size=dim)
            # y with positive curvature: y = M s for SPD M
            m = rng.normal(size=(dim, dim))
            spd = m @ m.T + np.eye(dim)
            mem.push(s, spd @ s)
        g = rng.normal(size=dim)
        if np.all(g == 0):
            return
        d = two_loop_direction(g, mem)
        assert float(d @ g) < 0.0

    def test_curvature_safeguard(self):
        mem = LbfgsMemory(5)
        assert not mem.push(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
        assert not mem.push(np.array([1.0, 0.0]), np.array([1e-11, 0.0]))
        assert len(mem) == 0
        assert mem.push(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert len(mem) == 1

    def test_ring_buffer_capacity(self):
        mem = LbfgsMemory(3)
        for i in range(1, 6):
            mem.push(np.array([float(i)]), np.array([float(i)]))
        assert len(mem) == 3


class TestWolfeLineSearch:
    def test_parabola_accepts_unit_step(self):
        def f(x):
            return 0.5 * float(x @ x), x.copy()

        x = np.array([1.0])
        loss0, grad0 = f(x)
        res = wolfe_line_search(f, x, np.array([-1.0]), loss0, grad0, LbfgsConfig())
        assert res.step == 1.0

    def test_rejects_non_descent(self):
        x = np.array([1.0])
        with pytest.raises(ValueError):
            wolfe_line_search(sphere, x, np.array([1.0]), *sphere(x)[::1], LbfgsConfig())

    def test_rosenbrock_steepest_step_satisfies_wolfe(self):
        x = np.array([-1.2, 1.0])
        loss0, grad0 = rosenbrock(x)
        d = -grad0
        cfg = LbfgsConfig()
        res = wolfe_line_search(rosenbrock, x, d, loss0, grad0, cfg, initial_step=1e-3)
        dphi0 = float(grad0 @ d)
        f_new, g_new = rosenbrock(x + res.step * d)
        assert f_new <= loss0 + cfg.wolfe_c1 * res.step * dphi0
        assert abs(float(g_new @ d)) <= cfg.wolfe_c2 * abs(dphi0)

    def test_budget_exhaustion(self):
        def unbounded(x):
            return -float(x[0]), np.array([-1.0])

        x = np.array([0.0])
        loss0, grad0 = unbounded(x)
        with pytest.raises(LineSearchFailed):
            wolfe_line_search(unbounded, x, np.array([1.0]), loss0, grad0, LbfgsConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        LbfgsConfig(wolfe_c1=0.5, wolfe_c2=0.1)
    with pytest.raises(ValueError):
        LbfgsConfig(memory=0)
    with pytest.raises(ValueError):
        LbfgsConfig(grad_tol=0.0)
