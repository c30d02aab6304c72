import math

import numpy as np
import pytest
from scipy.optimize import minimize, rosen, rosen_der

from implicit_sampling.errors import ConfigError, NumericalError
from implicit_sampling.optimize import (
    GridCascade,
    OptimizationError,
    _Objective,
    bfgs_minimize,
    multigrid_minimize,
    wolfe_line_search,
    write_trace_csv,
)
from implicit_sampling.posterior import FunctionPosterior


def quadratic(m, seed=0):
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.standard_normal((m, m)))[0]
    B = Q @ np.diag(np.linspace(1, 50, m)) @ Q.T
    a = rng.standard_normal(m)
    return (lambda x: 0.5 * (x - a) @ B @ (x - a)), (lambda x: B @ (x - a)), a


class TestBFGS:
    @pytest.mark.parametrize("m", [2, 5, 10, 30])
    def test_quadratic(self, m):
        f, g, a = quadratic(m)
        res = bfgs_minimize(f, g, np.zeros(m), gtol=1e-10, scale_initial=False)
        assert res.converged
        assert res.grad_norm <= 1e-10
        assert res.iterations <= m + 2
        np.testing.assert_allclose(res.mu, a, atol=1e-9)

    @pytest.mark.parametrize("m,iters", [(2, 6), (5, 18), (10, 27)])
    def test_quadratic_with_scaled_start(self, m, iters):
        # gamma scaling of the first inverse Hessian trades finite termination for
        # a better-scaled first step; counts frozen from a direct run
        f, g, a = quadratic(m)
        res = bfgs_minimize(f, g, np.zeros(m), gtol=1e-10)
        assert res.converged
        assert res.iterations <= iters
        np.testing.assert_allclose(res.mu, a, atol=1e-9)

    def test_rosenbrock(self):
        res = bfgs_minimize(rosen, rosen_der, np.array([-1.2, 1.0]), gtol=1e-8)
        ref = minimize(rosen, [-1.2, 1.0], jac=rosen_der, method="BFGS", options={"gtol": 1e-10})
        assert res.converged
        np.testing.assert_allclose(res.mu, [1.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(res.mu, ref.x, atol=1e-6)

    def test_monotone_decrease(self):
        res = bfgs_minimize(rosen, rosen_der, np.array([-1.2, 1.0]), gtol=1e-8)
        F = [row[2] for row in res.trace]
        assert all(b <= a for a, b in zip(F, F[1:]))

    def test_already_converged(self):
        res = bfgs_minimize(lambda x: float(x @ x), lambda x: 2 * x, np.zeros(3))
        assert res.converged and res.iterations == 0

    def test_max_iter(self):
        res = bfgs_minimize(rosen, rosen_der, np.array([-1.2, 1.0]), gtol=1e-12, max_iter=3)
        assert not res.converged
        assert res.message == "maximum iterations reached"
        assert res.iterations == 3

    def test_nonfinite_start(self):
        with pytest.raises(NumericalError):
            bfgs_minimize(lambda x: math.inf, lambda x: x, np.ones(2))

    def test_infinite_region_is_avoided(self):
        # F is infinite beyond x = 2; the line search must back off
        f = lambda x: float((x[0] - 1.9) ** 2) if x[0] < 2 else math.inf
        g = lambda x: np.array([2 * (x[0] - 1.9)])
        res = bfgs_minimize(f, g, np.array([-5.0]), gtol=1e-9)
        assert res.converged
        assert res.mu[0] == pytest.approx(1.9, abs=1e-9)

    def test_ledger_counts_match_evaluations(self):
        t = FunctionPosterior(lambda x: float(x @ x + np.sum(x**4)), lambda x: 2 * x + 4 * x**3, 3)
        res = bfgs_minimize(t.F, t.grad, np.array([1.0, -2.0, 0.5]), ledger=t.ledger, level="toy")
        assert res.solves == t.ledger.total == res.function_evals + res.gradient_evals

    def test_inverse_hessian_warm_start(self):
        f, g, a = quadratic(6, seed=1)
        cold = bfgs_minimize(f, g, np.zeros(6), gtol=1e-10)
        warm = bfgs_minimize(f, g, np.zeros(6), gtol=1e-10, inverse_hessian=cold.inverse_hessian)
        assert warm.iterations < cold.iterations


class TestWolfe:
    def test_strong_wolfe_conditions(self):
        f, g, _ = quadratic(4, seed=2)
        obj = _Objective(f, g)
        x = np.zeros(4)
        f0, g0 = f(x), g(x)
        p = -g0
        a, fa, ga = wolfe_line_search(obj, x, p, f0, g0, alpha0=1.0)
        assert fa <= f0 + 1e-4 * a * (g0 @ p)
        assert abs(ga @ p) <= 0.9 * abs(g0 @ p)

    def test_ascent_direction_rejected(self):
        from implicit_sampling.optimize import _LineSearchFailure

        obj = _Objective(lambda x: float(x @ x), lambda x: 2 * x)
        with pytest.raises(_LineSearchFailure):
            wolfe_line_search(obj, np.ones(2), np.ones(2), 2.0, 2 * np.ones(2))


class TestCascade:
    def test_defaults(self):
        c = GridCascade()
        assert c.sizes == (16, 32, 64)
        assert c.gtols == (1e-4, 1e-4, 1e-6)

    @pytest.mark.parametrize("sizes", [(), (32, 16), (16, 16), (16, 24)])
    def test_invalid(self, sizes):
        with pytest.raises(ConfigError):
            GridCascade(sizes)

    def test_tolerance_count(self):
        with pytest.raises(ConfigError):
            GridCascade((8, 16), (1e-4,))

    def test_cascade_matches_single_grid(self, small_problem):
        p = small_problem
        mg = multigrid_minimize(p.targets, np.zeros(p.basis.m), (1e-4, 1e-8))
        fine = p.fine
        single = bfgs_minimize(fine.F, fine.grad, np.zeros(p.basis.m), gtol=1e-8, scale_initial=False)
        np.testing.assert_allclose(mg.mu, single.mu, atol=1e-6)
        assert [r.level for r in mg.levels] == [8, 16]
        w = sum(r.solves * (r.level / 16) ** 2 for r in mg.levels)
        assert mg.fine_equivalent_solves == pytest.approx(w)

    def test_failure_propagates_partial(self, small_problem):
        p = small_problem
        with pytest.raises(OptimizationError) as exc:
            multigrid_minimize(p.targets, np.zeros(p.basis.m), (1e-4, 1e-30), max_iter=2)
        assert len(exc.value.partial) >= 1

    def test_mismatched_tolerances(self, small_problem):
        with pytest.raises(ConfigError):
            multigrid_minimize(small_problem.targets, np.zeros(small_problem.basis.m), (1e-4,))


def test_trace_csv(tmp_path):
    res = bfgs_minimize(rosen, rosen_der, np.array([-1.2, 1.0]), level=2)
    path = tmp_path / "t.csv"
    write_trace_csv(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "level,iter,F,grad_norm,step_len,cum_solves"
    assert len(lines) == res.iterations + 2
