import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_sampling import mesh_fem
from implicit_sampling.errors import BudgetExhausted, ConfigError
from implicit_sampling.experiment import gradient_check
from implicit_sampling.mesh_fem import Mesh
from implicit_sampling.optimize import bfgs_minimize
from implicit_sampling.posterior import (
    DataModel,
    FunctionPosterior,
    PdePosterior,
    SolveLedger,
    synthesize_data,
)
from implicit_sampling.prior_kl import CovarianceSpec, build_kl, sample_prior


@pytest.fixture(scope="module")
def setup16():
    fine = Mesh(16)
    basis = build_kl(CovarianceSpec(), fine, m=8)
    points = mesh_fem.measurement_points(16, 2, 3)
    ref = sample_prior(basis, np.random.default_rng(0))
    data = synthesize_data(basis, fine, ref, 0.3, np.random.default_rng(1), points=points)
    return fine, basis, data


class TestSolveLedger:
    def test_counts_per_level(self):
        led = SolveLedger()
        led.add(3, 16)
        led.add(2, 64)
        led.add(1, 64)
        assert led.total == 6
        assert led.snapshot() == {16: 3, 64: 3}
        assert led.fine_equivalent(64) == pytest.approx(3 / 16 + 3)

    def test_paper_cascade_arithmetic(self):
        led = SolveLedger()
        led.add(32, 16)
        led.add(14, 32)
        led.add(12, 64)
        assert led.fine_equivalent(64) == pytest.approx(17.5)

    def test_limit(self):
        led = SolveLedger(limit=3)
        led.add(2)
        with pytest.raises(BudgetExhausted):
            led.add(2)
        assert led.total == 2

    def test_pickle(self):
        led = SolveLedger(limit=9)
        led.add(4, 32)
        clone = pickle.loads(pickle.dumps(led))
        assert clone.snapshot() == {32: 4} and clone.limit == 9
        clone.add(1, 32)


class TestSynthesizeData:
    def test_paper_layout_gives_49_observations(self):
        fine = Mesh(64)
        basis = build_kl(CovarianceSpec(), fine, m=30)
        data = synthesize_data(basis, fine, np.zeros(30), 0.3, np.random.default_rng(0))
        assert data.k == 49
        np.testing.assert_allclose(data.noise_var, 0.3 * data.clean)

    def test_vanishing_noise(self, setup16):
        fine, basis, data = setup16
        d = synthesize_data(basis, fine, data.reference_theta, 1e-14, np.random.default_rng(1), points=data.points)
        np.testing.assert_allclose(d.z, d.clean, rtol=1e-6)

    def test_same_seed_same_data(self, setup16):
        fine, basis, data = setup16
        d = synthesize_data(basis, fine, data.reference_theta, 0.3, np.random.default_rng(1), points=data.points)
        np.testing.assert_array_equal(d.z, data.z)

    def test_std_noise_model(self, setup16):
        fine, basis, data = setup16
        d = synthesize_data(
            basis, fine, data.reference_theta, 0.3, np.random.default_rng(1), points=data.points, noise_model="std"
        )
        np.testing.assert_allclose(d.noise_var, (0.3 * d.clean) ** 2)

    def test_errors(self, setup16):
        fine, basis, data = setup16
        with pytest.raises(ConfigError):
            synthesize_data(basis, fine, data.reference_theta, 0.0, np.random.default_rng(1))
        with pytest.raises(ConfigError):
            synthesize_data(basis, fine, data.reference_theta, 0.3, np.random.default_rng(1), noise_model="x")
        with pytest.raises(ConfigError):
            DataModel(z=np.ones(3), noise_var=np.array([1.0, 0.0, 1.0]), points=np.zeros((3, 2)))

    def test_non_positive_pressure_rejected(self, setup16):
        fine, basis, data = setup16
        with pytest.raises(ConfigError):
            synthesize_data(
                basis, fine, data.reference_theta, 0.3, np.random.default_rng(1), points=data.points,
                source=lambda x, y: -np.ones_like(x),
            )


class TestPdePosterior:
    def test_exact_fit(self, setup16):
        fine, basis, data = setup16
        exact = DataModel(z=data.clean, noise_var=data.noise_var, points=data.points)
        post = PdePosterior(fine, basis, exact)
        ref = data.reference_theta
        ev = post.eval_F(ref)
        assert ev.misfit == pytest.approx(0.0, abs=1e-20)
        assert ev.F_value == pytest.approx(0.5 * ref @ ref, rel=1e-12)
        np.testing.assert_allclose(post.grad(ref), ref, atol=1e-8)

    def test_F_bounded_by_prior_term(self, setup16):
        fine, basis, data = setup16
        post = PdePosterior(fine, basis, data)
        for theta in np.random.default_rng(2).standard_normal((5, basis.m)):
            assert post.F(theta) >= 0.5 * theta @ theta

    def test_gradient_against_finite_differences(self, setup16):
        fine, basis, data = setup16
        post = PdePosterior(fine, basis, data)
        rows = gradient_check(post, np.random.default_rng(3).standard_normal((3, basis.m)))
        assert max(r[0] for r in rows) <= 1e-5

    def test_coarse_grid_gradient(self, setup16):
        _, basis, data = setup16
        post = PdePosterior(Mesh(8), basis, data)
        rows = gradient_check(post, np.random.default_rng(4).standard_normal((2, basis.m)))
        assert max(r[0] for r in rows) <= 1e-5

    def test_ledger_and_memo(self, setup16):
        fine, basis, data = setup16
        post = PdePosterior(fine, basis, data)
        theta = np.full(basis.m, 0.1)
        post.F(theta)
        assert post.ledger.total == 1
        post.F(theta)
        assert post.ledger.total == 1
        post.grad(theta)
        assert post.ledger.total == 2
        post.grad(theta + 1.0)
        assert post.ledger.total == 4
        assert post.ledger.snapshot() == {16: 4}

    def test_directional_derivative(self, setup16):
        fine, basis, data = setup16
        post = PdePosterior(fine, basis, data)
        rng = np.random.default_rng(5)
        theta, xi = rng.standard_normal((2, basis.m))
        before = post.ledger.total
        assert post.directional_derivative(theta, np.zeros(basis.m)) == 0.0
        assert post.ledger.total == before
        d = post.directional_derivative(theta, xi)
        eps = 1e-4
        fd = (post.F(theta + eps * xi) - post.F(theta - eps * xi)) / (2 * eps)
        assert d == pytest.approx(fd, rel=1e-5)
        assert post.directional_derivative(theta, 2.5 * xi) == pytest.approx(2.5 * d, rel=1e-12)

    def test_map_beats_prior_draws(self, setup16):
        fine, basis, data = setup16
        post = PdePosterior(fine, basis, data)
        res = bfgs_minimize(post.F, post.grad, np.zeros(basis.m), scale_initial=False)
        assert res.converged
        assert res.phi == pytest.approx(post.F(res.mu), abs=0)
        assert res.phi <= post.F(np.zeros(basis.m))
        draws = sample_prior(basis, np.random.default_rng(6), size=100)
        assert res.phi <= min(post.F(t) for t in draws)

    def test_pickle_round_trip(self, setup16):
        fine, basis, data = setup16
        post = PdePosterior(fine, basis, data)
        theta = np.full(basis.m, -0.2)
        value = post.F(theta)
        clone = pickle.loads(pickle.dumps(post))
        assert clone.F(theta) == value


class TestAffinePosterior:
    def test_quadratic_and_gradient(self, affine_target):
        t = affine_target
        rng = np.random.default_rng(0)
        x = rng.standard_normal(t.dim)
        r = t.z - (t.Gmat @ x + t.b)
        assert t.F(x) == pytest.approx(0.5 * x @ x + 0.5 * r @ (r / t.noise_var), rel=1e-14)
        e = np.eye(t.dim)
        fd = np.array([(t.F(x + 1e-5 * e[i]) - t.F(x - 1e-5 * e[i])) / 2e-5 for i in range(t.dim)])
        np.testing.assert_allclose(t.grad(x), fd, rtol=1e-7)

    def test_ledger(self, affine_target):
        t = affine_target
        t.F(np.zeros(t.dim))
        t.grad(np.zeros(t.dim))
        t.observations(np.zeros(t.dim))
        assert t.ledger.total == 4


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 5))
def test_function_posterior_charges_each_call(a, scale):
    t = FunctionPosterior(lambda x: scale * float(x @ x), lambda x: 2 * scale * x, 2)
    assert t.F(np.array([a, 0.0])) == pytest.approx(scale * a * a)
    t.grad(np.array([a, 1.0]))
    assert t.ledger.total == 2
