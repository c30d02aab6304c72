import numpy as np
import pytest

from implicit_sampling.experiment import ExperimentConfig, build_problem, find_map, hessian_at, map_point
from implicit_sampling.posterior import AffinePosterior, FunctionPosterior

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


SMALL_INI = """
[grid]
sizes = 8, 16
gtols = 1e-4, 1e-6
[prior]
modes = 6
[problem]
stride = 2
margin = 3
[sampler]
samples = 200
[mcmc]
steps = 300
pilot_steps = 100
"""


@pytest.fixture(scope="session")
def small_config():
    return ExperimentConfig.from_ini(SMALL_INI)


@pytest.fixture(scope="session")
def small_problem(small_config):
    return build_problem(small_config)


@pytest.fixture(scope="session")
def default_problem():
    """Reference configuration with its MAP point and Gauss-Newton Hessian."""
    problem = build_problem(ExperimentConfig())
    mg = find_map(problem)
    hm = hessian_at(problem, mg.mu, mg.phi)
    return problem, mg, hm, map_point(mg, hm)


def quartic_F(x):
    x = np.asarray(x, dtype=float)
    return float(0.5 * x @ x + 0.1 * np.sum(x**4))


def quartic_grad(x):
    x = np.asarray(x, dtype=float)
    return x + 0.4 * x**3


@pytest.fixture
def quartic_target():
    return FunctionPosterior(quartic_F, quartic_grad, 1)


@pytest.fixture
def affine_target():
    rng = np.random.default_rng(7)
    G = rng.standard_normal((8, 5))
    b = rng.standard_normal(8)
    z = rng.standard_normal(8)
    return AffinePosterior(G, b, z, np.full(8, 0.5))


def affine_posterior_moments(t: AffinePosterior):
    """Exact Gaussian posterior of an affine target."""
    Rinv = np.diag(1.0 / t.noise_var)
    H = np.eye(t.dim) + t.Gmat.T @ Rinv @ t.Gmat
    C = np.linalg.inv(H)
    mean = C @ (t.prior_mean + t.Gmat.T @ Rinv @ (t.z - t.b))
    return mean, C, H


@pytest.fixture(scope="session")
def implicit_runs(default_problem):
    """Linear, random and symmetrized ensembles (M = 10^4) for sampling seeds 1..10.

    Returns ``(runs, seconds)`` with ``runs[method][k]`` the ensemble of seed ``k + 1``.
    """
    import time

    from implicit_sampling.samplers import run_sampler

    problem, _, _, mp = default_problem
    start = time.perf_counter()
    runs = {"linear": [], "random": [], "symmetric": []}
    for seed in range(1, 11):
        for method in runs:
            runs[method].append(run_sampler(method, problem.fine, mp, 10_000, seed))
    return runs, time.perf_counter() - start


@pytest.fixture(scope="session")
def chains(default_problem):
    """Tuned random-walk Metropolis and ISMAP chains of 10^4 steps from the MAP point."""
    from implicit_sampling.baselines import ismap, metropolis_rwm, tune_proposal
    from implicit_sampling.samplers import sample_rng

    problem, mg, hm, mp = default_problem
    tgt = problem.fine
    initial = float(np.sqrt(np.min(np.diag(hm.covariance))))
    tune = tune_proposal(tgt, mg.mu, sample_rng(1, "tune", 0), initial_std=initial)
    rwm = metropolis_rwm(tgt, mg.mu, tune.proposal_std, 10_000, sample_rng(1, "rwm", 0))
    ism = ismap(tgt, mp, 10_000, sample_rng(1, "ismap", 0))
    return tune, rwm, ism
