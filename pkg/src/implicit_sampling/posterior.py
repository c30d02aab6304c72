"""Negative log posterior in reduced coordinates and its adjoint gradient.

For the PDE problem

    F(theta) = 1/2 |theta - mu_theta|^2 + 1/2 (z - M P(theta))^T R^{-1} (z - M P(theta))

with ``A(K(theta)) P = G``.  Normalizing constants are dropped; only
differences of F are ever used.

Every target exposes ``F``, ``grad``, ``value_and_grad``,
``directional_derivative`` and ``observations`` and charges its forward and
adjoint solves to a :class:`SolveLedger`.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import mesh_fem
from .errors import BudgetExhausted, ConfigError
from .mesh_fem import Mesh, ObservationOperator
from .prior_kl import KLBasis


class SolveLedger:
    """Counts forward-equivalent solves per grid level.

    An adjoint solve is charged as one solve even when it reuses the
    forward factorization.  With ``limit`` set, a charge that would exceed
    it raises :class:`BudgetExhausted` before the solve happens.
    """

    def __init__(self, limit: Optional[int] = None):
        self.counts: dict = defaultdict(int)
        self.limit = limit
        self._lock = threading.Lock()

    def add(self, n: int = 1, level=None) -> None:
        with self._lock:
            if self.limit is not None and sum(self.counts.values()) + int(n) > self.limit:
                raise BudgetExhausted(f"forward-solve budget of {self.limit} exhausted")
            self.counts[level] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def fine_equivalent(self, N_fine: int) -> float:
        """Cost in fine-grid solves; one ``N``-grid solve counts ``(N/N_fine)^2``."""
        out = 0.0
        for level, c in self.counts.items():
            if isinstance(level, int):
                out += c * (level / N_fine) ** 2
            else:
                out += c
        return out

    def snapshot(self) -> dict:
        return dict(self.counts)

    def __getstate__(self):
        return {"counts": dict(self.counts), "limit": self.limit}

    def __setstate__(self, state):
        self.counts = defaultdict(int, state["counts"])
        self.limit = state.get("limit")
        self._lock = threading.Lock()


@dataclass
class DataModel:
    """Noisy observations ``z = M p_ref + r`` with ``r ~ N(0, diag(noise_var))``."""

    z: np.ndarray
    noise_var: np.ndarray
    points: np.ndarray
    reference_theta: Optional[np.ndarray] = None
    clean: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.noise_var = np.asarray(self.noise_var, dtype=float)
        if self.noise_var.shape != self.z.shape or np.any(self.noise_var <= 0):
            raise ConfigError("noise variances must be positive and match the data length")

    @property
    def k(self) -> int:
        return self.z.size

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.noise_var)


@dataclass
class ObjectiveEval:
    F_value: float
    prior_term: float
    misfit: float
    solves: int
    P: Optional[np.ndarray] = None


class _Target:
    """Shared bookkeeping for all negative-log-posterior targets."""

    level = None

    def __init__(self, dim: int, prior_mean=None, ledger: Optional[SolveLedger] = None):
        self.dim = int(dim)
        self.prior_mean = np.zeros(dim) if prior_mean is None else np.asarray(prior_mean, float)
        self.ledger = SolveLedger() if ledger is None else ledger

    def _charge(self, n: int = 1) -> None:
        self.ledger.add(n, self.level)

    def F(self, theta) -> float:
        return self.eval_F(theta).F_value

    def value_and_grad(self, theta):
        return self.F(theta), self.grad(theta)

    def directional_derivative(self, theta, direction) -> float:
        direction = np.asarray(direction, dtype=float)
        if not np.any(direction):
            return 0.0
        return float(self.grad(theta) @ direction)


class PdePosterior(_Target):
    """Posterior of the KL coordinates given pressure data on one grid.

    Parameters
    ----------
    mesh : Mesh
        Grid for this level.  The data points need not be mesh nodes; the
        observation operator interpolates when they are not.
    basis : KLBasis
        Shared reduced parameterization (built on the finest grid).
    data : DataModel
    source : callable or None
        Source term; defaults to ``200 pi^2 sin(pi x) sin(pi y)``.
    ledger : SolveLedger, optional
        Shared across levels to accumulate per-level counts.
    """

    def __init__(self, mesh: Mesh, basis: KLBasis, data: DataModel, source=None, ledger=None):
        super().__init__(basis.m, basis.prior_mean_theta, ledger)
        self.mesh = mesh
        self.basis = basis
        self.data = data
        self.level = mesh.N
        self.field = basis.field_matrix(mesh)
        self.mean_field = basis.mean_on(mesh)
        self.obs: ObservationOperator = mesh_fem.observation_operator(mesh, data.points)
        self.G = mesh_fem.load_vector(mesh, mesh_fem.paper_source() if source is None else source)
        self.noise_var = data.noise_var
        self._memo = None
        self._memo_lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_memo"] = None
        del state["_memo_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._memo_lock = threading.Lock()

    def kappa(self, theta) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.mean_field + self.field @ theta)

    def forward(self, theta):
        """``(system, P)`` at ``theta``; the most recent solve is memoized."""
        theta = np.ascontiguousarray(theta, dtype=float)
        key = theta.tobytes()
        with self._memo_lock:
            if self._memo is not None and self._memo[0] == key:
                return self._memo[1], self._memo[2], False
        self._charge(1)
        system = mesh_fem.assemble(self.mesh, self.kappa(theta), G=self.G)
        P = mesh_fem.solve_forward(system)
        with self._memo_lock:
            self._memo = (key, system, P)
        return system, P, True

    def observations(self, theta) -> np.ndarray:
        _, P, _ = self.forward(theta)
        return mesh_fem.observe(P, self.obs)

    def eval_F(self, theta) -> ObjectiveEval:
        theta = np.asarray(theta, dtype=float)
        _, P, solved = self.forward(theta)
        r = self.data.z - mesh_fem.observe(P, self.obs)
        d = theta - self.prior_mean
        prior = 0.5 * float(d @ d)
        with np.errstate(over="ignore", invalid="ignore"):
            misfit = 0.5 * float(r @ (r / self.noise_var))
        return ObjectiveEval(prior + misfit, prior, misfit, int(solved), P)

    def grad(self, theta) -> np.ndarray:
        """Adjoint gradient: one forward solve (free if memoized) plus one adjoint solve."""
        theta = np.asarray(theta, dtype=float)
        system, P, _ = self.forward(theta)
        r = self.data.z - mesh_fem.observe(P, self.obs)
        W = -(self.obs.matrix.T @ (r / self.noise_var))
        self._charge(1)
        Y = mesh_fem.adjoint_solve(system, W)
        s = mesh_fem.stiffness_sensitivity_products(system, P, Y)
        return (theta - self.prior_mean) - self.field.T @ (system.kappa * s)


class AffinePosterior(_Target):
    """Linear-Gaussian target with forward map ``theta -> Gmat theta + b``.

    F is exactly quadratic, so the Gauss-Newton Hessian, the Laplace
    approximation and the linear map are all exact.  Each F evaluation is
    charged as one solve and each gradient as two, mirroring the PDE target.
    """

    def __init__(self, Gmat, b, z, noise_var, prior_mean=None, ledger=None):
        Gmat = np.atleast_2d(np.asarray(Gmat, dtype=float))
        super().__init__(Gmat.shape[1], prior_mean, ledger)
        self.Gmat = Gmat
        self.b = np.asarray(b, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.noise_var = np.asarray(noise_var, dtype=float)
        self.level = "affine"

    def observations(self, theta) -> np.ndarray:
        self._charge(1)
        return self.Gmat @ np.asarray(theta, dtype=float) + self.b

    def eval_F(self, theta) -> ObjectiveEval:
        theta = np.asarray(theta, dtype=float)
        r = self.z - self.observations(theta)
        d = theta - self.prior_mean
        prior = 0.5 * float(d @ d)
        misfit = 0.5 * float(r @ (r / self.noise_var))
        return ObjectiveEval(prior + misfit, prior, misfit, 1)

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        self._charge(1)
        r = self.z - self.observations(theta)
        return (theta - self.prior_mean) - self.Gmat.T @ (r / self.noise_var)


class FunctionPosterior(_Target):
    """Target defined by plain callables, for toy densities and tests.

    One call of ``fun`` or ``jac`` is charged as one solve.
    """

    def __init__(self, fun: Callable, jac: Callable, dim: int, ledger=None, level="toy"):
        super().__init__(dim, None, ledger)
        self._fun = fun
        self._jac = jac
        self.level = level

    def eval_F(self, theta) -> ObjectiveEval:
        self._charge(1)
        v = float(self._fun(np.asarray(theta, dtype=float)))
        return ObjectiveEval(v, float("nan"), float("nan"), 1)

    def grad(self, theta) -> np.ndarray:
        self._charge(1)
        return np.atleast_1d(np.asarray(self._jac(np.asarray(theta, dtype=float)), dtype=float))

    def observations(self, theta):
        raise NotImplementedError("function targets have no observation map")


def synthesize_data(
    basis: KLBasis,
    mesh: Mesh,
    reference_theta,
    noise_fraction: float,
    rng: np.random.Generator,
    points=None,
    source=None,
    noise_model: str = "variance",
) -> DataModel:
    """Solve at ``reference_theta`` and perturb the observed pressures.

    ``noise_model="variance"`` sets ``R_ii = noise_fraction * p_ref(x_i)``;
    ``"std"`` sets the standard deviation to ``noise_fraction * p_ref(x_i)``.
    """
    if not noise_fraction > 0:
        raise ConfigError("noise_fraction must be positive")
    if points is None:
        points = mesh_fem.measurement_points(mesh.N)
    reference_theta = np.asarray(reference_theta, dtype=float)
    kappa = np.exp(basis.mean_on(mesh) + basis.field_matrix(mesh) @ reference_theta)
    system = mesh_fem.assemble(mesh, kappa, mesh_fem.paper_source() if source is None else source)
    P = mesh_fem.solve_forward(system)
    clean = mesh_fem.observe(P, mesh_fem.observation_operator(mesh, points))
    if np.any(clean <= 0):
        raise ConfigError("reference pressure is not positive at every measurement point")
    if noise_model == "variance":
        var = noise_fraction * clean
    elif noise_model == "std":
        var = (noise_fraction * clean) ** 2
    else:
        raise ConfigError(f"unknown noise model {noise_model!r}")
    z = clean + np.sqrt(var) * rng.standard_normal(clean.size)
    return DataModel(z=z, noise_var=var, points=np.asarray(points), reference_theta=reference_theta, clean=clean)
