"""Comparison methods: Laplace approximation at the MAP, random-walk Metropolis, ISMAP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .curvature import HessianModel, robust_factor
from .errors import NumericalError
from .samplers import MapPoint, WeightedEnsemble, draw_reference, repr_float

log = logging.getLogger(__name__)


@dataclass
class LmapResult:
    """Gaussian ``N(mu, H^{-1})`` at the MAP point."""

    mu: np.ndarray
    covariance: np.ndarray
    std: np.ndarray
    shift: float = 0.0


def lmap(mu, H) -> LmapResult:
    """Laplace approximation; a non-SPD ``H`` is shifted by :func:`robust_factor`."""
    if isinstance(H, HessianModel):
        H = H.H
    L, shift = robust_factor(H)
    if shift > 0:
        log.warning("Hessian for LMAP is not SPD; shifted by %.3g", shift)
    C = sla.cho_solve((L, True), np.eye(L.shape[0]))
    C = 0.5 * (C + C.T)
    return LmapResult(mu=np.asarray(mu, dtype=float).copy(), covariance=C, std=np.sqrt(np.diag(C)), shift=shift)


@dataclass
class McmcChain:
    """A Markov chain whose row 0 is the start point.

    ``accepted[k]`` flags whether step ``k`` moved; row 0 is never counted.
    ``cum_solves[k]`` is the number of forward solves spent up to and
    including row ``k`` (evaluating the start point costs one).
    """

    states: np.ndarray
    accepted: np.ndarray
    cum_solves: np.ndarray
    method: str
    proposal: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.states.shape[0]

    @property
    def acceptance_rate(self) -> float:
        if self.steps < 2:
            return 1.0
        return float(np.mean(self.accepted[1:]))

    @property
    def solves(self) -> int:
        return int(self.cum_solves[-1])

    def running_mean(self) -> np.ndarray:
        return np.cumsum(self.states, axis=0) / np.arange(1, self.steps + 1)[:, None]

    def discard(self, burn_in: int) -> "McmcChain":
        """Chain without its first ``burn_in`` rows (solve counts are kept cumulative)."""
        return McmcChain(
            self.states[burn_in:], self.accepted[burn_in:], self.cum_solves[burn_in:], self.method, dict(self.proposal)
        )

    def to_csv(self, path) -> None:
        m = self.states.shape[1]
        with open(path, "w") as fh:
            fh.write("step," + ",".join(f"theta_{i + 1}" for i in range(m)) + ",accepted,cum_solves\n")
            for k in range(self.steps):
                vals = ",".join(repr_float(v) for v in self.states[k])
                fh.write(f"{k},{vals},{int(self.accepted[k])},{int(self.cum_solves[k])}\n")


def _safe_F(target, x) -> float:
    try:
        return float(target.F(x))
    except NumericalError:
        return math.inf


def metropolis_rwm(target, start, proposal_std: float, steps: int, rng: np.random.Generator) -> McmcChain:
    """Random-walk Metropolis with ``N(current, proposal_std^2 I)`` proposals.

    One forward solve per row: the start point plus one per proposal.
    Proposals whose forward solve fails are rejected.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = np.array(start, dtype=float)
    m = x.size
    base = target.ledger.total
    fx = _safe_F(target, x)
    if not math.isfinite(fx):
        raise NumericalError("forward solve failed at the chain start")
    states = np.empty((steps, m))
    accepted = np.zeros(steps, dtype=bool)
    cum = np.empty(steps, dtype=np.int64)
    states[0], cum[0] = x, target.ledger.total - base
    for k in range(1, steps):
        y = x + proposal_std * rng.standard_normal(m)
        fy = _safe_F(target, y)
        if math.log(rng.random()) < fx - fy:
            x, fx = y, fy
            accepted[k] = True
        states[k] = x
        cum[k] = target.ledger.total - base
    return McmcChain(states, accepted, cum, "rwm", {"kind": "isotropic_gaussian", "std": float(proposal_std)})


@dataclass
class TuningResult:
    proposal_std: float
    acceptance_rate: float
    rounds: int
    solves: int
    history: list


def tune_proposal(
    target,
    start,
    rng: np.random.Generator,
    initial_std: float = 0.1,
    target_range: Sequence[float] = (0.2, 0.4),
    pilot_steps: int = 500,
    max_rounds: int = 20,
) -> TuningResult:
    """Bisect ``log(proposal_std)`` on pilot chains until the acceptance rate lands in range.

    The step grows or shrinks by a factor 4 until the target range is
    bracketed, then bisects geometrically.  Pilot solves are charged to the
    target's ledger and reported.
    """
    lo_rate, hi_rate = target_range
    base = target.ledger.total
    s = float(initial_std)
    small = large = None  # stds known to give too high / too low acceptance
    history = []
    rate = float("nan")
    for rnd in range(1, max_rounds + 1):
        rate = metropolis_rwm(target, start, s, pilot_steps, rng).acceptance_rate
        history.append((s, rate))
        if lo_rate <= rate <= hi_rate:
            break
        if rate > hi_rate:
            small = s
        else:
            large = s
        if small is not None and large is not None:
            s = math.sqrt(small * large)
        else:
            s = s * 4.0 if large is None else s / 4.0
    else:
        log.warning("proposal tuning ended outside the target range (acceptance %.3f)", rate)
    return TuningResult(s, rate, len(history), target.ledger.total - base, history)


def ismap(target, mp: MapPoint, steps: int, rng: np.random.Generator) -> McmcChain:
    """Independence Metropolis-Hastings with the Laplace Gaussian as proposal.

    Proposals are ``mu + L^{-T} eta`` and are accepted with probability
    ``min(1, w(proposal) / w(current))`` where ``w`` is the linear-map weight
    ``exp(phi + |eta|^2/2 - F)``.  The chain starts at the MAP point.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    m = mp.m
    base = target.ledger.total
    x = mp.mu.copy()
    fx = _safe_F(target, x)
    if not math.isfinite(fx):
        raise NumericalError("forward solve failed at the MAP point")
    lw_x = mp.phi - fx
    states = np.empty((steps, m))
    accepted = np.zeros(steps, dtype=bool)
    cum = np.empty(steps, dtype=np.int64)
    states[0], cum[0] = x, target.ledger.total - base
    for k in range(1, steps):
        xi, rho = draw_reference(mp.L, rng)
        y = mp.mu + xi
        lw_y = mp.phi + rho - _safe_F(target, y)
        if math.log(rng.random()) < lw_y - lw_x:
            x, lw_x = y, lw_y
            accepted[k] = True
        states[k] = x
        cum[k] = target.ledger.total - base
    return McmcChain(states, accepted, cum, "ismap", {"kind": "laplace_gaussian"})


def ismap_log_acceptance(mp: MapPoint, F_current: float, rho_current: float, F_proposal: float, rho_proposal: float):
    """Log acceptance ratio of ISMAP: the difference of linear-map log-weights."""
    return (mp.phi + rho_proposal - F_proposal) - (mp.phi + rho_current - F_current)


def batch_means_se(x, n_batches: Optional[int] = None) -> np.ndarray:
    """Monte Carlo standard error of a chain mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    b = int(n_batches) if n_batches else max(2, int(math.isqrt(n)))
    size = n // b
    if size < 1:
        raise ValueError("chain too short for batch means")
    means = x[: b * size].reshape(b, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(b)


@dataclass
class ConvergenceTrace:
    """Running posterior-mean estimates against sample index and cumulative solves."""

    method: str
    index: np.ndarray
    cum_solves: np.ndarray
    coords: tuple
    means: np.ndarray  # (rows, len(coords))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("index,cum_solves," + ",".join(f"theta_{c + 1}" for c in self.coords) + "\n")
            for i in range(self.index.size):
                vals = ",".join(repr_float(v) for v in self.means[i])
                fh.write(f"{int(self.index[i])},{repr_float(self.cum_solves[i])},{vals}\n")


def convergence_trace(run, coords: Sequence[int] = (0, 1, 4), setup_solves: Optional[float] = None) -> ConvergenceTrace:
    """Running mean of selected coordinates (0-based) for a chain or weighted ensemble.

    Ensemble traces start at the setup cost (optimization plus Hessian) and
    use self-normalized running weights; chain traces start at one solve.
    """
    coords = tuple(int(c) for c in coords)
    if isinstance(run, WeightedEnsemble):
        lw = run.log_weights
        w = np.exp(lw - np.max(lw))
        cw = np.cumsum(w)
        num = np.cumsum(w[:, None] * run.samples[:, coords], axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            means = num / cw[:, None]
        setup = run.setup_solves if setup_solves is None else setup_solves
        cum = setup + np.cumsum(run.solves)
        return ConvergenceTrace(run.method, np.arange(1, run.M + 1), cum.astype(float), coords, means)
    means = run.running_mean()[:, coords]
    setup = 0.0 if setup_solves is None else setup_solves
    return ConvergenceTrace(run.method, np.arange(1, run.steps + 1), setup + run.cum_solves.astype(float), coords, means)
