"""Implicit sampling around the MAP point: linear maps, random maps, symmetrization.

Each sample ``j`` draws from its own RNG stream derived from
``(seed, method, j)``, so an ensemble does not depend on how samples are
distributed over worker processes.  Weights are kept as logarithms and
normalized by max subtraction.
"""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError

log = logging.getLogger(__name__)

OK, REJECTED_NEWTON, REJECTED_DEGENERATE, FORWARD_FAILED = 0, 1, 2, 3

_STREAMS = {"linear": 1, "random": 2, "symmetric": 3, "resample": 4, "rwm": 5, "ismap": 6, "tune": 7}


def sample_rng(seed: int, stream: str, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of ``stream``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_STREAMS[stream], int(index)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class MapPoint:
    """MAP artifacts every sampler needs: ``mu``, ``phi = F(mu)`` and ``H = L L^T``."""

    mu: np.ndarray
    phi: float
    L: np.ndarray
    setup_solves: float = 0.0

    @property
    def m(self) -> int:
        return self.mu.size

    @property
    def H(self) -> np.ndarray:
        return self.L @ self.L.T


def draw_reference(L, rng: np.random.Generator):
    """``xi = L^{-T} eta`` with ``eta ~ N(0, I)`` so ``xi ~ N(0, H^{-1})``.

    Returns ``(xi, rho)`` with ``rho = xi^T H xi / 2 = |eta|^2 / 2``.
    """
    eta = rng.standard_normal(L.shape[0])
    xi = sla.solve_triangular(L, eta, lower=True, trans="T")
    return xi, 0.5 * float(eta @ eta)


@dataclass
class WeightedEnsemble:
    """``M`` samples with unnormalized log-weights and per-sample diagnostics."""

    samples: np.ndarray
    log_weights: np.ndarray
    method: str
    solves: np.ndarray
    newton_iters: np.ndarray
    flags: np.ndarray
    setup_solves: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.samples.shape[0]

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    @property
    def normalized_weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    @property
    def rejected(self) -> int:
        return int(np.count_nonzero(self.flags != OK))

    @property
    def total_solves(self) -> int:
        return int(self.solves.sum())

    def to_csv(self, path) -> None:
        w = self.normalized_weights
        head = ["sample_id"] + [f"theta_{i + 1}" for i in range(self.m)]
        head += ["log_weight", "weight", "solves", "newton_iters"]
        with open(path, "w") as fh:
            fh.write(",".join(head) + "\n")
            for j in range(self.M):
                vals = [repr_float(v) for v in self.samples[j]]
                fh.write(
                    f"{j}," + ",".join(vals)
                    + f",{repr_float(self.log_weights[j])},{repr_float(w[j])},"
                    + f"{int(self.solves[j])},{int(self.newton_iters[j])}\n"
                )


def repr_float(v: float) -> str:
    return f"{float(v):.17g}"


def normalize_log_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    top = np.max(lw)
    if not np.isfinite(top):
        raise ValueError("all weights are zero")
    w = np.exp(lw - top)
    return w / w.sum()


# --- per-sample kernels ------------------------------------------------------
# Each returns (theta, log_w, newton_iters, flag, extra) and charges its
# solves to the target's ledger.


def _linear_kernel(target, mp: MapPoint, seed, j, opts):
    rng = sample_rng(seed, "linear", j)
    xi, rho = draw_reference(mp.L, rng)
    theta = mp.mu + xi
    try:
        lw = mp.phi + rho - target.F(theta)
    except NumericalError:
        return theta, -np.inf, 0, FORWARD_FAILED, None
    return theta, lw, 0, OK, None


def _random_kernel(target, mp: MapPoint, seed, j, opts):
    rng = sample_rng(seed, "random", j)
    xi, rho = draw_reference(mp.L, rng)
    max_iter = opts.get("max_newton", 20)
    rtol = opts.get("newton_tol", 1e-8)
    m = mp.m
    lam = 1.0
    for it in range(1, max_iter + 1):
        theta = mp.mu + lam * xi
        try:
            f = target.F(theta)
            slope = float(target.grad(theta) @ xi)
        except NumericalError:
            return theta, -np.inf, it, FORWARD_FAILED, lam
        resid = f - mp.phi - rho
        if abs(slope) < 1e-14:
            return theta, -np.inf, it, REJECTED_DEGENERATE, lam
        if abs(resid) <= rtol * max(1.0, rho):
            lw = (m - 1) * np.log(abs(lam)) + np.log(2.0 * rho) - np.log(abs(slope))
            return theta, lw, it, OK, lam
        step = lam - resid / slope
        lam = step if step > 0 else 0.5 * lam
    return mp.mu + lam * xi, -np.inf, max_iter, REJECTED_NEWTON, lam


def _symmetric_kernel(target, mp: MapPoint, seed, j, opts):
    rng = sample_rng(seed, "symmetric", j)
    xi, rho = draw_reference(mp.L, rng)
    plus, minus = mp.mu + xi, mp.mu - xi
    lw = []
    for x in (plus, minus):
        try:
            lw.append(mp.phi + rho - target.F(x))
        except NumericalError:
            lw.append(-np.inf)
    lp, lm = lw
    total = np.logaddexp(lp, lm)
    if not np.isfinite(total):
        return plus, -np.inf, 0, FORWARD_FAILED, (np.nan, True)
    p_plus = float(np.exp(lp - total))
    take_plus = bool(rng.random() < p_plus)
    theta = plus if take_plus else minus
    return theta, total - np.log(2.0), 0, OK, (p_plus, take_plus)


_KERNELS = {"linear": _linear_kernel, "random": _random_kernel, "symmetric": _symmetric_kernel}

_worker_state = {}


def _worker_init(kernel_name, target, mp, seed, opts):
    _worker_state.update(kernel=_KERNELS[kernel_name], target=target, mp=mp, seed=seed, opts=opts)


def _run_one(kernel, target, mp, seed, j, opts):
    before = target.ledger.total
    out = kernel(target, mp, seed, j, opts)
    return out + (target.ledger.total - before,)


def _worker_chunk(indices):
    s = _worker_state
    return [_run_one(s["kernel"], s["target"], s["mp"], s["seed"], j, s["opts"]) for j in indices]


def run_sampler(method: str, target, mp: MapPoint, M: int, seed: int, workers: int = 1, **opts) -> WeightedEnsemble:
    """Draw ``M`` weighted samples with ``method`` in {linear, random, symmetric}."""
    if method not in _KERNELS:
        raise ValueError(f"unknown sampling method {method!r}")
    if M < 1:
        raise ValueError("M must be at least 1")
    kernel = _KERNELS[method]
    if workers <= 1:
        records = [_run_one(kernel, target, mp, seed, j, opts) for j in range(M)]
    else:
        chunks = np.array_split(np.arange(M), max(1, min(M, 4 * workers)))
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(
            max_workers=workers, mp_context=ctx, initializer=_worker_init,
            initargs=(method, target, mp, seed, opts),
        ) as pool:
            parts = list(pool.map(_worker_chunk, [c.tolist() for c in chunks]))
        records = [r for part in parts for r in part]
        target.ledger.add(sum(r[-1] for r in records), target.level)

    samples = np.array([r[0] for r in records])
    ens = WeightedEnsemble(
        samples=samples,
        log_weights=np.array([r[1] for r in records], dtype=float),
        method=method,
        solves=np.array([r[5] for r in records], dtype=np.int64),
        newton_iters=np.array([r[2] for r in records], dtype=np.int64),
        flags=np.array([r[3] for r in records], dtype=np.int64),
        setup_solves=mp.setup_solves,
    )
    if method == "random":
        ens.extra["lambda"] = np.array([r[4] for r in records], dtype=float)
    elif method == "symmetric":
        ens.extra["p_plus"] = np.array([r[4][0] for r in records], dtype=float)
        ens.extra["selected_plus"] = np.array([r[4][1] for r in records], dtype=bool)
    if ens.rejected:
        log.warning("%s map: %d of %d samples rejected", method, ens.rejected, M)
    return ens


def linear_map_sample(target, mp: MapPoint, M: int, seed: int, workers: int = 1) -> WeightedEnsemble:
    """``theta = mu + xi`` with ``log w = phi + rho - F(theta)``; one solve per sample."""
    return run_sampler("linear", target, mp, M, seed, workers)


def random_map_sample(
    target, mp: MapPoint, M: int, seed: int, workers: int = 1, max_newton: int = 20, newton_tol: float = 1e-8
) -> WeightedEnsemble:
    """``theta = mu + lambda xi`` solving ``F(theta) - phi = rho`` along ``xi``.

    Newton starts from ``lambda = 1`` and charges two solves per iteration
    (F and the adjoint gradient).  A step that would make ``lambda``
    non-positive halves it instead.  The log-weight is
    ``(m-1) log|lambda| + log(xi^T H xi) - log|grad F . xi|`` at the root.
    Samples whose Newton iteration does not converge within ``max_newton``
    iterations get weight zero and are counted as rejected.
    """
    return run_sampler("random", target, mp, M, seed, workers, max_newton=max_newton, newton_tol=newton_tol)


def symmetrized_sample(target, mp: MapPoint, M: int, seed: int, workers: int = 1) -> WeightedEnsemble:
    """Antithetic linear map: keep ``mu + xi`` or ``mu - xi`` in proportion to their weights.

    The kept sample carries the average of the two weights.
    """
    return run_sampler("symmetric", target, mp, M, seed, workers)


# --- diagnostics ---------------------------------------------------------------


@dataclass(frozen=True)
class QualityReport:
    R_hat: float
    ess: float
    weight_variance: float
    M: int


def quality(ens_or_log_weights) -> QualityReport:
    """``R = E(w^2)/E(w)^2`` estimated as ``M * sum(w_hat^2)``; ESS is ``M / R``."""
    lw = getattr(ens_or_log_weights, "log_weights", ens_or_log_weights)
    w = normalize_log_weights(lw)
    M = w.size
    R = float(M * np.sum(w * w))
    return QualityReport(R_hat=R, ess=M / R, weight_variance=R - 1.0, M=M)


def resample(ens: WeightedEnsemble, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling; returns the ``M`` selected sample indices."""
    w = ens.normalized_weights
    M = w.size
    cum = np.cumsum(w)
    cum[-1] = 1.0
    positions = (rng.random() + np.arange(M)) / M
    return np.searchsorted(cum, positions, side="right")


@dataclass
class PosteriorStats:
    mean: np.ndarray
    std: np.ndarray
    skewness: np.ndarray
    excess_kurtosis: np.ndarray
    mean_se: np.ndarray
    ess: float
    reliable: bool
    hist_edges: np.ndarray
    hist_mass: np.ndarray


def weighted_moments(x: np.ndarray, w: np.ndarray):
    mean = w @ x
    d = x - mean
    var = w @ (d * d)
    std = np.sqrt(var)
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = (w @ d**3) / std**3
        kurt = (w @ d**4) / var**2 - 3.0
    # delta-method standard error of the self-normalized mean
    se = np.sqrt((w * w) @ (d * d))
    return mean, std, skew, kurt, se


def statistics(ens: WeightedEnsemble, bins: int = 40, width: float = 4.0) -> PosteriorStats:
    """Self-normalized moments and fixed-bin marginal histograms.

    Histograms span ``mean +- width * std`` per coordinate with ``bins``
    uniform bins; samples outside fall into the end bins so masses sum to 1.
    """
    w = ens.normalized_weights
    mean, std, skew, kurt, se = weighted_moments(ens.samples, w)
    ess = 1.0 / float(np.sum(w * w))
    reliable = ess >= 2.0
    if not reliable:
        log.warning("effective sample size %.3g < 2; statistics are unreliable", ess)
    m = ens.m
    edges = np.empty((m, bins + 1))
    mass = np.empty((m, bins))
    for i in range(m):
        half = width * std[i] if std[i] > 0 else 1.0
        e = np.linspace(mean[i] - half, mean[i] + half, bins + 1)
        idx = np.clip(np.searchsorted(e, ens.samples[:, i], side="right") - 1, 0, bins - 1)
        edges[i] = e
        mass[i] = np.bincount(idx, weights=w, minlength=bins)
    return PosteriorStats(mean, std, skew, kurt, se, ess, reliable, edges, mass)


def write_histograms_csv(stats: PosteriorStats, path, coords=None) -> None:
    coords = range(stats.mean.size) if coords is None else coords
    with open(path, "w") as fh:
        fh.write("coordinate,bin,left,right,mass\n")
        for i in coords:
            for b in range(stats.hist_mass.shape[1]):
                fh.write(
                    f"{i + 1},{b},{repr_float(stats.hist_edges[i, b])},"
                    f"{repr_float(stats.hist_edges[i, b + 1])},{repr_float(stats.hist_mass[i, b])}\n"
                )
