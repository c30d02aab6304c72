"""BFGS with a cubic-interpolation strong-Wolfe line search, cascaded over grids."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class OptimizeResult:
    mu: np.ndarray
    phi: float
    grad: np.ndarray
    iterations: int
    function_evals: int
    gradient_evals: int
    solves: int
    converged: bool
    message: str = ""
    level: Optional[int] = None
    trace: list = field(default_factory=list)
    inverse_hessian: Optional[np.ndarray] = None

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


_F_NOISE = 1e-12


class _LineSearchFailure(Exception):
    pass


class _Objective:
    """Counts evaluations and caches the gradient at the last trial point."""

    def __init__(self, fun, jac):
        self.fun = fun
        self.jac = jac
        self.nfev = 0
        self.njev = 0

    def f(self, x) -> float:
        self.nfev += 1
        try:
            v = float(self.fun(x))
        except NumericalError:
            return math.inf
        return v if math.isfinite(v) else math.inf

    def g(self, x) -> np.ndarray:
        self.njev += 1
        return np.asarray(self.jac(x), dtype=float)


def _cubic_min(a, fa, da, b, fb, db):
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _quad_min(a, fa, da, b, fb):
    denom = 2.0 * (fb - fa - da * (b - a))
    if denom <= 0:
        return None
    return a - da * (b - a) ** 2 / denom


def wolfe_line_search(obj: _Objective, x, p, f0, g0, alpha0=1.0, c1=1e-4, c2=0.9, max_trials=20):
    """Strong-Wolfe step along ``p``; returns ``(alpha, f, g)``.

    Bracketing starts from ``alpha0`` and doubles; the zoom phase uses cubic
    interpolation when both end slopes are known and a quadratic otherwise,
    falling back to bisection when the trial lands too close to an end.
    """
    d0 = float(g0 @ p)
    if d0 >= 0:
        raise _LineSearchFailure("not a descent direction")
    trials = 0
    # roundoff allowance on F so steps near the noise floor can still be accepted
    noise = _F_NOISE * max(1.0, abs(f0))

    def phi(a):
        nonlocal trials
        trials += 1
        return obj.f(x + a * p)

    def dphi(a):
        g = obj.g(x + a * p)
        return float(g @ p), g

    def zoom(lo, f_lo, d_lo, g_lo, hi, f_hi, d_hi):
        while trials < max_trials:
            width = hi - lo
            t = None
            if math.isfinite(f_hi):
                if d_hi is not None:
                    t = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
                else:
                    t = _quad_min(lo, f_lo, d_lo, hi, f_hi)
            a_min, a_max = min(lo, hi), max(lo, hi)
            margin = 0.1 * abs(width)
            if t is None or not (a_min + margin <= t <= a_max - margin):
                t = lo + 0.5 * width
            f = phi(t)
            if f > f0 + c1 * t * d0 + noise or f >= f_lo + noise:
                hi, f_hi, d_hi = t, f, None
                continue
            d, g = dphi(t)
            if abs(d) <= -c2 * d0:
                return t, f, g
            if d * (hi - lo) >= 0:
                hi, f_hi, d_hi = lo, f_lo, d_lo
            lo, f_lo, d_lo = t, f, d
        raise _LineSearchFailure("zoom did not satisfy the Wolfe conditions")

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = alpha0
    while trials < max_trials:
        f = phi(a)
        if f > f0 + c1 * a * d0 + noise or (a_prev > 0 and f >= f_prev + noise):
            return zoom(a_prev, f_prev, d_prev, g_prev, a, f, None)
        d, g = dphi(a)
        if abs(d) <= -c2 * d0:
            return a, f, g
        if d >= 0:
            return zoom(a, f, d, g, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a = 2.0 * a
    raise _LineSearchFailure("bracketing exhausted the trial budget")


def _backtracking(obj: _Objective, x, p, f0, g0, alpha0, c1, max_trials):
    d0 = float(g0 @ p)
    a = alpha0
    for _ in range(max_trials):
        f = obj.f(x + a * p)
        if f <= f0 + c1 * a * d0:
            return a, f, obj.g(x + a * p)
        a *= 0.5
    raise _LineSearchFailure("backtracking failed")


def bfgs_minimize(
    fun: Callable,
    jac: Callable,
    theta0,
    gtol: float = 1e-6,
    max_iter: int = 200,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_line_search: int = 20,
    ledger=None,
    level=None,
    inverse_hessian=None,
    scale_initial: bool = True,
) -> OptimizeResult:
    """Minimize ``fun`` by BFGS on the inverse Hessian.

    The initial inverse Hessian is the identity, rescaled by ``s^T y / y^T y``
    after the first step.  The first trial step has length
    ``min(1, 1/|g|)`` along ``-g``; later iterations try the full step 1.
    Stops when ``|grad| <= gtol``.  If the Wolfe search fails, one
    steepest-descent backtracking step is attempted before giving up with
    ``converged=False``.
    """
    obj = _Objective(fun, jac)
    x = np.array(theta0, dtype=float)
    n = x.size
    start_solves = ledger.total if ledger is not None else 0

    def solves():
        return (ledger.total - start_solves) if ledger is not None else obj.nfev + obj.njev

    f = obj.f(x)
    if not math.isfinite(f):
        raise NumericalError("objective is not finite at the starting point")
    g = obj.g(x)
    if inverse_hessian is None:
        Hinv = np.eye(n)
        first = True
    else:
        Hinv = np.array(inverse_hessian, dtype=float)
        first = False
    trace = [(level, 0, f, float(np.linalg.norm(g)), 0.0, solves())]
    it = 0
    converged = bool(np.linalg.norm(g) <= gtol)
    message = "gradient tolerance reached" if converged else ""
    fallback_used = False
    while not converged and it < max_iter:
        p = -Hinv @ g
        if g @ p >= 0:  # lost positive definiteness
            Hinv = np.eye(n)
            p = -g
        alpha0 = min(1.0, 1.0 / np.linalg.norm(g)) if first else 1.0
        try:
            a, f_new, g_new = wolfe_line_search(
                obj, x, p, f, g, alpha0=alpha0, c1=c1, c2=c2, max_trials=max_line_search
            )
            fallback_used = False
        except _LineSearchFailure as exc:
            if fallback_used:
                message = f"line search failed twice: {exc}"
                break
            log.warning("line search failed (%s); taking a steepest-descent step", exc)
            fallback_used = True
            p = -g
            try:
                a, f_new, g_new = _backtracking(
                    obj, x, p, f, g, min(1.0, 1.0 / np.linalg.norm(g)), c1, max_line_search
                )
            except _LineSearchFailure as exc2:
                message = f"steepest-descent fallback failed: {exc2}"
                break
            Hinv = np.eye(n)
            first = True
        s = a * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first and scale_initial:
                Hinv = (sy / float(y @ y)) * np.eye(n)
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = (
                Hinv
                - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
            )
            first = False
        x = x + s
        f, g = f_new, g_new
        it += 1
        gn = float(np.linalg.norm(g))
        trace.append((level, it, f, gn, float(np.linalg.norm(s)), solves()))
        if gn <= gtol:
            converged = True
            message = "gradient tolerance reached"
    if not converged and not message:
        message = "maximum iterations reached"
    return OptimizeResult(
        mu=x,
        phi=f,
        grad=g,
        iterations=it,
        function_evals=obj.nfev,
        gradient_evals=obj.njev,
        solves=solves(),
        converged=converged,
        message=message,
        level=level,
        trace=trace,
        inverse_hessian=Hinv,
    )


@dataclass
class GridCascade:
    sizes: tuple = (16, 32, 64)
    gtols: Optional[tuple] = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ConfigError("grid cascade is empty")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("grid sizes must be strictly increasing")
        if any(b % a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("each grid size must divide the next")
        self.sizes = sizes
        if self.gtols is None:
            self.gtols = tuple([1e-4] * (len(sizes) - 1) + [1e-6])
        if len(self.gtols) != len(sizes):
            raise ConfigError("one gradient tolerance per level is required")


@dataclass
class MultigridResult:
    levels: list
    fine_equivalent_solves: float
    N_fine: int

    @property
    def final(self) -> OptimizeResult:
        return self.levels[-1]

    @property
    def mu(self):
        return self.final.mu

    @property
    def phi(self):
        return self.final.phi

    @property
    def converged(self):
        return self.final.converged

    @property
    def trace(self):
        return [row for r in self.levels for row in r.trace]


def multigrid_minimize(
    targets: Sequence,
    theta0,
    gtols: Sequence[float],
    max_iter: int = 200,
    carry_inverse_hessian: bool = True,
    scale_initial: bool = False,
) -> MultigridResult:
    """Minimize on each target in order, warm-starting from the previous minimizer.

    ``targets`` are coarse-to-fine posteriors sharing one reduced
    parameterization, so the minimizer carries over without interpolation.
    With ``carry_inverse_hessian`` the BFGS inverse Hessian is passed on as
    well, since the reduced Hessian barely changes under refinement.
    The cost of a level with grid ``N`` is weighted by ``(N/N_fine)^2``.
    """
    if len(targets) != len(gtols):
        raise ConfigError("one gradient tolerance per level is required")
    N_fine = targets[-1].level
    x = np.asarray(theta0, dtype=float)
    Hinv = None
    results = []
    fine_eq = 0.0
    for tgt, tol in zip(targets, gtols):
        res = bfgs_minimize(
            tgt.F, tgt.grad, x, gtol=tol, max_iter=max_iter, ledger=tgt.ledger, level=tgt.level,
            inverse_hessian=Hinv, scale_initial=scale_initial,
        )
        results.append(res)
        weight = (tgt.level / N_fine) ** 2 if isinstance(tgt.level, int) else 1.0
        fine_eq += res.solves * weight
        log.info(
            "level %s: %d iterations, %d f-evals, %d g-evals, %d solves, |g|=%.3g",
            tgt.level, res.iterations, res.function_evals, res.gradient_evals, res.solves, res.grad_norm,
        )
        if not res.converged:
            raise OptimizationError(f"level {tgt.level} did not converge: {res.message}", results)
        x = res.mu
        if carry_inverse_hessian:
            Hinv = res.inverse_hessian
    return MultigridResult(levels=results, fine_equivalent_solves=fine_eq, N_fine=N_fine)


class OptimizationError(NumericalError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial or []


def write_trace_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("level,iter,F,grad_norm,step_len,cum_solves\n")
        for level, it, f, gn, step, cs in rows:
            fh.write(f"{level},{it},{f:.17g},{gn:.17g},{step:.17g},{cs}\n")
