"""Hessian of F at the MAP point: Gauss-Newton, finite differences, robust factor."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


@dataclass
class HessianModel:
    """Precision ``H = L L^T`` at the MAP point.

    ``covariance`` is ``H^{-1}``; for the Gauss-Newton model it is computed
    independently through the Woodbury form ``I - Q^T (Q Q^T + R)^{-1} Q``.
    ``shift`` is the diagonal shift added by :func:`robust_factor`.
    """

    H: np.ndarray
    L: np.ndarray
    covariance: np.ndarray
    provenance: str
    solves: int = 0
    shift: float = 0.0

    @property
    def m(self) -> int:
        return self.H.shape[0]


def fd_jacobian(target, mu, step: Optional[np.ndarray] = None) -> np.ndarray:
    """Forward-difference Jacobian ``Q = d(M P)/d theta`` at ``mu``.

    Uses ``m + 1`` forward solves with steps ``sqrt(eps) * max(1, |mu_i|)``.
    """
    mu = np.asarray(mu, dtype=float)
    m = mu.size
    h = np.sqrt(_EPS) * np.maximum(1.0, np.abs(mu)) if step is None else np.broadcast_to(step, (m,))
    base = np.asarray(target.observations(mu), dtype=float)
    Q = np.empty((base.size, m))
    for i in range(m):
        x = mu.copy()
        x[i] += h[i]
        hi = x[i] - mu[i]  # exactly representable step
        try:
            Q[:, i] = (target.observations(x) - base) / hi
        except NumericalError as exc:
            raise NumericalError(f"forward solve failed in Jacobian column {i}: {exc}") from exc
    return Q


def gauss_newton_hessian(Q, noise_var, solves: int = 0, check: bool = True) -> HessianModel:
    """Gauss-Newton precision ``I + Q^T R^{-1} Q`` with its Woodbury inverse.

    ``R`` is diagonal with entries ``noise_var``.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    r = np.asarray(noise_var, dtype=float)
    k, m = Q.shape
    H = np.eye(m) + Q.T @ (Q / r[:, None])
    H = 0.5 * (H + H.T)
    S = Q @ Q.T + np.diag(r)
    C = np.eye(m) - Q.T @ np.linalg.solve(S, Q)
    C = 0.5 * (C + C.T)
    if check:
        err = np.max(np.abs(H @ C - np.eye(m)))
        if err > 1e-8:
            log.warning("Woodbury identity residual %.3g exceeds 1e-8", err)
    L, shift = robust_factor(H)
    return HessianModel(H=H, L=L, covariance=C, provenance="gauss_newton", solves=solves, shift=shift)


def fd_hessian(target, mu, method: str = "gradient", phi: Optional[float] = None) -> HessianModel:
    """Finite-difference Hessian of F at ``mu``, symmetrized.

    ``method="gradient"`` differences adjoint gradients forward in each
    coordinate (``m + 1`` gradients, ``2(m+1)`` solves).  ``"central"`` uses
    central gradient differences with steps ``eps^{1/3}`` (``4m`` solves).
    ``"function"`` uses second differences of F only, without exploiting
    symmetry: ``m`` column bases ``F(mu + h_i e_i)`` and ``m^2`` pair values,
    i.e. ``m(m+1)`` solves given ``phi = F(mu)``.
    """
    mu = np.asarray(mu, dtype=float)
    m = mu.size
    start = target.ledger.total
    H = np.empty((m, m))
    scale = np.maximum(1.0, np.abs(mu))
    if method == "gradient":
        h = np.sqrt(_EPS) * scale
        g0 = target.grad(mu)
        for i in range(m):
            x = mu.copy()
            x[i] += h[i]
            H[:, i] = (target.grad(x) - g0) / (x[i] - mu[i])
    elif method == "central":
        h = _EPS ** (1.0 / 3.0) * scale
        for i in range(m):
            xp, xm = mu.copy(), mu.copy()
            xp[i] += h[i]
            xm[i] -= h[i]
            H[:, i] = (target.grad(xp) - target.grad(xm)) / (xp[i] - xm[i])
    elif method == "function":
        h = (mu + _EPS**0.25 * scale) - mu
        f0 = target.F(mu) if phi is None else float(phi)
        base = np.empty(m)
        for i in range(m):
            x = mu.copy()
            x[i] += h[i]
            base[i] = target.F(x)
        for i in range(m):
            for j in range(m):
                x = mu.copy()
                x[i] += h[i]
                x[j] += h[j]
                H[j, i] = (target.F(x) - base[i] - base[j] + f0) / (h[i] * h[j])
    else:
        raise ValueError(f"unknown finite-difference method {method!r}")
    H = 0.5 * (H + H.T)
    L, shift = robust_factor(H)
    if shift > 0:
        log.warning("finite-difference Hessian is indefinite; shifted by %.3g", shift)
    C = sla.cho_solve((L, True), np.eye(m))
    return HessianModel(
        H=H, L=L, covariance=0.5 * (C + C.T), provenance=f"finite_difference:{method}",
        solves=target.ledger.total - start, shift=shift,
    )


def robust_factor(H, eps: Optional[float] = None):
    """Cholesky factor of ``H``, shifting the diagonal when ``H`` is not SPD.

    Returns ``(L, shift)`` with ``L`` lower triangular and
    ``L L^T = H + shift I``.  When a shift is needed it raises the smallest
    eigenvalue to ``2 eps`` where ``eps = 1e-8 * max(|trace H| / m, 1e-300)``.
    """
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + H.T)
    m = H.shape[0]
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    if eps is None:
        eps = 1e-8 * max(abs(np.trace(H)) / m, 1e-300)
    lam_min = float(np.linalg.eigvalsh(H)[0])
    shift = max(0.0, 2.0 * eps - lam_min)
    while True:
        try:
            return np.linalg.cholesky(H + shift * np.eye(m)), shift
        except np.linalg.LinAlgError:
            shift = 2.0 * shift + eps


def write_hessian_csv(model: HessianModel, path) -> None:
    np.savetxt(path, model.H, delimiter=",", fmt="%.17g")
