"""Log-normal prior with separable squared-exponential covariance and its KL reduction.

The covariance factors as ``Sigma = Sigma_y (x) Sigma_x`` over the grid, so
its eigenpairs are products of 1-D eigenpairs.  The retained ``m`` modes map
reduced coordinates to the log-permeability field through

    log K = mu_hat + V^T Lambda^{1/2} theta,      theta ~ N(0, I_m).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .mesh_fem import Mesh


@dataclass(frozen=True)
class CovarianceSpec:
    sigma_x: float = 1.0
    sigma_y: float = 1.0
    l_x: float = float(np.sqrt(0.5))
    l_y: float = float(np.sqrt(0.5))

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "l_x", "l_y"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def scale(self, axis: str) -> tuple[float, float]:
        if axis == "x":
            return self.sigma_x, self.l_x
        if axis == "y":
            return self.sigma_y, self.l_y
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def covariance_1d(spec: CovarianceSpec, axis: str, nodes, other=None) -> np.ndarray:
    """``sigma^2 exp(-(t_i - s_j)^2 / l^2)`` between ``nodes`` and ``other`` (default: itself)."""
    sigma, ell = spec.scale(axis)
    t = np.asarray(nodes, dtype=float)
    s = t if other is None else np.asarray(other, dtype=float)
    return sigma**2 * np.exp(-((t[:, None] - s[None, :]) ** 2) / ell**2)


def _axis_eig(C: np.ndarray, rtol: float):
    w, U = np.linalg.eigh(C)
    w, U = w[::-1], U[:, ::-1]
    w = np.clip(w, 0.0, None)
    keep = w >= rtol * w[0] if rtol > 0 else np.ones_like(w, dtype=bool)
    w, U = w[keep], U[:, keep]
    # sign convention: first non-negligible entry positive
    for j in range(U.shape[1]):
        col = U[:, j]
        first = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max())[0]
        if col[first] < 0:
            U[:, j] = -col
    return w, U


@dataclass(frozen=True)
class KLBasis:
    """Truncated tensor-product eigenbasis of the prior covariance.

    Attributes
    ----------
    m : int
        Retained modes.
    V : ndarray, shape (m, N**2)
        Orthonormal eigenvectors (rows) on the construction mesh.
    eigenvalues : ndarray, shape (m,)
        Descending eigenvalues ``Lambda``.
    captured_fraction : float
        ``sum(Lambda) / trace(Sigma)``.
    mean_field : ndarray, shape (N**2,)
        Prior mean ``mu_hat`` of the log-permeability.
    """

    spec: CovarianceSpec
    N: int
    V: np.ndarray
    eigenvalues: np.ndarray
    captured_fraction: float
    mean_value: float
    mean_field: np.ndarray
    axis_nodes: np.ndarray
    axis_x: tuple
    axis_y: tuple
    mode_index: np.ndarray  # (m, 2) of (x-mode, y-mode)
    all_eigenvalues: np.ndarray

    @property
    def m(self) -> int:
        return self.eigenvalues.size

    @property
    def prior_mean_theta(self) -> np.ndarray:
        """Prior mean in reduced coordinates; zero because mu_hat is carried as an offset."""
        return np.zeros(self.m)

    def field_matrix(self, mesh: Optional[Mesh] = None) -> np.ndarray:
        """``V^T Lambda^{1/2}`` evaluated on ``mesh`` (shape ``(N_mesh**2, m)``).

        On the construction grid this is exact; on any other grid the 1-D
        eigenvectors are extended by the Nystrom formula
        ``v(s) = sum_j k(s, t_j) v_j / lambda``, which reproduces ``v`` at the
        construction nodes.
        """
        if mesh is None or mesh.N == self.N:
            return self.V.T * np.sqrt(self.eigenvalues)
        s = np.arange(1, mesh.N + 1) * mesh.h
        ux = self._extend("x", s)
        uy = self._extend("y", s)
        ix, iy = self.mode_index[:, 0], self.mode_index[:, 1]
        # interior ordering is row-major in y: l = jy*N + jx
        cols = (uy[:, None, iy] * ux[None, :, ix]).reshape(mesh.N * mesh.N, self.m)
        return cols * np.sqrt(self.eigenvalues)

    def _extend(self, axis: str, s: np.ndarray) -> np.ndarray:
        w, U = self.axis_x if axis == "x" else self.axis_y
        K = covariance_1d(self.spec, axis, s, self.axis_nodes)
        return (K @ U) / w

    def mean_on(self, mesh: Optional[Mesh] = None) -> np.ndarray:
        n = self.N if mesh is None else mesh.N
        return np.full(n * n, self.mean_value)

    def covariance_field(self) -> np.ndarray:
        """Dense low-rank covariance ``V^T Lambda V`` on the construction grid."""
        B = self.field_matrix()
        return B @ B.T

    def spectrum_rows(self):
        cum = np.cumsum(self.all_eigenvalues) / (self.N**2 * self.spec.sigma_x**2 * self.spec.sigma_y**2)
        return [(i + 1, lam, c) for i, (lam, c) in enumerate(zip(self.all_eigenvalues, cum))]


def build_kl(
    spec: CovarianceSpec,
    mesh: Mesh,
    m: Optional[int] = 30,
    target_fraction: Optional[float] = None,
    mean_value: float = 0.0,
    axis_rtol: float = 1e-12,
) -> KLBasis:
    """Build the truncated KL basis on the interior nodes of ``mesh``.

    Exactly one of ``m`` and ``target_fraction`` selects the truncation.
    Per-axis eigenpairs below ``axis_rtol`` times the largest are dropped
    before the tensor product is formed.

    Raises
    ------
    ConfigError
        If the requested ``m`` or fraction cannot be reached; the message
        reports the maximum achievable value.
    """
    if target_fraction is not None:
        m = None
        if not 0 < target_fraction <= 1:
            raise ConfigError("target_fraction must lie in (0, 1]")
    elif m is None or m < 1:
        raise ConfigError("m must be a positive integer")

    N = mesh.N
    t = np.arange(1, N + 1) * mesh.h
    wx, Ux = _axis_eig(covariance_1d(spec, "x", t), axis_rtol)
    wy, Uy = _axis_eig(covariance_1d(spec, "y", t), axis_rtol)
    prod = np.outer(wx, wy)  # [ix, iy]
    ix, iy = np.meshgrid(np.arange(wx.size), np.arange(wy.size), indexing="ij")
    ix, iy, lam = ix.ravel(), iy.ravel(), prod.ravel()
    order = np.lexsort((iy, ix, -lam))
    ix, iy, lam = ix[order], iy[order], lam[order]

    total = N * N * spec.sigma_x**2 * spec.sigma_y**2  # trace of the full covariance
    cum = np.cumsum(lam) / total
    if target_fraction is not None:
        hit = np.flatnonzero(cum >= target_fraction - 1e-15)
        if hit.size == 0:
            raise ConfigError(
                f"target fraction {target_fraction} unreachable; max achievable {cum[-1]:.15g}"
            )
        m = int(hit[0]) + 1
    if m > lam.size:
        raise ConfigError(
            f"m={m} exceeds the {lam.size} retained tensor modes "
            f"(max captured fraction {cum[-1]:.15g})"
        )
    ix, iy, lam_m = ix[:m], iy[:m], lam[:m]
    # row l = jy*N + jx of mode k is Uy[jy, iy_k] * Ux[jx, ix_k]
    V = (Uy[:, None, iy] * Ux[None, :, ix]).reshape(N * N, m).T.copy()
    return KLBasis(
        spec=spec,
        N=N,
        V=V,
        eigenvalues=lam_m.copy(),
        captured_fraction=float(min(cum[m - 1], 1.0)),
        mean_value=float(mean_value),
        mean_field=np.full(N * N, float(mean_value)),
        axis_nodes=t,
        axis_x=(wx, Ux),
        axis_y=(wy, Uy),
        mode_index=np.column_stack([ix, iy]),
        all_eigenvalues=lam,
    )


def theta_to_logk(basis: KLBasis, theta: np.ndarray, mesh: Optional[Mesh] = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != basis.m:
        raise ValueError(f"theta has {theta.shape[-1]} entries, basis has m={basis.m}")
    return basis.mean_on(mesh) + basis.field_matrix(mesh) @ theta


def logk_to_theta(basis: KLBasis, logk: np.ndarray) -> np.ndarray:
    """Inverse change of variables on the construction grid (projection onto the modes)."""
    return (basis.V @ (np.asarray(logk) - basis.mean_field)) / np.sqrt(basis.eigenvalues)


def theta_to_kappa(basis: KLBasis, theta: np.ndarray, mesh: Optional[Mesh] = None) -> np.ndarray:
    return np.exp(theta_to_logk(basis, theta, mesh))


def sample_prior(basis: KLBasis, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``theta ~ N(prior_mean_theta, I_m)``."""
    shape = (basis.m,) if size is None else (size, basis.m)
    return basis.prior_mean_theta + rng.standard_normal(shape)


def write_spectrum_csv(basis: KLBasis, path) -> None:
    with open(path, "w") as fh:
        fh.write("index,eigenvalue,cumulative_fraction\n")
        for i, lam, c in basis.spectrum_rows():
            fh.write(f"{i},{lam:.17g},{c:.17g}\n")
