"""Piecewise-linear finite elements for -div(kappa grad p) = g on the unit square.

The mesh has ``N`` interior nodes per direction, spacing ``h = 1/(N+1)`` and
homogeneous Dirichlet data on the boundary, so the stiffness matrix is
``N**2 x N**2``.  Each square cell is cut along its lower-left/upper-right
diagonal.  Interior unknowns are ordered row-major: ``l = (iy-1)*N + (ix-1)``.

Permeability is a nodal field on the interior nodes.  Boundary nodes borrow
the value of the nearest interior node, and each element uses the mean of its
three vertex values (centroid rule for a linearly interpolated kappa).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import qdldl
import scipy.sparse as sp

from .errors import AssemblyError, ConfigError, InvalidGridError, SolverError

SourceFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def paper_source(amplitude: float = 200.0) -> SourceFunction:
    """Source ``amplitude * pi^2 sin(pi x) sin(pi y)``; 200 is the default problem."""

    def g(x, y):
        return amplitude * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)

    return g


class _FactorCache:
    """Symbolic LDL^T analysis shared by every system assembled on one mesh.

    Only the numeric factorization changes with kappa, so one qdldl solver
    is kept and refactored when a different system asks for a solve.
    """

    def __init__(self, indices, indptr, n):
        self.indices = indices
        self.indptr = indptr
        self.n = n
        self.solver = None
        self.owner = None
        self.lock = threading.Lock()

    def solve(self, system: "FemSystem", rhs: np.ndarray) -> np.ndarray:
        with self.lock:
            if self.owner is not system._token:
                mat = sp.csc_matrix(
                    (system.upper_data, self.indices, self.indptr), shape=(self.n, self.n)
                )
                try:
                    if self.solver is None:
                        self.solver = qdldl.Solver(mat, upper=True)
                    else:
                        self.solver.update(mat, upper=True)
                except Exception as exc:  # qdldl raises plain ValueError/RuntimeError
                    self.owner = None
                    raise SolverError(f"LDL^T factorization failed: {exc}") from exc
                self.owner = system._token
            x = self.solver.solve(np.ascontiguousarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite solution; stiffness matrix is singular")
        return x


class Mesh:
    """Uniform triangulation of [0,1]^2 with ``N`` interior nodes per direction.

    Attributes
    ----------
    N : int
        Interior nodes per direction.
    h : float
        Mesh spacing ``1/(N+1)``.
    coords : ndarray, shape ((N+2)**2, 2)
        All node coordinates, boundary included, ordered ``iy*(N+2) + ix``.
    triangles : ndarray, shape (2*(N+1)**2, 3)
        Counter-clockwise vertex indices into ``coords``.
    boundary : ndarray
        Indices of boundary nodes in ``coords``.
    interior : ndarray, shape (N**2,)
        ``coords`` index of each interior unknown.
    """

    def __init__(self, N: int):
        if int(N) != N or N < 2:
            raise InvalidGridError(f"grid size must be an integer >= 2, got {N!r}")
        N = int(N)
        self.N = N
        self.h = 1.0 / (N + 1)
        n1 = N + 2
        ix, iy = np.meshgrid(np.arange(n1), np.arange(n1))
        ix, iy = ix.ravel(), iy.ravel()
        self.coords = np.column_stack([ix * self.h, iy * self.h])
        on_boundary = (ix == 0) | (iy == 0) | (ix == n1 - 1) | (iy == n1 - 1)
        self.boundary = np.flatnonzero(on_boundary)
        self.interior = np.flatnonzero(~on_boundary)
        # full node -> interior unknown (-1 on the boundary)
        self.dof = np.full(n1 * n1, -1, dtype=np.int64)
        self.dof[self.interior] = np.arange(N * N)
        # full node -> nearest interior unknown, used to extend kappa
        ex = np.clip(ix, 1, N) - 1
        ey = np.clip(iy, 1, N) - 1
        self.extension = ey * N + ex

        cx, cy = np.meshgrid(np.arange(N + 1), np.arange(N + 1))
        n00 = (cy * n1 + cx).ravel()
        n10, n01, n11 = n00 + 1, n00 + n1, n00 + n1 + 1
        lower = np.column_stack([n00, n10, n11])
        upper = np.column_stack([n00, n11, n01])
        self.triangles = np.vstack([lower, upper])

        self._element_geometry()
        self._sparsity()
        self._factor_cache = _FactorCache(self._indices, self._indptr, N * N)

    @property
    def n_dof(self) -> int:
        return self.N * self.N

    @property
    def interior_coords(self) -> np.ndarray:
        return self.coords[self.interior]

    def _element_geometry(self):
        xy = self.coords[self.triangles]  # (nT, 3, 2)
        x, y = xy[..., 0], xy[..., 1]
        area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (
            y[:, 1] - y[:, 0]
        )
        self.areas = 0.5 * area2
        # gradient of barycentric k: (y_{k+1} - y_{k+2}, x_{k+2} - x_{k+1}) / (2A)
        grads = np.empty_like(xy)
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            grads[:, k, 0] = (y[:, a] - y[:, b]) / area2
            grads[:, k, 1] = (x[:, b] - x[:, a]) / area2
        self.local_stiffness = self.areas[:, None, None] * np.einsum(
            "tad,tbd->tab", grads, grads
        )
        self.local_mass = self.areas[:, None, None] * (
            (np.ones((3, 3)) + np.eye(3)) / 12.0
        )

    def _sparsity(self):
        n = self.n_dof
        d = self.dof[self.triangles]  # (nT, 3)
        rows = np.broadcast_to(d[:, :, None], self.local_stiffness.shape)
        cols = np.broadcast_to(d[:, None, :], self.local_stiffness.shape)
        # exact zeros (hypotenuse couplings) stay out of the pattern
        keep = (rows >= 0) & (cols >= 0) & (rows <= cols) & (self.local_stiffness != 0.0)
        self._entry_mask = keep
        r, c = rows[keep], cols[keep]
        keys = c.astype(np.int64) * n + r
        pattern = np.unique(keys)
        self._entry_pos = np.searchsorted(pattern, keys)
        self._nnz = pattern.size
        pc, pr = np.divmod(pattern, n)
        self._indices = pr.astype(np.int32)
        self._indptr = np.searchsorted(pc, np.arange(n + 1)).astype(np.int32)
        self._pattern_rows, self._pattern_cols = pr, pc
        self._offdiag = (pr != pc).astype(float)
        # the upper-triangle data is linear in nodal kappa: data = C @ kappa
        nT = self.triangles.shape[0]
        t_idx = np.broadcast_to(np.arange(nT)[:, None, None], self.local_stiffness.shape)[keep]
        B = sp.csr_matrix((self.local_stiffness[keep], (self._entry_pos, t_idx)), shape=(pattern.size, nT))
        E = sp.csr_matrix(
            (np.full(3 * nT, 1.0 / 3.0), (np.repeat(np.arange(nT), 3), self.extension[self.triangles].ravel())),
            shape=(nT, n),
        )
        self._kappa_to_data = (B @ E).tocsr()
        self._data_to_kappa = self._kappa_to_data.T.tocsr()

    def to_full(self, values: np.ndarray) -> np.ndarray:
        """Embed an interior vector into all nodes with zeros on the boundary."""
        full = np.zeros(self.coords.shape[0])
        full[self.interior] = values
        return full

    def nodal(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Evaluate ``f(x, y)`` at the interior nodes."""
        c = self.interior_coords
        return np.asarray(f(c[:, 0], c[:, 1]), dtype=float)

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_factor_cache"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._factor_cache = _FactorCache(self._indices, self._indptr, self.n_dof)

    def __repr__(self):
        return f"Mesh(N={self.N})"


def build_mesh(N: int) -> Mesh:
    return Mesh(N)


def load_vector(mesh: Mesh, g: Union[SourceFunction, np.ndarray]) -> np.ndarray:
    """Load vector of the P1 interpolant of ``g`` with the exact mass matrix."""
    if callable(g):
        gn = np.asarray(g(mesh.coords[:, 0], mesh.coords[:, 1]), dtype=float)
    else:
        gn = np.asarray(g, dtype=float)
        if gn.shape != (mesh.coords.shape[0],):
            raise ConfigError("nodal source must cover all mesh nodes")
    contrib = np.einsum("tab,tb->ta", mesh.local_mass, gn[mesh.triangles])
    full = np.bincount(mesh.triangles.ravel(), weights=contrib.ravel(), minlength=len(gn))
    return full[mesh.interior]


@dataclass
class FemSystem:
    """Assembled stiffness system ``A P = G`` for one permeability field.

    ``upper_data`` holds the upper triangle of A in the mesh's CSC pattern;
    the full symmetric matrix is available as :attr:`A`.
    """

    mesh: Mesh
    kappa: np.ndarray
    upper_data: np.ndarray
    G: np.ndarray
    _token: object = field(default_factory=object, repr=False, compare=False)

    @property
    def A(self) -> sp.csr_matrix:
        n = self.mesh.n_dof
        U = sp.csc_matrix((self.upper_data, self.mesh._indices, self.mesh._indptr), shape=(n, n))
        return (U + sp.triu(U, k=1).T).tocsr()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.mesh._factor_cache.solve(self, rhs)


def element_kappa(mesh: Mesh, kappa: np.ndarray) -> np.ndarray:
    return kappa[mesh.extension][mesh.triangles].mean(axis=1)


def assemble(
    mesh: Mesh,
    kappa: np.ndarray,
    g: Union[SourceFunction, np.ndarray, None] = None,
    *,
    G: Optional[np.ndarray] = None,
) -> FemSystem:
    """Assemble the stiffness matrix for nodal permeability ``kappa``.

    Parameters
    ----------
    mesh : Mesh
    kappa : ndarray, shape (N**2,)
        Positive permeability at the interior nodes.
    g : callable or ndarray, optional
        Source function ``g(x, y)`` or nodal values on all nodes.  Defaults
        to :func:`paper_source`.
    G : ndarray, optional
        Precomputed load vector; skips the source quadrature.
    """
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != (mesh.n_dof,):
        raise AssemblyError(f"kappa has shape {kappa.shape}, expected ({mesh.n_dof},)")
    if not np.all(np.isfinite(kappa)) or np.any(kappa <= 0.0):
        raise AssemblyError("permeability must be finite and strictly positive")
    if G is None:
        G = load_vector(mesh, paper_source() if g is None else g)
    data = mesh._kappa_to_data @ kappa
    return FemSystem(mesh=mesh, kappa=kappa, upper_data=data, G=np.asarray(G, dtype=float))


def solve_forward(system: FemSystem) -> np.ndarray:
    """Pressure at the interior nodes, ``P = A^{-1} G``."""
    return system.solve(system.G)


def adjoint_solve(system: FemSystem, W: np.ndarray) -> np.ndarray:
    """``A^{-T} W``; A is symmetric so this reuses the forward factorization."""
    return system.solve(W)


def stiffness_sensitivity_products(system: FemSystem, P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Vector with entries ``P^T (dA/dK_l) Y`` for every interior node ``l``.

    Each element contributes ``P_T^T K_T Y_T / 3`` to each of its vertices;
    boundary vertices pass their share to the interior node they borrow
    kappa from.  Since A is linear in kappa this is the transpose of the
    assembly map applied to the entrywise products ``P_r Y_c + P_c Y_r``.
    """
    mesh = system.mesh
    n = mesh.n_dof
    if P.shape != (n,) or Y.shape != (n,):
        raise ValueError("P and Y must be interior vectors of the system")
    r, c = mesh._pattern_rows, mesh._pattern_cols
    u = P[r] * Y[c] + mesh._offdiag * (P[c] * Y[r])
    return mesh._data_to_kappa @ u


@dataclass(frozen=True)
class ObservationOperator:
    """Linear map from interior pressures to ``k`` measurement values.

    ``matrix`` is a selection matrix when every point is a mesh node
    (``node_indices`` then lists the selected unknowns); otherwise each row
    holds the P1 interpolation weights of its point.
    """

    matrix: sp.csr_matrix
    points: np.ndarray
    node_indices: Optional[np.ndarray]

    @property
    def k(self) -> int:
        return self.matrix.shape[0]


def measurement_points(N_fine: int = 64, stride: int = 4, margin: int = 19) -> np.ndarray:
    """Measurement locations on the fine grid.

    Node indices count the boundary as 0; the first ``margin`` interior
    layers next to each edge are skipped and every ``stride``-th node is kept
    from there on.  ``(64, 4, 19)`` gives indices 20, 24, ..., 44 in each
    direction, i.e. 49 points.
    """
    if stride < 1 or margin < 0:
        raise ConfigError("stride must be >= 1 and margin >= 0")
    idx = np.arange(margin + 1, N_fine - margin + 1, stride)
    if idx.size == 0:
        raise ConfigError(f"stride {stride} and margin {margin} leave no points on N={N_fine}")
    h = 1.0 / (N_fine + 1)
    gx, gy = np.meshgrid(idx * h, idx * h)
    return np.column_stack([gx.ravel(), gy.ravel()])


def observation_operator(mesh: Mesh, points: np.ndarray, tol: float = 1e-9) -> ObservationOperator:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise ConfigError("measurement points must lie in [0, 1]^2")
    N, h, n1 = mesh.N, mesh.h, mesh.N + 2
    u = points / h
    cell = np.clip(np.floor(u + tol), 0, N).astype(np.int64)
    s = u[:, 0] - cell[:, 0]
    t = u[:, 1] - cell[:, 1]
    s[np.abs(s) < tol] = 0.0
    t[np.abs(t) < tol] = 0.0
    n00 = cell[:, 1] * n1 + cell[:, 0]
    n10, n01, n11 = n00 + 1, n00 + n1, n00 + n1 + 1
    low = s >= t
    verts = np.where(
        low[:, None], np.column_stack([n00, n10, n11]), np.column_stack([n00, n11, n01])
    )
    weights = np.where(
        low[:, None],
        np.column_stack([1.0 - s, s - t, t]),
        np.column_stack([1.0 - t, s, t - s]),
    )
    dof = mesh.dof[verts]
    keep = (dof >= 0) & (weights != 0.0)
    rows = np.broadcast_to(np.arange(len(points))[:, None], dof.shape)[keep]
    Mmat = sp.csr_matrix((weights[keep], (rows, dof[keep])), shape=(len(points), mesh.n_dof))
    Mmat.sum_duplicates()
    node_indices = None
    per_row = np.diff(Mmat.indptr)
    if np.all(per_row == 1) and np.allclose(Mmat.data, 1.0):
        node_indices = Mmat.indices.copy()
    return ObservationOperator(matrix=Mmat, points=points, node_indices=node_indices)


def selection_operator(mesh: Mesh, indices) -> ObservationOperator:
    """Observation operator selecting the given interior unknowns."""
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= mesh.n_dof):
        raise ConfigError("measurement index out of range")
    k = len(indices)
    Mmat = sp.csr_matrix((np.ones(k), (np.arange(k), indices)), shape=(k, mesh.n_dof))
    return ObservationOperator(Mmat, mesh.interior_coords[indices], indices.copy())


def observe(P: np.ndarray, obs: ObservationOperator) -> np.ndarray:
    if P.shape[-1] != obs.matrix.shape[1]:
        raise ConfigError(
            f"pressure has {P.shape[-1]} entries, operator expects {obs.matrix.shape[1]}"
        )
    return obs.matrix @ P


# degree-5, 7-point rule on the reference triangle (barycentric coords, weights sum to 1)
_A1, _B1 = 0.0597158717897698, 0.4701420641051151
_A2, _B2 = 0.7974269853530873, 0.1012865073234563
_QUAD7 = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_W7 = np.array([0.225] + [0.1323941527885062] * 3 + [0.1259391805448271] * 3)


def l2_error(mesh: Mesh, P: np.ndarray, exact: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """L2 norm of ``p_h - exact`` over the unit square (7-point rule per element)."""
    xy = mesh.coords[mesh.triangles]  # (nT, 3, 2)
    pts = np.einsum("qa,tad->tqd", _QUAD7, xy)
    ph = np.einsum("qa,ta->tq", _QUAD7, mesh.to_full(P)[mesh.triangles])
    err = ph - exact(pts[..., 0], pts[..., 1])
    return float(np.sqrt(np.sum(mesh.areas[:, None] * _W7[None, :] * err**2)))


def write_matrix_coo(system: FemSystem, path) -> None:
    """Debug dump of A as a ``row,col,value`` CSV (0-based indices)."""
    A = system.A.tocoo()
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(A.row, A.col, A.data):
            fh.write(f"{r},{c},{v:.17g}\n")
