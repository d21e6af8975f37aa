"""Assembly of the design matrix, the regularisation operator and the P1 mass matrix."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DimensionError, DomainError, NumericalError
from .kinetics import InjectionGrid, KineticsParams, kernel
from .mesh import TriMesh

_S15 = np.sqrt(15.0)
_A1, _A2 = (6.0 - _S15) / 21.0, (6.0 + _S15) / 21.0
_W1, _W2 = (155.0 - _S15) / 1200.0, (155.0 + _S15) / 1200.0

# Barycentric points and weights (summing to 1) on the reference triangle.
QUADRATURE = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    3: (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.full(3, 1 / 3)),
    7: (np.array([[1 / 3, 1 / 3, 1 / 3],
                  [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1], [_A1, _A1, 1 - 2 * _A1],
                  [1 - 2 * _A2, _A2, _A2], [_A2, 1 - 2 * _A2, _A2], [_A2, _A2, 1 - 2 * _A2]]),
        np.array([9 / 40, _W1, _W1, _W1, _W2, _W2, _W2])),
}


def quadrature_points(mesh: TriMesh, order: int = 7):
    """Physical quadrature points, weights (area included) and barycentric values.

    Returns ``(points (M*q, 2), weights (M*q,), lam (q, 3))``; point ``t*q + k`` lies in
    triangle ``t``.
    """
    if order not in QUADRATURE:
        raise DomainError(f"quadrature order must be one of {sorted(QUADRATURE)}")
    lam, w = QUADRATURE[order]
    p = mesh.nodes[mesh.triangles]                      # (M, 3, 2)
    pts = np.einsum("qk,mkd->mqd", lam, p).reshape(-1, 2)
    wts = (mesh.areas[:, None] * w[None, :]).ravel()
    return pts, wts, lam


def _basis_scatter(mesh: TriMesh, order: int) -> tuple[np.ndarray, sp.csr_matrix]:
    """Quadrature points and the sparse map from point values to hat-function integrals."""
    pts, wts, lam = quadrature_points(mesh, order)
    q = lam.shape[0]
    M = mesh.n_triangles
    rows = np.repeat(np.arange(M * q), 3)
    cols = np.repeat(mesh.triangles, q, axis=0).ravel()
    vals = (np.tile(lam, (M, 1)) * wts[:, None]).ravel()
    B = sp.csr_matrix((vals, (rows, cols)), shape=(M * q, mesh.n_nodes))
    return pts, B


@dataclass
class DesignSystem:
    """Discretised forward operator with its prior operator and mass matrix.

    ``K`` has ``n_times * n_conc`` rows ordered sensorgram by sensorgram.
    """

    K: np.ndarray
    L: np.ndarray
    mass: sp.csr_matrix
    n_times: int
    n_conc: int

    def __post_init__(self):
        if self.K.shape[0] != self.n_times * self.n_conc:
            raise DimensionError("K row count does not match grid")
        n = self.K.shape[1]
        if self.L.shape != (n, n) or self.mass.shape != (n, n):
            raise DimensionError("L / mass shape does not match K")

    @property
    def n(self) -> int:
        return self.K.shape[1]

    def block(self, j: int) -> np.ndarray:
        return self.K[j * self.n_times:(j + 1) * self.n_times]

    @property
    def blocks(self) -> list:
        return [self.block(j) for j in range(self.n_conc)]

    @cached_property
    def LtL(self) -> np.ndarray:
        return self.L.T @ self.L

    @cached_property
    def compressed(self) -> "CompressedBlocks":
        return CompressedBlocks.from_design(self)

    def save(self, path) -> None:
        m = self.mass.tocoo()
        np.savez(path, K=self.K, L=self.L, mass_row=m.row, mass_col=m.col, mass_val=m.data,
                 dims=np.array([self.n_times, self.n_conc]))

    @classmethod
    def load(cls, path) -> "DesignSystem":
        with np.load(path) as z:
            n = z["K"].shape[1]
            mass = sp.csr_matrix((z["mass_val"], (z["mass_row"], z["mass_col"])), shape=(n, n))
            nt, nc = (int(v) for v in z["dims"])
            return cls(z["K"], z["L"], mass, nt, nc)


@dataclass
class CompressedBlocks:
    """Per-sensorgram reduced factors ``B_j`` with ``K_j'K_j = B_j'B_j``.

    ``B_j = S_j V_j'`` from a thin SVD of ``K_j`` keeping singular values above a relative
    floor, so Gram products cost ``rank`` rather than ``n_times`` rows.
    """

    B: list
    U: list

    @classmethod
    def from_design(cls, design: DesignSystem, rtol: float = 1e-13):
        Bs, Us = [], []
        for Kj in design.blocks:
            U, s, Vt = np.linalg.svd(Kj, full_matrices=False)
            keep = s > rtol * s[0] if s.size and s[0] > 0 else np.zeros(s.size, bool)
            Bs.append(s[keep, None] * Vt[keep])
            Us.append(U[:, keep])
        return cls(Bs, Us)

    @property
    def ranks(self) -> list:
        return [b.shape[0] for b in self.B]


def assemble_design(mesh: TriMesh, grid: InjectionGrid, kp: KineticsParams, quad_order: int = 7,
                    kernel_fn=None, regularizer: str = "laplacian", eps: float = 1e-6,
                    cache_dir=None) -> DesignSystem:
    """Assemble ``K``, ``L`` and the mass matrix on ``mesh``.

    ``kernel_fn(ka, kd, t, C)`` replaces the binding kernel (test hook); it receives
    coordinates in the domain's own scale.
    """
    if mesh.n_triangles == 0:
        raise DomainError("empty mesh")
    if mesh.domain is None:
        raise DomainError("mesh carries no domain")
    key = None
    if cache_dir is not None and kernel_fn is None:
        key = design_cache_key(mesh, grid, kp, quad_order, regularizer, eps)
        path = Path(cache_dir) / f"design-{key}.npz"
        if path.exists():
            return DesignSystem.load(path)
    domain = mesh.domain
    pts, B = _basis_scatter(mesh, quad_order)
    ka, kd = domain.split(pts[:, 0], pts[:, 1])
    nt, nc = grid.n_times, grid.n_conc
    K = np.empty((nt * nc, mesh.n_nodes))
    BT = B.T.tocsr()
    for j, C in enumerate(grid.concentrations):
        if kernel_fn is None:
            vals = kernel(ka[None, :], kd[None, :], grid.times[:, None], C, kp, log10=domain.log10)
        else:
            vals = np.broadcast_to(kernel_fn(ka[None, :], kd[None, :], grid.times[:, None], C),
                                   (nt, pts.shape[0]))
        K[j * nt:(j + 1) * nt] = (BT @ np.ascontiguousarray(vals).T).T
    design = DesignSystem(K, assemble_regularizer(mesh, regularizer, eps), assemble_mass(mesh), nt, nc)
    if key is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        design.save(Path(cache_dir) / f"design-{key}.npz")
    return design


def design_cache_key(mesh, grid, kp, quad_order, regularizer, eps) -> str:
    h = hashlib.sha256()
    for arr in (mesh.nodes, mesh.triangles, grid.times, grid.concentrations):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr((mesh.domain.to_dict(), kp.t0, kp.t_inj, kp.dt_delay, quad_order,
                   regularizer, eps)).encode())
    return h.hexdigest()[:16]


def assemble_regularizer(mesh: TriMesh, kind: str = "laplacian", eps: float = 1e-6) -> np.ndarray:
    """Prior operator ``L``: ``"identity"`` or the shifted graph Laplacian ``D - A + eps I``."""
    n = mesh.n_nodes
    if kind == "identity":
        return np.eye(n)
    if kind != "laplacian":
        raise DomainError(f"unknown regularizer {kind!r}")
    if not eps > 0:
        raise DomainError("the unshifted graph Laplacian is singular; eps must be > 0")
    A = mesh.adjacency.toarray()
    L = np.diag(A.sum(axis=1) + eps) - A
    try:
        sla.cholesky(L, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("regularizer is not full rank") from exc
    return L


def graph_laplacian(adjacency, eps: float) -> np.ndarray:
    """``D - A + eps I`` for a dense or sparse 0/1 adjacency matrix."""
    A = adjacency.toarray() if sp.issparse(adjacency) else np.asarray(adjacency, dtype=float)
    if not eps > 0:
        raise DomainError("eps must be > 0")
    return np.diag(A.sum(axis=1) + eps) - A


def assemble_mass(mesh: TriMesh) -> sp.csr_matrix:
    """Exact P1 mass matrix ``M[l, m] = int phi_l phi_m``."""
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    tri = mesh.triangles
    vals = mesh.areas[:, None, None] * local[None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))
