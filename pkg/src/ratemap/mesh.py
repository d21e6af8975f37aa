"""Conforming triangulations, the P1 hat basis and longest-edge refinement."""

from __future__ import annotations

import math
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .kinetics import Domain


class TriMesh:
    """Immutable triangulation.

    Parameters
    ----------
    nodes : (n, 2) array of coordinates.
    triangles : (M, 3) array of node indices in counter-clockwise order.
    domain : the rectangle the mesh covers, if known.
    """

    def __init__(self, nodes, triangles, domain: Domain | None = None):
        nodes = np.array(nodes, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        nodes.setflags(write=False)
        triangles.setflags(write=False)
        self.nodes = nodes
        self.triangles = triangles
        self.domain = domain

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def __repr__(self):
        return f"TriMesh(n_nodes={self.n_nodes}, n_triangles={self.n_triangles})"

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.triangles, other.triangles))

    __hash__ = None

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted node pairs, shape (E, 2)."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_triangles(self) -> dict:
        """Map from sorted node pair to the list of incident triangle indices."""
        out: dict = {}
        for t, (a, b, c) in enumerate(self.triangles.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                out.setdefault((u, v) if u < v else (v, u), []).append(t)
        return out

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 node adjacency of the edge graph."""
        e = self.edges
        n = self.n_nodes
        data = np.ones(2 * len(e))
        A = sp.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
        return A.tocsr()

    @cached_property
    def node_patches(self) -> list:
        patches = [[] for _ in range(self.n_nodes)]
        for t, tri in enumerate(self.triangles.tolist()):
            for v in tri:
                patches[v].append(t)
        return patches

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.hypot(*(self.nodes[e[:, 1]] - self.nodes[e[:, 0]]).T)

    def min_angles(self) -> np.ndarray:
        """Smallest interior angle of each triangle, in degrees."""
        p = self.nodes[self.triangles]
        angles = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            cosang = (u * v).sum(1) / (np.hypot(*u.T) * np.hypot(*v.T))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return np.min(angles, axis=0)

    def check(self, min_angle: float | None = None) -> None:
        """Raise ``AssertionError`` unless the mesh is a valid conforming triangulation."""
        assert np.all(self.signed_areas > 0), "non-positive triangle area"
        counts = np.array([len(v) for v in self.edge_triangles.values()])
        assert np.all((counts == 1) | (counts == 2)), "edge shared by more than two triangles"
        # hanging nodes: a node lying in the interior of some edge
        boundary = [k for k, v in self.edge_triangles.items() if len(v) == 1]
        if self.domain is not None:
            for u, v in boundary:
                (x1, y1), (x2, y2) = self.nodes[u], self.nodes[v]
                on_x = math.isclose(x1, x2) and any(math.isclose(x1, b) for b in self.domain.x_range)
                on_y = math.isclose(y1, y2) and any(math.isclose(y1, b) for b in self.domain.y_range)
                assert on_x or on_y, f"boundary edge {(u, v)} is not on the domain boundary"
            assert math.isclose(self.areas.sum(), self.domain.area, rel_tol=1e-10), "area mismatch"
        if min_angle is not None:
            assert self.min_angles().min() >= min_angle, "minimum angle below floor"

    def is_conforming(self) -> bool:
        try:
            self.check()
        except AssertionError:
            return False
        return True

    def locate(self, points) -> np.ndarray:
        """Index of a triangle containing each point, -1 outside the mesh."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        finder = self._triangulation.get_trifinder()
        idx = np.asarray(finder(pts[:, 0], pts[:, 1]), dtype=np.int64)
        # TrapezoidMapTriFinder can miss points exactly on the outer boundary
        miss = np.flatnonzero(idx < 0)
        for k in miss:
            b = self.barycentric(np.arange(self.n_triangles), np.repeat(pts[k:k + 1], self.n_triangles, 0))
            ok = np.flatnonzero(b.min(axis=1) >= -1e-10)
            if ok.size:
                idx[k] = ok[0]
        return idx

    @cached_property
    def _triangulation(self):
        import matplotlib.tri as mtri

        return mtri.Triangulation(self.nodes[:, 0], self.nodes[:, 1], self.triangles)

    def barycentric(self, tri_idx, points) -> np.ndarray:
        """Barycentric coordinates of ``points`` with respect to triangles ``tri_idx``."""
        p = self.nodes[self.triangles[tri_idx]]
        pts = np.asarray(points, dtype=float)
        a, b, c = p[..., 0, :], p[..., 1, :], p[..., 2, :]
        det = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
        l1 = ((pts[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (pts[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])) / det
        l2 = ((b[..., 0] - a[..., 0]) * (pts[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (pts[..., 0] - a[..., 0])) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)

    def interpolate(self, values, points) -> np.ndarray:
        """Evaluate the piecewise-linear interpolant of nodal ``values`` at ``points``."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        idx = self.locate(pts)
        if np.any(idx < 0):
            raise DomainError("point outside the mesh")
        lam = self.barycentric(idx, pts)
        v = np.asarray(values, dtype=float)[self.triangles[idx]]
        return (lam * v).sum(axis=1)


def uniform_initial_mesh(domain: Domain, nx: int, ny: int) -> TriMesh:
    """Structured ``nx`` x ``ny`` node lattice, every cell cut along the same diagonal."""
    if nx < 2 or ny < 2:
        raise DomainError("need at least 2 nodes per axis")
    xs = np.linspace(*domain.x_range, nx)
    ys = np.linspace(*domain.y_range, ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx + 1, a + nx
            tris.append((a, b, c))
            tris.append((a, c, d))
    return TriMesh(nodes, tris, domain)


class _Refiner:
    """Mutable working copy used by :func:`refine`."""

    def __init__(self, mesh: TriMesh):
        self.nodes = [tuple(p) for p in mesh.nodes.tolist()]
        self.tris = [list(t) for t in mesh.triangles.tolist()]
        self.alive = [True] * len(self.tris)
        self.edge_tris: dict = {}
        for t, tri in enumerate(self.tris):
            self._attach(t, tri)
        self.midpoints: dict = {}
        self.n_alive = len(self.tris)

    @staticmethod
    def _key(u, v):
        return (u, v) if u < v else (v, u)

    def _attach(self, t, tri):
        for i in range(3):
            self.edge_tris.setdefault(self._key(tri[i], tri[(i + 1) % 3]), set()).add(t)

    def _detach(self, t, tri):
        for i in range(3):
            self.edge_tris[self._key(tri[i], tri[(i + 1) % 3])].discard(t)

    def _length(self, key):
        (x1, y1), (x2, y2) = self.nodes[key[0]], self.nodes[key[1]]
        return math.hypot(x2 - x1, y2 - y1)

    def longest(self, t):
        """Local index ``i`` such that edge ``(tri[i], tri[i+1])`` is the longest."""
        tri = self.tris[t]
        best = None
        for i in range(3):
            key = self._key(tri[i], tri[(i + 1) % 3])
            # ties broken by the edge key so neighbours always agree
            cand = (self._length(key), key)
            if best is None or cand[0] > best[0][0] or (cand[0] == best[0][0] and cand[1] < best[0][1]):
                best = (cand, i)
        return best[1]

    def neighbour(self, t, i):
        tri = self.tris[t]
        key = self._key(tri[i], tri[(i + 1) % 3])
        others = [s for s in self.edge_tris[key] if s != t]
        return (others[0] if others else None), key

    def _midpoint(self, key):
        m = self.midpoints.get(key)
        if m is None:
            (x1, y1), (x2, y2) = self.nodes[key[0]], self.nodes[key[1]]
            self.nodes.append((0.5 * (x1 + x2), 0.5 * (y1 + y2)))
            m = len(self.nodes) - 1
            self.midpoints[key] = m
        return m

    def _split(self, t, i, m):
        tri = self.tris[t]
        p, q, r = tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3]
        self._detach(t, tri)
        self.alive[t] = False
        for child in ([p, m, r], [m, q, r]):
            self.tris.append(child)
            self.alive.append(True)
            self._attach(len(self.tris) - 1, child)
        self.n_alive += 1

    def bisect(self, t):
        """Bisect ``t`` along its longest edge, refining the longest-edge path first."""
        stack = [t]
        while stack:
            s = stack[-1]
            if not self.alive[s]:
                stack.pop()
                continue
            i = self.longest(s)
            nb, key = self.neighbour(s, i)
            if nb is None:
                self._split(s, i, self._midpoint(key))
                stack.pop()
                continue
            j = self.longest(nb)
            nb_key = self._key(self.tris[nb][j], self.tris[nb][(j + 1) % 3])
            if nb_key == key:
                m = self._midpoint(key)
                self._split(s, i, m)
                self._split(nb, j, m)
                stack.pop()
            else:
                stack.append(nb)

    def result(self, domain) -> TriMesh:
        tris = [tri for tri, a in zip(self.tris, self.alive) if a]
        return TriMesh(np.array(self.nodes), np.array(tris, dtype=np.int64), domain)


def refine(mesh: TriMesh, marked, max_triangles: int | None = None) -> TriMesh:
    """Longest-edge bisection of the ``marked`` triangles with conformity closure.

    Marked triangles are processed in the given order; with ``max_triangles`` the
    procedure stops once the triangle count reaches that budget.  Existing nodes keep
    their indices, new nodes are appended.
    """
    marked = [int(t) for t in np.atleast_1d(np.asarray(marked, dtype=np.int64))]
    if not marked:
        return mesh
    if min(marked) < 0 or max(marked) >= mesh.n_triangles:
        raise DomainError("marked triangle index out of range")
    work = _Refiner(mesh)
    for t in marked:
        if max_triangles is not None and work.n_alive >= max_triangles:
            break
        if work.alive[t]:
            work.bisect(t)
    return work.result(mesh.domain)


def refine_uniform(mesh: TriMesh, times: int = 1) -> TriMesh:
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.n_triangles))
    return mesh


def basis_eval(mesh: TriMesh, l: int, p) -> float:
    """Value of the hat function of node ``l`` at point ``p``."""
    x, y = float(p[0]), float(p[1])
    if mesh.domain is not None and not bool(mesh.domain.contains(x, y)):
        raise DomainError(f"point {p} outside the domain")
    patch = mesh.node_patches[l]
    if not patch:
        return 0.0
    lam = mesh.barycentric(np.asarray(patch), np.tile([x, y], (len(patch), 1)))
    for k, t in enumerate(patch):
        if lam[k].min() >= -1e-12:
            local = int(np.flatnonzero(mesh.triangles[t] == l)[0])
            return float(min(1.0, max(0.0, lam[k, local])))
    return 0.0


def write_mesh(mesh: TriMesh, path) -> None:
    """Plain text: ``v x y`` lines then ``t i j k`` lines."""
    lines = [f"v {x:.17g} {y:.17g}" for x, y in mesh.nodes.tolist()]
    lines += [f"t {i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path, domain: Domain | None = None) -> TriMesh:
    nodes, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            nodes.append((float(parts[1]), float(parts[2])))
        elif parts[0] == "t":
            tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
        else:
            raise ValueError(f"unrecognised mesh line {line!r}")
    return TriMesh(nodes, tris, domain)
