"""Accuracy metrics and peak extraction from rate-constant maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DimensionError, DomainError
from .kinetics import SensorgramSet
from .mesh import TriMesh
from .operators import QUADRATURE, assemble_mass

MAP_KINDS = ("mean", "lower", "upper", "exact-interpolant")


@dataclass
class RateConstantMap:
    """Nodal values of a piecewise-linear map on ``mesh``; ``kind`` labels what they are."""

    mesh: TriMesh
    values: np.ndarray
    kind: str = "mean"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise DimensionError(f"{self.values.size} values for {self.mesh.n_nodes} nodes")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("map values must be finite")
        if (self.kind in ("mean", "lower", "upper") or self.kind.startswith("moment")) \
                and np.any(self.values < 0):
            raise DomainError(f"{self.kind} map must be nonnegative")

    def __call__(self, points) -> np.ndarray:
        return self.mesh.interpolate(self.values, points)

    def integral(self) -> float:
        w = np.asarray(assemble_mass(self.mesh).sum(axis=0)).ravel()
        return float(w @ self.values)


@dataclass
class Interaction:
    peak: tuple
    value: float
    node: int
    nodes: list

    def to_dict(self) -> dict:
        return {"peak": [float(v) for v in self.peak], "value": float(self.value),
                "node": int(self.node), "region_size": len(self.nodes)}


@dataclass
class InteractionReport:
    nu: float
    threshold: float
    interactions: list = field(default_factory=list)
    axes: tuple = ("x", "y")
    contours: list = field(default_factory=list)

    @property
    def region_count(self) -> int:
        return len(self.interactions)

    @property
    def peaks(self) -> list:
        return [it.peak for it in self.interactions]

    def to_dict(self) -> dict:
        return {"nu": self.nu, "threshold": self.threshold, "axes": list(self.axes),
                "region_count": self.region_count,
                "interactions": [it.to_dict() for it in self.interactions]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _composite_rule(subdiv: int):
    """Degree-5 rule on a ``subdiv``-times uniformly split reference triangle."""
    lam, w = QUADRATURE[7]
    pts, wts = [], []
    h = 1.0 / subdiv
    for i in range(subdiv):
        for j in range(subdiv - i):
            # upright and (when it exists) inverted sub-triangle, in (xi, eta) coordinates
            corners = [np.array([[i, j], [i + 1, j], [i, j + 1]]) * h]
            if j < subdiv - i - 1:
                corners.append(np.array([[i + 1, j], [i + 1, j + 1], [i, j + 1]]) * h)
            for cor in corners:
                xy = lam @ cor
                pts.append(xy)
                wts.append(w * h * h)
    xy = np.vstack(pts)
    bary = np.column_stack([1.0 - xy.sum(1), xy[:, 0], xy[:, 1]])
    return bary, np.concatenate(wts)


def l2_norm_sq(mesh: TriMesh, fn, subdiv: int = 4) -> float:
    """``int fn(x, y)^2`` over the mesh by composite quadrature."""
    bary, w = _composite_rule(subdiv)
    p = mesh.nodes[mesh.triangles]
    pts = np.einsum("qk,mkd->mqd", bary, p)
    vals = fn(pts[..., 0], pts[..., 1])
    return float(np.sum(mesh.areas[:, None] * w[None, :] * vals ** 2))


def l2_relative_error(estimate: RateConstantMap, exact, subdiv: int = 4) -> float:
    """``|f - f_hat|_L2 / |f|_L2`` for an analytic ``exact(x, y)`` or another map.

    Maps on the same mesh are compared exactly through the mass matrix; an analytic
    reference is integrated with a composite degree-5 rule on each triangle.
    """
    mesh = estimate.mesh
    if isinstance(exact, RateConstantMap):
        if exact.mesh is not mesh and not exact.mesh == mesh:
            vals = exact(mesh.nodes)
        else:
            vals = exact.values
        M = assemble_mass(mesh)
        d = estimate.values - vals
        den = float(vals @ (M @ vals))
        if den == 0:
            raise DomainError("reference map has zero norm")
        return float(np.sqrt(d @ (M @ d) / den))
    bary, w = _composite_rule(subdiv)
    p = mesh.nodes[mesh.triangles]
    pts = np.einsum("qk,mkd->mqd", bary, p)
    f = exact(pts[..., 0], pts[..., 1])
    fh = np.einsum("qk,mk->mq", bary, estimate.values[mesh.triangles])
    aw = mesh.areas[:, None] * w[None, :]
    den = float(np.sum(aw * f * f))
    if den == 0:
        raise DomainError("reference map has zero norm")
    return float(np.sqrt(np.sum(aw * (f - fh) ** 2) / den))


def relative_wasserstein(samples_a, samples_b) -> np.ndarray:
    """Per-coordinate ``mean_i |qa_i - qb_i| / (qb_i + 1)`` over the 1%..100% quantiles.

    ``samples_b`` is the reference; arrays hold one draw per row.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets have different dimensions")
    if a.shape[0] < 100 or b.shape[0] < 100:
        raise DomainError("need at least 100 samples on each side")
    levels = np.arange(1, 101) / 100.0
    qa = np.quantile(a, levels, axis=0)
    qb = np.quantile(b, levels, axis=0)
    return np.mean(np.abs(qa - qb) / (qb + 1.0), axis=0)


def tcm(ratemap: RateConstantMap, nu: float = 5.0, contours: bool = False) -> InteractionReport:
    """Keep nodes within ``nu`` percent of the maximum and report one peak per component."""
    if not 0 < nu < 100:
        raise DomainError("nu must lie in (0, 100)")
    v = ratemap.values
    vmax = float(v.max())
    if not vmax > 0:
        raise DomainError("map has no positive values")
    thr = (1.0 - nu / 100.0) * vmax
    keep = np.flatnonzero(v >= thr)
    A = ratemap.mesh.adjacency[keep][:, keep]
    ncomp, labels = connected_components(A, directed=False)
    interactions = []
    for k in range(ncomp):
        members = keep[labels == k]
        top = int(members[np.argmax(v[members])])
        interactions.append(Interaction(tuple(ratemap.mesh.nodes[top]), float(v[top]), top,
                                        sorted(int(i) for i in members)))
    interactions.sort(key=lambda it: -it.value)
    axes = ("x", "y")
    dom = ratemap.mesh.domain
    if dom is not None:
        pre = "log10 " if dom.log10 else ""
        other = "kd" if dom.x_param == "ka" else "ka"
        axes = (pre + dom.x_param, pre + other)
    report = InteractionReport(nu, thr, interactions, axes)
    if contours:
        report.contours = contour_lines(ratemap.mesh, v, thr)
    return report


def contour_lines(mesh: TriMesh, values, level: float) -> list:
    """Polylines of the level set ``values == level`` of the P1 interpolant."""
    v = np.asarray(values, dtype=float)
    segs = []
    for tri in mesh.triangles.tolist():
        pts = []
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            va, vb = v[a] - level, v[b] - level
            if (va < 0) != (vb < 0):
                s = va / (va - vb)
                pts.append(((a, b) if a < b else (b, a), tuple(mesh.nodes[a] + s * (mesh.nodes[b] - mesh.nodes[a]))))
        if len(pts) == 2:
            segs.append(pts)
    # chain segments that share an edge crossing
    by_key: dict = {}
    for i, seg in enumerate(segs):
        for key, _ in seg:
            by_key.setdefault(key, []).append(i)
    used = [False] * len(segs)
    lines = []
    for i in range(len(segs)):
        if used[i]:
            continue
        used[i] = True
        line = [segs[i][0], segs[i][1]]
        for end in (1, 0):
            while True:
                key = line[-1][0] if end == 1 else line[0][0]
                nxt = [k for k in by_key[key] if not used[k]]
                if not nxt:
                    break
                used[nxt[0]] = True
                a, b = segs[nxt[0]]
                p = b if a[0] == key else a
                if end == 1:
                    line.append(p)
                else:
                    line.insert(0, p)
        lines.append([list(map(float, pt)) for _, pt in line])
    return lines


def moment_map(samples, p: float, mesh: TriMesh) -> RateConstantMap:
    """Raw ``p``-th moment of the draws at each node."""
    if not p > 0:
        raise DomainError("moment order must be > 0")
    s = np.asarray(samples, dtype=float)
    if np.any(s < 0):
        raise DomainError("samples must be nonnegative")
    vals = s.mean(axis=0) if p == 1 else np.mean(s ** p, axis=0)
    return RateConstantMap(mesh, vals, f"moment-{p:g}")


def peak_to_background(ratemap: RateConstantMap) -> float:
    """Maximum nodal value over the median nodal value."""
    med = float(np.median(ratemap.values))
    return np.inf if med == 0 else float(ratemap.values.max() / med)


def intensity_map(ratemap: RateConstantMap, raster: int = 128):
    """Map values on a ``raster`` x ``raster`` grid over the domain.

    Returns ``(xs, ys, Z)`` with ``Z[i, j]`` the value at ``(xs[j], ys[i])``.
    """
    if raster < 16:
        raise DomainError("raster must be at least 16 per axis")
    dom = ratemap.mesh.domain
    xs = np.linspace(*dom.x_range, raster)
    ys = np.linspace(*dom.y_range, raster)
    X, Y = np.meshgrid(xs, ys)
    Z = ratemap(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
    return xs, ys, Z


def data_overlap(observed: SensorgramSet, fitted: SensorgramSet) -> float:
    """``100 (1 - |observed - fitted| / |observed|)`` clipped to ``[0, 100]``."""
    if observed.values.shape != fitted.values.shape:
        raise DimensionError("sensorgram sets live on different grids")
    den = float(np.linalg.norm(observed.values))
    if den == 0:
        raise DomainError("observed data are identically zero")
    rel = float(np.linalg.norm(observed.values - fitted.values)) / den
    return float(np.clip(100.0 * (1.0 - rel), 0.0, 100.0))
