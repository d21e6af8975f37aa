"""Adaptive outer loop: solve on a mesh, mark triangles where the maps vary most, refine."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError
from .kinetics import KineticsParams, SensorgramSet
from .mesh import TriMesh, refine, write_mesh
from .operators import assemble_design
from .vb import HyperPriors, VBSettings, VBState, init_state, run_vb, write_delta_history

log = logging.getLogger(__name__)


@dataclass
class AvbaConfig:
    """Outer-loop controls.

    ``eps`` is the inner VB tolerance; the outer loop stops once the mean map changes by
    less than ``outer_tol`` (relative L2 after prolongation) or after ``max_outer`` solves.
    ``growth`` caps each refinement at ``(1 + growth)`` times the current triangle count.
    """

    tau: float = 0.5
    eps: float = 1e-4
    max_outer: int = 6
    sample_count: int = 2000
    growth: float = 1.0
    outer_tol: float = 1e-2
    max_vb_iter: int = 200
    max_nodes: int | None = None
    lambda0: float = 1e-5
    kappa0: float = 1e-4
    seed: int = 0
    burn_in: int = 200
    quad_order: int = 7
    regularizer: str = "laplacian"
    reg_eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise DomainError("tau must lie in (0, 1)")
        if not self.eps > 0 or not self.outer_tol > 0:
            raise DomainError("tolerances must be > 0")
        if self.max_outer < 1:
            raise DomainError("max_outer must be >= 1")
        if self.sample_count < 1 or not self.growth > 0:
            raise DomainError("sample_count and growth must be positive")

    def vb_settings(self) -> VBSettings:
        return VBSettings(sample_count=self.sample_count, burn_in=self.burn_in, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OuterStep:
    n_nodes: int
    n_triangles: int
    vb_iterations: int
    converged: bool
    delta1: float
    delta2: float
    map_change: float
    residual: float
    marked: int
    seconds: float


@dataclass
class AvbaResult:
    mesh: TriMesh
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    state: VBState
    design: object
    steps: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def mesh_sizes(self) -> list:
        return [(s.n_nodes, s.n_triangles) for s in self.steps]

    @property
    def samples(self):
        return self.state.posterior.samples


def triangle_variation(values, tri) -> np.ndarray:
    """``(1/3) sum_{i != j} |v_i - v_j|`` over ordered vertex pairs, per triangle.

    ``tri`` is a single index triple or an ``(M, 3)`` array.
    """
    v = np.asarray(values, dtype=float)[np.asarray(tri)]
    d = np.abs(v[..., 0] - v[..., 1]) + np.abs(v[..., 1] - v[..., 2]) + np.abs(v[..., 2] - v[..., 0])
    return 2.0 * d / 3.0


def refinement_indicator(mean, lower, upper, mesh: TriMesh) -> np.ndarray:
    for a in (mean, lower, upper):
        if np.shape(a) != (mesh.n_nodes,):
            raise DomainError("maps must have one value per mesh node")
    tris = mesh.triangles
    return np.maximum.reduce([triangle_variation(mean, tris), triangle_variation(lower, tris),
                              triangle_variation(upper, tris)])


def mark(V, tau: float) -> np.ndarray:
    """Triangles with ``V >= tau * max V``, largest indicator first."""
    if not 0 < tau < 1:
        raise DomainError("tau must lie in (0, 1)")
    V = np.asarray(V, dtype=float)
    vmax = float(V.max()) if V.size else 0.0
    if vmax <= 0:
        return np.empty(0, dtype=np.int64)
    idx = np.flatnonzero(V >= tau * vmax)
    return idx[np.argsort(-V[idx], kind="stable")]


def prolong(old: TriMesh, values, new: TriMesh) -> np.ndarray:
    """Piecewise-linear interpolation of nodal ``values`` onto ``new`` nodes.

    Nodes shared with ``old`` (the leading block after refinement) are copied exactly.
    """
    values = np.asarray(values, dtype=float)
    out = np.empty(new.n_nodes)
    k = old.n_nodes
    if new.n_nodes >= k and np.array_equal(new.nodes[:k], old.nodes):
        out[:k] = values
        if new.n_nodes > k:
            out[k:] = old.interpolate(values, new.nodes[k:])
        return out
    return old.interpolate(values, new.nodes)


def _write_iteration(run_dir: Path, k: int, mesh, state, V):
    d = run_dir / f"iter_{k:02d}"
    d.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, d / "mesh.txt")
    post = state.posterior
    rows = ["node,x,y,mean,lower,upper"]
    for i, ((x, y), a, b, c) in enumerate(zip(mesh.nodes.tolist(), post.mean, post.lower, post.upper)):
        rows.append(f"{i},{x:.17g},{y:.17g},{a:.17g},{b:.17g},{c:.17g}")
    (d / "maps.csv").write_text("\n".join(rows) + "\n")
    write_delta_history(state, d / "delta.csv")
    if V is not None:
        (d / "indicator.csv").write_text(
            "triangle,indicator\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(V)))


def run_avba(mesh: TriMesh, data: SensorgramSet, kp: KineticsParams, hp: HyperPriors | None = None,
             cfg: AvbaConfig | None = None, run_dir=None, callback=None) -> AvbaResult:
    """Adaptive variational Bayes on an initial ``mesh``.

    Each pass runs VB to tolerance, summarises the samples, marks by the refinement
    indicator and bisects.  The next pass starts from the prolonged posterior center.
    """
    cfg = cfg or AvbaConfig()
    hp = hp or HyperPriors.uniform(data.grid.n_conc)
    settings = cfg.vb_settings()
    run_dir = Path(run_dir) if run_dir is not None else None
    R = data.stacked
    steps: list[OuterStep] = []
    center = None
    prev_mean = None
    prev_mesh = None
    stop = "max_outer"
    for k in range(1, cfg.max_outer + 1):
        t0 = time.perf_counter()
        design = assemble_design(mesh, data.grid, kp, cfg.quad_order,
                                 regularizer=cfg.regularizer, eps=cfg.reg_eps)
        init = init_state(design, data, hp, cfg.lambda0, cfg.kappa0, center=center)
        state = run_vb(design, data, hp, init=init, tol=cfg.eps, max_iter=cfg.max_vb_iter,
                       settings=settings)
        if not state.converged:
            warnings.warn(f"VB did not converge in {cfg.max_vb_iter} iterations on pass {k}")
        post = state.posterior
        mean = post.mean
        change = np.inf
        if prev_mean is not None:
            ref = prolong(prev_mesh, prev_mean, mesh)
            den = float(np.linalg.norm(mean))
            change = float(np.linalg.norm(mean - ref) / den) if den > 0 else 0.0
        resid = float(np.linalg.norm(R - design.K @ mean))
        V = refinement_indicator(mean, post.lower, post.upper, mesh)
        step = OuterStep(mesh.n_nodes, mesh.n_triangles, state.iteration, state.converged,
                         state.delta1[-1] if state.delta1 else 0.0,
                         state.delta2[-1] if state.delta2 else 0.0, change, resid, 0, 0.0)
        steps.append(step)
        if run_dir is not None:
            _write_iteration(run_dir, k, mesh, state, V)
        log.info("avba pass %d: n=%d vb_iter=%d change=%.3e", k, mesh.n_nodes, state.iteration, change)
        result = AvbaResult(mesh, mean, post.lower, post.upper, state, design, steps)
        if change <= cfg.outer_tol:
            stop = "converged"
            step.seconds = time.perf_counter() - t0
            break
        if k == cfg.max_outer:
            step.seconds = time.perf_counter() - t0
            break
        if cfg.max_nodes is not None and mesh.n_nodes >= cfg.max_nodes:
            stop = "max_nodes"
            step.seconds = time.perf_counter() - t0
            break
        marked = mark(V, cfg.tau)
        step.marked = int(marked.size)
        budget = int(np.ceil((1.0 + cfg.growth) * mesh.n_triangles))
        new_mesh = refine(mesh, marked, max_triangles=budget)
        step.seconds = time.perf_counter() - t0
        if callback is not None:
            callback(result)
        if new_mesh.n_nodes == mesh.n_nodes:
            warnings.warn("refinement added no nodes; stopping")
            stop = "no_refinement"
            break
        center = prolong(mesh, post.center, new_mesh)
        prev_mean, prev_mesh, mesh = mean, mesh, new_mesh
    result.stop_reason = stop
    return result
