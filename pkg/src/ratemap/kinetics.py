"""Interaction kernel of the 1-to-1 binding model, forward responses and synthetic data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class KineticsParams:
    """Injection timing: start ``t0``, duration ``t_inj`` and detector delay ``dt_delay`` (s)."""

    t_inj: float
    t0: float = 0.0
    dt_delay: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.t_inj) and self.t_inj > 0):
            raise DomainError(f"t_inj must be > 0, got {self.t_inj}")
        if not (math.isfinite(self.dt_delay) and self.dt_delay >= 0):
            raise DomainError(f"dt_delay must be >= 0, got {self.dt_delay}")
        if not (math.isfinite(self.t0) and self.t0 >= 0):
            raise DomainError(f"t0 must be >= 0, got {self.t0}")


class RatePoint(NamedTuple):
    """A point of the rate-constant domain. With ``log10=True`` both fields are log10 values."""

    ka: float
    kd: float
    log10: bool = False

    def physical(self) -> tuple[float, float]:
        if self.log10:
            return 10.0 ** self.ka, 10.0 ** self.kd
        return self.ka, self.kd


@dataclass(frozen=True)
class Domain:
    """Rectangular rate-constant domain.

    ``x_param`` names which rate constant runs along the x axis (``"ka"`` or ``"kd"``);
    the other one runs along y.  With ``log10`` the coordinates are log10 rate constants.
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    x_param: str = "ka"
    log10: bool = False

    def __post_init__(self):
        if self.x_param not in ("ka", "kd"):
            raise DomainError(f"x_param must be 'ka' or 'kd', got {self.x_param!r}")
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        if not all(math.isfinite(v) for v in (x0, x1, y0, y1)) or x1 <= x0 or y1 <= y0:
            raise DomainError(f"degenerate rectangle {self.x_range} x {self.y_range}")

    @property
    def area(self) -> float:
        return (self.x_range[1] - self.x_range[0]) * (self.y_range[1] - self.y_range[0])

    def contains(self, x, y, tol: float = 1e-12):
        x = np.asarray(x)
        y = np.asarray(y)
        sx = tol * max(1.0, abs(self.x_range[0]), abs(self.x_range[1]))
        sy = tol * max(1.0, abs(self.y_range[0]), abs(self.y_range[1]))
        return ((x >= self.x_range[0] - sx) & (x <= self.x_range[1] + sx)
                & (y >= self.y_range[0] - sy) & (y <= self.y_range[1] + sy))

    def split(self, x, y):
        """Map mesh coordinates to ``(ka, kd)`` in the domain's own scale."""
        return (x, y) if self.x_param == "ka" else (y, x)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "x_param": self.x_param, "log10": self.log10}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), d.get("x_param", "ka"),
                   bool(d.get("log10", False)))


@dataclass(frozen=True)
class InjectionGrid:
    times: np.ndarray
    concentrations: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        c = np.asarray(self.concentrations, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise DimensionError("need at least two time points")
        if c.ndim != 1 or c.size < 1:
            raise DimensionError("need at least one concentration")
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise DomainError("times must be finite and strictly increasing")
        if not np.all(np.isfinite(c)) or np.any(c <= 0) or np.any(np.diff(c) <= 0):
            raise DomainError("concentrations must be positive and strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "concentrations", c)

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_conc(self) -> int:
        return self.concentrations.size

    @classmethod
    def uniform(cls, t_range, n_times, c_range, n_conc) -> "InjectionGrid":
        return cls(np.linspace(t_range[0], t_range[1], n_times),
                   np.linspace(c_range[0], c_range[1], n_conc))


@dataclass
class SensorgramSet:
    """Responses with one row per time point and one column per concentration."""

    grid: InjectionGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_times, self.grid.n_conc):
            raise DimensionError(
                f"values shape {self.values.shape} does not match grid "
                f"({self.grid.n_times}, {self.grid.n_conc})")

    @property
    def stacked(self) -> np.ndarray:
        """``[R^1; ...; R^{N_C}]``: sensorgram blocks one after another."""
        return self.values.ravel(order="F")

    @classmethod
    def from_stacked(cls, grid: InjectionGrid, stacked, meta=None) -> "SensorgramSet":
        stacked = np.asarray(stacked, dtype=float)
        if stacked.size != grid.n_times * grid.n_conc:
            raise DimensionError("stacked vector length does not match grid")
        return cls(grid, stacked.reshape((grid.n_times, grid.n_conc), order="F"), dict(meta or {}))


def kernel(ka, kd, t, C, kp: KineticsParams, log10: bool = False):
    """Vectorised kernel ``K(t, C; ka, kd)``; arguments broadcast against each other."""
    ka = np.asarray(ka, dtype=float)
    kd = np.asarray(kd, dtype=float)
    if log10:
        ka = 10.0 ** ka
        kd = 10.0 ** kd
    t = np.asarray(t, dtype=float)
    kaC = ka * C
    rate = kd + kaC
    eq = kaC / rate
    s = t - kp.t0
    t_end = kp.t0 + kp.t_inj + kp.dt_delay
    during = eq * -np.expm1(-rate * s)
    after = eq * -np.expm1(-rate * kp.t_inj) * np.exp(-kd * (s - kp.t_inj))
    out = np.where(t > t_end, after, during)
    return np.where(t <= kp.t0 + kp.dt_delay, 0.0, out)


def kernel_value(p: RatePoint, t: float, C: float, kp: KineticsParams) -> float:
    """Response fraction of a unit-capacity site with rates ``p`` at time ``t``."""
    vals = (p.ka, p.kd, t, C)
    if not all(math.isfinite(v) for v in vals):
        raise DomainError(f"non-finite kernel input {vals}")
    if C <= 0:
        raise DomainError(f"concentration must be > 0, got {C}")
    ka, kd = p.physical()
    # kd = 0 is admitted on linear domains whose lower kd edge is 0
    if ka <= 0 or kd < 0:
        raise DomainError(f"rate constants must be positive, got ka={ka}, kd={kd}")
    return float(kernel(ka, kd, t, C, kp))


def forward_response(ratemap, grid: InjectionGrid, kp: KineticsParams, design=None) -> SensorgramSet:
    """Sensorgrams ``K c`` produced by a piecewise-linear rate-constant map."""
    from .operators import assemble_design

    if design is None:
        design = assemble_design(ratemap.mesh, grid, kp)
    elif design.n_times != grid.n_times or design.n_conc != grid.n_conc:
        raise DimensionError("design matrix was assembled for a different grid")
    c = np.asarray(ratemap.values, dtype=float)
    if c.shape != (design.K.shape[1],):
        raise DimensionError(f"map has {c.size} values, design has {design.K.shape[1]} columns")
    return SensorgramSet.from_stacked(grid, design.K @ c)


def _gauss_legendre_grid(rng_, cells: int, order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(rng_[0], rng_[1], cells + 1)
    h = np.diff(edges)
    pts = (edges[:-1, None] + 0.5 * h[:, None] * (x[None, :] + 1.0)).ravel()
    wts = (0.5 * h[:, None] * w[None, :]).ravel()
    return pts, wts


def exact_response(exact_map_fn: Callable, domain: Domain, grid: InjectionGrid,
                   kp: KineticsParams, cells: int = 48, order: int = 4) -> np.ndarray:
    """Noise-free sensorgrams of an analytic map by composite tensor Gauss-Legendre quadrature.

    The quadrature lattice is independent of any solver triangulation.
    """
    xs, wx = _gauss_legendre_grid(domain.x_range, cells, order)
    ys, wy = _gauss_legendre_grid(domain.y_range, cells, order)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    W = np.outer(wx, wy).ravel()
    X = X.ravel()
    Y = Y.ravel()
    f = np.asarray(exact_map_fn(X, Y), dtype=float) * W
    keep = f != 0
    ka, kd = domain.split(X[keep], Y[keep])
    f = f[keep]
    out = np.empty((grid.n_times, grid.n_conc))
    for j, C in enumerate(grid.concentrations):
        Kt = kernel(ka[None, :], kd[None, :], grid.times[:, None], C, kp, log10=domain.log10)
        out[:, j] = Kt @ f
    return out


def generate_synthetic(exact_map_fn: Callable, grid: InjectionGrid, kp: KineticsParams,
                       delta: float, seed, domain: Domain, per_point_noise: bool = False,
                       cells: int = 48, order: int = 4) -> SensorgramSet:
    """Noisy sensorgrams ``R + max(0, max_p R[:, q] * delta * w_q)`` with ``w_q ~ N(0, q)``.

    ``exact_map_fn(x, y)`` takes mesh coordinates.  The added noise is one nonnegative
    constant per sensorgram; ``per_point_noise`` draws an independent ``w`` for every
    time point instead.
    """
    if not (delta >= 0 and math.isfinite(delta)):
        raise DomainError(f"noise level must be >= 0, got {delta}")
    clean = exact_response(exact_map_fn, domain, grid, kp, cells=cells, order=order)
    rng = np.random.default_rng(seed)
    q = np.arange(1, grid.n_conc + 1)
    peak = clean.max(axis=0)
    if per_point_noise:
        omega = rng.standard_normal(clean.shape) * np.sqrt(q)[None, :]
    else:
        omega = rng.standard_normal(grid.n_conc) * np.sqrt(q)
    noisy = clean + np.maximum(0.0, peak * delta * omega)
    meta = {"delta": float(delta), "seed": seed, "per_point_noise": bool(per_point_noise)}
    return SensorgramSet(grid, noisy, meta)
