"""Mean-field variational Bayes for ``R = K c + e`` with a positive-orthant Gaussian factor.

The factors are ``q(c) = N+(c_k, S_k)``, ``q(sigma_j^2) = IG`` per sensorgram and
``q(sigma_c^2) = IG`` for the prior scale.  Expectations under the truncated factor are
sample averages over draws from a coordinatewise Gibbs sampler that reuses one random
stream per run, which keeps the fixed-point map deterministic.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.special import log_ndtr, ndtr

from . import _tmvn
from .errors import DimensionError, DivergenceError, DomainError, NumericalError, TruncationError
from .kinetics import SensorgramSet
from .operators import DesignSystem

log = logging.getLogger(__name__)


@dataclass
class HyperPriors:
    """Inverse-gamma shapes/scales: ``alpha_j, beta_j`` per sensorgram and ``alpha_c, beta_c``."""

    alpha_j: np.ndarray
    beta_j: np.ndarray
    alpha_c: float = 1.0
    beta_c: float = 1.0

    def __post_init__(self):
        self.alpha_j = np.atleast_1d(np.asarray(self.alpha_j, dtype=float))
        self.beta_j = np.atleast_1d(np.asarray(self.beta_j, dtype=float))
        if self.alpha_j.shape != self.beta_j.shape:
            raise DimensionError("alpha_j and beta_j differ in length")
        vals = np.r_[self.alpha_j, self.beta_j, self.alpha_c, self.beta_c]
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise DomainError("all inverse-gamma hyperparameters must be > 0")

    @classmethod
    def uniform(cls, n_conc: int, alpha=1.0, beta=1.0, alpha_c=1.0, beta_c=1.0) -> "HyperPriors":
        return cls(np.full(n_conc, float(alpha)), np.full(n_conc, float(beta)), alpha_c, beta_c)


@dataclass(frozen=True)
class InverseGamma:
    shape: float
    scale: float

    @property
    def mean_inverse(self) -> float:
        """``E[1/x]`` for ``x ~ IG(shape, scale)``."""
        return self.shape / self.scale


@dataclass
class TruncatedNormalPosterior:
    """``N+(center, cov)`` with stored draws.

    ``center`` and ``cov`` are the parameters of the untruncated Gaussian; ``samples`` has
    one draw per row.  ``hn0`` is an estimate of the Gaussian mass outside the orthant.
    """

    center: np.ndarray
    cov: np.ndarray
    samples: np.ndarray | None = None
    hn0: float | None = None
    precision: np.ndarray | None = field(default=None, repr=False)

    @cached_property
    def mean(self) -> np.ndarray:
        if self.samples is None:
            return np.maximum(self.center, 0.0)
        return self.samples.mean(axis=0)

    @cached_property
    def lower(self) -> np.ndarray:
        return self._quantile(2.5)

    @cached_property
    def upper(self) -> np.ndarray:
        return self._quantile(97.5)

    def _quantile(self, q):
        if self.samples is None:
            return self.mean.copy()
        return np.percentile(self.samples, q, axis=0)


@dataclass
class VBSettings:
    sample_count: int = 2000
    burn_in: int = 200
    thin: int = 1
    seed: int = 0
    hn0_draws: int = 10_000
    fast_path_hn0: float = 1e-6
    min_mass: float | None = None
    divergence_factor: float = 10.0
    divergence_window: int = 5
    divergence_floor: float = 0.5


@dataclass
class VBState:
    posterior: TruncatedNormalPosterior
    sigma_j_shape: np.ndarray
    sigma_j_scale: np.ndarray
    sigma_c: InverseGamma
    iteration: int = 0
    delta1: list = field(default_factory=list)
    delta2: list = field(default_factory=list)
    converged: bool = False

    def sigma_j(self, j: int) -> InverseGamma:
        return InverseGamma(float(self.sigma_j_shape[j]), float(self.sigma_j_scale[j]))

    @property
    def noise_precision(self) -> np.ndarray:
        """``E[1/sigma_j^2]`` per sensorgram."""
        return self.sigma_j_shape / self.sigma_j_scale


def _check(design: DesignSystem, data: SensorgramSet, hp: HyperPriors | None = None):
    if data.values.shape != (design.n_times, design.n_conc):
        raise DimensionError("data grid does not match the design system")
    if hp is not None and hp.alpha_j.size != design.n_conc:
        raise DimensionError(f"need {design.n_conc} sensorgram hyperpriors, got {hp.alpha_j.size}")


def _projected_data(design: DesignSystem, data: SensorgramSet):
    """``z_j = U_j'R_j`` and the out-of-range residual ``|R_j - U_j U_j'R_j|^2``."""
    cb = design.compressed
    z, rest = [], np.empty(design.n_conc)
    for j, U in enumerate(cb.U):
        Rj = data.values[:, j]
        zj = U.T @ Rj
        z.append(zj)
        rest[j] = float(np.sum((Rj - U @ zj) ** 2))
    return z, rest


def expected_residuals(post: TruncatedNormalPosterior, design: DesignSystem,
                       data: SensorgramSet) -> np.ndarray:
    """``E_q |R_j - K_j c|^2`` for every sensorgram, averaged over the stored draws.

    Without draws the Gaussian identity ``|R_j - K_j m|^2 + tr(K_j S K_j')`` is used.
    """
    cb = design.compressed
    z, rest = _projected_data(design, data)
    out = rest.copy()
    for j, B in enumerate(cb.B):
        if post.samples is None:
            r = z[j] - B @ post.center
            out[j] += r @ r + float(np.sum((B @ post.cov) * B))
        else:
            r = z[j][None, :] - post.samples @ B.T
            out[j] += float(np.mean(np.sum(r * r, axis=1)))
    return out


def expected_penalty(post: TruncatedNormalPosterior, design: DesignSystem) -> float:
    """``E_q |L c|^2``."""
    if post.samples is None:
        Lc = design.L @ post.center
        return float(Lc @ Lc + np.sum(design.LtL * post.cov))
    Ls = post.samples @ design.L.T
    return float(np.mean(np.sum(Ls * Ls, axis=1)))


def orthant_mass_bounds(center, cov_diag):
    """Bounds on the untruncated Gaussian's orthant probability.

    Returns ``(union_bound_on_outside_mass, upper_bound_on_inside_mass)``.
    """
    z = np.asarray(center) / np.sqrt(np.asarray(cov_diag))
    outside = float(np.sum(ndtr(-z)))
    inside = float(np.exp(np.min(log_ndtr(z))))
    return outside, inside


def estimate_hn0(center, cov, draws: int = 10_000, seed: int = 0, chol=None) -> float:
    """Mass of ``N(center, cov)`` outside the nonnegative orthant.

    Estimated from the acceptance rate of untruncated draws, smoothed by half a count so
    the estimate stays below 1.  When the orthant mass is provably negligible relative
    to the draw budget, the coordinatewise upper bound is used instead of sampling.
    """
    center = np.asarray(center, dtype=float)
    cov = np.asarray(cov, dtype=float)
    outside, inside = orthant_mass_bounds(center, np.diag(cov))
    if outside < 1.0 / draws:
        return outside
    if inside * draws < 1e-3:
        return 1.0 - inside
    if chol is None:
        chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    accepted = 0
    done = 0
    while done < draws:
        m = min(1000, draws - done)
        x = center[None, :] + rng.standard_normal((m, center.size)) @ chol.T
        accepted += int(np.sum(np.all(x >= 0, axis=1)))
        done += m
    return 1.0 - (accepted + 0.5) / (draws + 1.0)


def sample_truncated_normal(center, cov, count: int, seed: int = 0, burn_in: int = 200,
                            thin: int = 1, precision=None, init=None,
                            min_mass: float | None = 1e-12) -> np.ndarray:
    """Draw ``count`` samples of ``N(center, cov)`` restricted to ``x >= 0``.

    Coordinatewise Gibbs sampling after ``burn_in`` sweeps; ``precision`` may be given
    instead of recomputing ``inv(cov)``.  Raises :class:`TruncationError` when the
    orthant provably carries less than ``min_mass`` of the Gaussian.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if count < 1:
        raise DomainError("count must be >= 1")
    if precision is None:
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (center.size, center.size):
            raise DimensionError("covariance shape does not match center")
        try:
            cf = sla.cho_factor(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc
        precision = sla.cho_solve(cf, np.eye(center.size))
        diag = np.diag(cov)
    else:
        precision = np.asarray(precision, dtype=float)
        diag = np.diag(cov) if cov is not None else 1.0 / np.diag(precision)
    if min_mass is not None:
        _, inside = orthant_mass_bounds(center, diag)
        if inside < min_mass:
            raise TruncationError(
                f"orthant mass below {min_mass:g} (bound {inside:.3g}); the Gaussian center is "
                "far outside the nonnegative orthant - check data scaling and hyperpriors")
    precision = np.ascontiguousarray(0.5 * (precision + precision.T))
    b = precision @ center
    x0 = np.maximum(center, 0.0) if init is None else np.asarray(init, dtype=float)
    return _tmvn.gibbs_tmvn(precision, b, np.ascontiguousarray(x0), int(count), int(burn_in),
                            int(thin), int(seed))


def _factor(Q: np.ndarray):
    try:
        return sla.cho_factor(Q, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(Q) / Q.shape[0]
        warnings.warn(f"system matrix not positive definite; adding jitter {jitter:.3g}",
                      RuntimeWarning, stacklevel=3)
        try:
            return sla.cho_factor(Q + jitter * np.eye(Q.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(Q)
            raise NumericalError(f"system matrix is not SPD (condition number {cond:.3g})") from exc


def _gram(design: DesignSystem, data: SensorgramSet, w: np.ndarray):
    """``K' W K`` and ``K' W R`` for blockwise constant weights ``w``."""
    cb = design.compressed
    z, _ = _projected_data(design, data)
    n = design.n
    KtWK = np.zeros((n, n))
    KtWR = np.zeros(n)
    for j, B in enumerate(cb.B):
        if B.shape[0]:
            KtWK += w[j] * (B.T @ B)
            KtWR += w[j] * (B.T @ z[j])
    return KtWK, KtWR


def init_state(design: DesignSystem, data: SensorgramSet, hp: HyperPriors, lambda0: float = 1e-5,
               kappa0: float = 1e-4, center=None) -> VBState:
    """Gaussian starting factor ``N((K'K + lambda0 I)^{-1} K'R, kappa0 I)``.

    ``center`` overrides the ridge mean (warm start).  The hyperfactors are then set by one
    update from this Gaussian, so the first ``c`` update already reflects the start.
    """
    _check(design, data, hp)
    if not lambda0 > 0 or not kappa0 > 0:
        raise DomainError("lambda0 and kappa0 must be > 0")
    n = design.n
    if center is None:
        KtK, KtR = _gram(design, data, np.ones(design.n_conc))
        center = sla.cho_solve(_factor(KtK + lambda0 * np.eye(n)), KtR)
    center = np.asarray(center, dtype=float)
    if center.shape != (n,):
        raise DimensionError("warm-start center has the wrong length")
    post = TruncatedNormalPosterior(center, kappa0 * np.eye(n))
    shape_j = hp.alpha_j + 0.5 * design.n_times
    scale_j = hp.beta_j + 0.5 * expected_residuals(post, design, data)
    sig_c = InverseGamma(hp.alpha_c + 0.5 * n, hp.beta_c + 0.5 * expected_penalty(post, design))
    return VBState(post, shape_j, scale_j, sig_c)


def update_c(state: VBState, design: DesignSystem, data: SensorgramSet,
             settings: VBSettings | None = None, estimate_hn0_mass: bool = False
             ) -> TruncatedNormalPosterior:
    """New truncated-normal factor from the current hyperfactor expectations."""
    settings = settings or VBSettings()
    w = state.noise_precision
    s = state.sigma_c.mean_inverse
    if not (np.all(np.isfinite(w)) and math.isfinite(s)):
        raise NumericalError("hyperfactor expectations are not finite")
    KtWK, KtWR = _gram(design, data, w)
    Q = KtWK + s * design.LtL
    Q = 0.5 * (Q + Q.T)
    cf = _factor(Q)
    center = sla.cho_solve(cf, KtWR)
    cov = sla.cho_solve(cf, np.eye(design.n))
    cov = 0.5 * (cov + cov.T)
    outside, _ = orthant_mass_bounds(center, np.diag(cov))
    if outside < settings.fast_path_hn0:
        # truncation is immaterial: exact Gaussian draws
        rng = np.random.default_rng(settings.seed)
        Lc = np.tril(cf[0])
        z = rng.standard_normal((settings.sample_count, design.n))
        samples = center[None, :] + sla.solve_triangular(Lc, z.T, lower=True, trans="T").T
        np.maximum(samples, 0.0, out=samples)
        hn0 = outside
    else:
        samples = sample_truncated_normal(center, cov, settings.sample_count, settings.seed,
                                          settings.burn_in, settings.thin, precision=Q,
                                          min_mass=settings.min_mass)
        hn0 = None
    if estimate_hn0_mass and hn0 is None:
        hn0 = estimate_hn0(center, cov, settings.hn0_draws, settings.seed,
                           chol=sla.solve_triangular(np.tril(cf[0]), np.eye(design.n), lower=True).T)
    return TruncatedNormalPosterior(center, cov, samples, hn0, precision=Q)


def update_sigma_j(state: VBState, design: DesignSystem, data: SensorgramSet, j: int,
                   hp: HyperPriors) -> InverseGamma:
    post = state.posterior
    cb = design.compressed
    Rj = data.values[:, j]
    U, B = cb.U[j], cb.B[j]
    zj = U.T @ Rj
    rest = float(np.sum((Rj - U @ zj) ** 2))
    if post.samples is None:
        r = zj - B @ post.center
        e = rest + r @ r + float(np.sum((B @ post.cov) * B))
    else:
        r = zj[None, :] - post.samples @ B.T
        e = rest + float(np.mean(np.sum(r * r, axis=1)))
    return InverseGamma(hp.alpha_j[j] + 0.5 * design.n_times, hp.beta_j[j] + 0.5 * e)


def update_sigma_c(state: VBState, design: DesignSystem, hp: HyperPriors) -> InverseGamma:
    return InverseGamma(hp.alpha_c + 0.5 * design.n,
                        hp.beta_c + 0.5 * expected_penalty(state.posterior, design))


def _rel(a, b) -> float:
    nb = float(np.linalg.norm(b))
    d = float(np.linalg.norm(a - b))
    if nb == 0.0:
        return 0.0 if d == 0.0 else math.inf
    return d / nb


def vb_cycle(state: VBState, design: DesignSystem, data: SensorgramSet, hp: HyperPriors,
             settings: VBSettings, estimate_hn0_mass: bool = False) -> VBState:
    """One full update ``c -> sigma_j (all j) -> sigma_c``; returns a new state."""
    prev = state.posterior
    post = update_c(state, design, data, settings, estimate_hn0_mass)
    new = replace(state, posterior=post, delta1=list(state.delta1), delta2=list(state.delta2),
                  iteration=state.iteration + 1)
    resid = expected_residuals(post, design, data)
    new.sigma_j_shape = hp.alpha_j + 0.5 * design.n_times
    new.sigma_j_scale = hp.beta_j + 0.5 * resid
    new.sigma_c = update_sigma_c(new, design, hp)
    new.delta1.append(_rel(post.center, prev.center))
    new.delta2.append(_rel(post.cov, prev.cov))
    return new


def run_vb(design: DesignSystem, data: SensorgramSet, hp: HyperPriors, init: VBState | None = None,
           tol: float = 1e-4, max_iter: int = 200, settings: VBSettings | None = None,
           lambda0: float = 1e-5, kappa0: float = 1e-4, callback=None) -> VBState:
    """Iterate full update cycles until both relative changes fall below ``tol``.

    The two changes are ``|c_k - c_{k-1}| / |c_{k-1}|`` and the Frobenius analogue for the
    covariance.  Raises :class:`DivergenceError` when the mean change grows by
    ``divergence_factor`` over ``divergence_window`` iterations.
    """
    if not tol > 0:
        raise DomainError("tolerance must be > 0")
    settings = settings or VBSettings()
    _check(design, data, hp)
    state = init if init is not None else init_state(design, data, hp, lambda0, kappa0)
    for _ in range(max_iter):
        state = vb_cycle(state, design, data, hp, settings)
        d1, d2 = state.delta1[-1], state.delta2[-1]
        log.debug("vb iter %d: delta1=%.3e delta2=%.3e", state.iteration, d1, d2)
        if callback is not None:
            callback(state)
        if d1 <= tol and d2 <= tol:
            state.converged = True
            break
        k = settings.divergence_window
        if len(state.delta1) > k:
            old = state.delta1[-1 - k]
            if d1 > settings.divergence_floor and d1 >= settings.divergence_factor * old:
                raise DivergenceError(
                    f"mean change grew from {old:.3g} to {d1:.3g} in {k} iterations", state)
    post = state.posterior
    if post.hn0 is None and post.samples is not None:
        Lc = np.linalg.cholesky(post.cov)
        post.hn0 = estimate_hn0(post.center, post.cov, settings.hn0_draws, settings.seed, chol=Lc)
    return state


def save_checkpoint(state: VBState, path, settings: VBSettings | None = None) -> None:
    settings = settings or VBSettings()
    post = state.posterior
    np.savez(path, iteration=state.iteration, center=post.center, cov=post.cov,
             samples=post.samples if post.samples is not None else np.empty((0, post.center.size)),
             sigma_j_shape=state.sigma_j_shape, sigma_j_scale=state.sigma_j_scale,
             sigma_c=np.array([state.sigma_c.shape, state.sigma_c.scale]),
             delta1=np.asarray(state.delta1), delta2=np.asarray(state.delta2),
             rng_seed=settings.seed, converged=state.converged)


def load_checkpoint(path) -> VBState:
    with np.load(Path(path)) as z:
        samples = z["samples"] if z["samples"].shape[0] else None
        post = TruncatedNormalPosterior(z["center"], z["cov"], samples)
        return VBState(post, z["sigma_j_shape"], z["sigma_j_scale"],
                       InverseGamma(*(float(v) for v in z["sigma_c"])), int(z["iteration"]),
                       list(z["delta1"]), list(z["delta2"]), bool(z["converged"]))


def write_delta_history(state: VBState, path) -> None:
    lines = ["iteration,delta1,delta2"]
    for k, (a, b) in enumerate(zip(state.delta1, state.delta2), start=1):
        lines.append(f"{k},{a:.17g},{b:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
