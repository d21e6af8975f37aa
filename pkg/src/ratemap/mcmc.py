"""Gibbs sampler for the full posterior of ``(c, sigma_j^2, sigma_c^2)``.

Used as the reference against which the variational factors are checked.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.stats import truncnorm

from . import _tmvn
from .errors import DomainError
from .kinetics import SensorgramSet
from .operators import DesignSystem
from .vb import HyperPriors, _check, _projected_data


@dataclass
class McmcConfig:
    chain_length: int = 50_000
    burn_in: int = 5_000
    thinning: int = 1
    seed: int = 0
    t_max: float | None = None          # wall-clock cap in seconds
    chunk: int = 500
    lambda0: float = 1e-5

    def __post_init__(self):
        if self.chain_length < 1 or self.thinning < 1 or self.chunk < 1:
            raise DomainError("chain_length, thinning and chunk must be >= 1")
        if not 0 <= self.burn_in < self.chain_length:
            raise DomainError("burn_in must satisfy 0 <= burn_in < chain_length")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class McmcChain:
    """Post-burn-in draws, one per row."""

    c: np.ndarray
    sigma2: np.ndarray
    sigma2_c: np.ndarray
    steps: int
    seconds: float
    timed_out: bool = False
    config: dict = field(default_factory=dict)

    def __len__(self):
        return self.c.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.c.mean(axis=0)

    def save(self, directory) -> None:
        """Plain ``.npy`` arrays plus a small JSON header; wall-clock time is left out."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "c.npy", self.c)
        np.save(d / "sigma2.npy", self.sigma2)
        np.save(d / "sigma2_c.npy", self.sigma2_c)
        (d / "chain.json").write_text(json.dumps({"steps": self.steps, "timed_out": self.timed_out,
                                                  "config": self.config}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "McmcChain":
        d = Path(directory)
        head = json.loads((d / "chain.json").read_text())
        return cls(np.load(d / "c.npy"), np.load(d / "sigma2.npy"), np.load(d / "sigma2_c.npy"),
                   int(head["steps"]), float("nan"), bool(head["timed_out"]), head.get("config", {}))


@dataclass
class GibbsState:
    c: np.ndarray
    sigma2: np.ndarray
    sigma2_c: float


def _conditional_gaussian(state: GibbsState, design: DesignSystem, data: SensorgramSet):
    w = 1.0 / state.sigma2
    Q = design.LtL / state.sigma2_c
    b = np.zeros(design.n)
    for j in range(design.n_conc):
        Kj = design.block(j)
        Q = Q + w[j] * (Kj.T @ Kj)
        b += w[j] * (Kj.T @ data.values[:, j])
    return Q, b


def gibbs_step(state: GibbsState, design: DesignSystem, data: SensorgramSet, hp: HyperPriors,
               rng: np.random.Generator) -> GibbsState:
    """One scan: every ``c_i`` given the rest, then each ``sigma_j^2``, then ``sigma_c^2``.

    Reference implementation in plain numpy; :func:`run_mcmc` uses a compiled version.
    """
    Q, b = _conditional_gaussian(state, design, data)
    c = state.c.copy()
    for i in range(c.size):
        m = (b[i] - Q[i] @ c + Q[i, i] * c[i]) / Q[i, i]
        s = 1.0 / np.sqrt(Q[i, i])
        c[i] = truncnorm.rvs(-m / s, np.inf, loc=m, scale=s, random_state=rng)
    sigma2 = np.empty(design.n_conc)
    for j in range(design.n_conc):
        r = data.values[:, j] - design.block(j) @ c
        shape = hp.alpha_j[j] + 0.5 * design.n_times
        sigma2[j] = (hp.beta_j[j] + 0.5 * r @ r) / rng.gamma(shape)
    Lc = design.L @ c
    sigma2_c = (hp.beta_c + 0.5 * Lc @ Lc) / rng.gamma(hp.alpha_c + 0.5 * design.n)
    return GibbsState(c, sigma2, float(sigma2_c))


def initial_state(design: DesignSystem, data: SensorgramSet, hp: HyperPriors,
                  lambda0: float = 1e-5) -> GibbsState:
    """Clipped ridge solution with the variances at their conditional modes."""
    K = design.K
    c = sla.solve(K.T @ K + lambda0 * np.eye(design.n), K.T @ data.stacked, assume_a="pos")
    c = np.maximum(c, 0.0)
    sigma2 = np.empty(design.n_conc)
    for j in range(design.n_conc):
        r = data.values[:, j] - design.block(j) @ c
        sigma2[j] = (hp.beta_j[j] + 0.5 * r @ r) / (hp.alpha_j[j] + 0.5 * design.n_times + 1)
    Lc = design.L @ c
    sigma2_c = (hp.beta_c + 0.5 * Lc @ Lc) / (hp.alpha_c + 0.5 * design.n + 1)
    return GibbsState(c, sigma2, float(sigma2_c))


def run_mcmc(design: DesignSystem, data: SensorgramSet, hp: HyperPriors | None = None,
             cfg: McmcConfig | None = None, init: GibbsState | None = None) -> McmcChain:
    """Run the chain for ``chain_length`` scans, dropping the first ``burn_in``.

    With ``t_max`` set, the run stops after the first chunk that ends past the cap and
    the partial chain is returned with ``timed_out=True``.
    """
    cfg = cfg or McmcConfig()
    hp = hp or HyperPriors.uniform(design.n_conc)
    _check(design, data, hp)
    cb = design.compressed
    z, rest = _projected_data(design, data)
    n, nc = design.n, design.n_conc
    G = np.empty((nc, n, n))
    h = np.empty((nc, n))
    rr = np.empty(nc)
    for j, B in enumerate(cb.B):
        G[j] = B.T @ B
        h[j] = B.T @ z[j]
        rr[j] = z[j] @ z[j] + rest[j]
    st = init or initial_state(design, data, hp, cfg.lambda0)
    c = np.array(st.c, dtype=float)
    sig2 = np.array(st.sigma2, dtype=float)
    sig2c = np.array([st.sigma2_c], dtype=float)
    LtL = np.ascontiguousarray(design.LtL)
    scratch = (np.empty((1, n)), np.empty((1, nc)), np.empty(1))
    parts = []
    t_start = time.perf_counter()
    done = 0
    seed = int(cfg.seed)
    timed_out = False
    args = (G, h, rr, LtL, hp.alpha_j, hp.beta_j, float(hp.alpha_c), float(hp.beta_c),
            design.n_times, c, sig2, sig2c)
    while done < cfg.chain_length:
        if done < cfg.burn_in:
            steps = min(cfg.chunk, cfg.burn_in - done)
            _tmvn.gibbs_posterior_chain(*args, steps, steps + 1, seed, *scratch, 0)
        else:
            # chunks hold whole multiples of the thinning interval, so the phase carries over
            steps = min(cfg.chunk * cfg.thinning, cfg.chain_length - done)
            m = steps // cfg.thinning
            buf = (np.empty((m, n)), np.empty((m, nc)), np.empty(m))
            rows = _tmvn.gibbs_posterior_chain(*args, steps, cfg.thinning, seed, *buf, 0)
            parts.append(tuple(b[:rows] for b in buf))
        seed = -1
        done += steps
        if cfg.t_max is not None and time.perf_counter() - t_start > cfg.t_max and done < cfg.chain_length:
            timed_out = True
            break
    seconds = time.perf_counter() - t_start
    if parts:
        out_c, out_s, out_sc = (np.concatenate(x) for x in zip(*parts))
    else:
        out_c, out_s, out_sc = np.empty((0, n)), np.empty((0, nc)), np.empty(0)
    return McmcChain(out_c, out_s, out_sc, done, seconds, timed_out, cfg.to_dict())


def _corr(x: np.ndarray, y: np.ndarray):
    """Pearson correlation of every column of ``x`` with every column of ``y``.

    Columns with zero variance get correlation 0; the returned mask marks them.
    """
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sx = np.sqrt(np.sum(xc * xc, axis=0))
    sy = np.sqrt(np.sum(yc * yc, axis=0))
    num = xc.T @ yc
    den = np.outer(sx, sy)
    degenerate = den == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    return np.clip(rho, -1.0, 1.0), degenerate


def factor_correlations(chain: McmcChain) -> dict:
    """Pearson correlations between the posterior factors and their maximum norms."""
    if len(chain) < 100:
        raise DomainError("need at least 100 post-burn-in draws")
    sc = chain.sigma2_c[:, None]
    r_cs, d1 = _corr(chain.c, chain.sigma2)
    r_cc, d2 = _corr(chain.c, sc)
    r_ss, d3 = _corr(chain.sigma2, sc)
    return {
        "rho_c_sigma_j": r_cs,
        "rho_c_sigma_c": r_cc[:, 0],
        "rho_sigma_j_sigma_c": r_ss[:, 0],
        "max_c_sigma_j": float(np.max(np.abs(r_cs))),
        "max_c_sigma_c": float(np.max(np.abs(r_cc))),
        "max_sigma_j_sigma_c": float(np.max(np.abs(r_ss))),
        "degenerate": bool(d1.any() or d2.any() or d3.any()),
    }


def autocorrelation(x, lags=(1, 5, 10, 50)) -> np.ndarray:
    """Lag-k sample autocorrelation of each column of ``x``; rows follow ``lags``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    xc = x - x.mean(axis=0)
    var = np.sum(xc * xc, axis=0)
    out = np.zeros((len(lags), x.shape[1]))
    for i, k in enumerate(lags):
        if k <= 0 or k >= x.shape[0]:
            raise DomainError(f"lag {k} out of range")
        num = np.sum(xc[:-k] * xc[k:], axis=0)
        out[i] = np.where(var > 0, num / np.where(var > 0, var, 1.0), 0.0)
    return out


def export_chain(chain: McmcChain, out_dir, monitor=None, lags=(1, 5, 10, 50)) -> None:
    """Binary chain, per-coordinate summary CSV, traces and autocorrelations."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chain.save(out)
    c = chain.c
    q = np.percentile(c, [2.5, 50, 97.5], axis=0) if len(chain) else np.zeros((3, c.shape[1]))
    mean = c.mean(axis=0) if len(chain) else np.zeros(c.shape[1])
    rows = ["coord,mean,p2.5,p50,p97.5"]
    rows += [f"{i},{mean[i]:.17g},{q[0, i]:.17g},{q[1, i]:.17g},{q[2, i]:.17g}" for i in range(c.shape[1])]
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    if monitor is None:
        monitor = np.argsort(-mean)[:5] if len(chain) else []
    monitor = [int(i) for i in monitor]
    cols = [c[:, i] for i in monitor] + [chain.sigma2_c]
    names = [f"c{i}" for i in monitor] + ["sigma2_c"]
    lines = ["draw," + ",".join(names)]
    for k in range(len(chain)):
        lines.append(f"{k}," + ",".join(f"{col[k]:.17g}" for col in cols))
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    if len(chain) > max(lags):
        ac = autocorrelation(np.column_stack(cols), lags)
        lines = ["lag," + ",".join(names)]
        lines += [f"{k}," + ",".join(f"{v:.17g}" for v in ac[i]) for i, k in enumerate(lags)]
        (out / "autocorrelation.csv").write_text("\n".join(lines) + "\n")
