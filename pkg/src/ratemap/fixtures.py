"""Synthetic test problems: the single-Gaussian benchmark and a two-peak log-scale map."""

from __future__ import annotations

import numpy as np

from .kinetics import Domain, InjectionGrid, KineticsParams

GAUSSIAN_DOMAIN = Domain((1.0, 7.0), (0.0, 3.0), x_param="ka")
GAUSSIAN_KINETICS = KineticsParams(t_inj=2.0, t0=0.0)


def gaussian_map(ka, kd):
    return np.exp(-0.1 * ((np.asarray(ka) - 4.0) ** 2 + (np.asarray(kd) - 4.0) ** 2))


def gaussian_grid(n_times: int = 150, n_conc: int = 30) -> InjectionGrid:
    return InjectionGrid.uniform((0.0, 4.0), n_times, (0.001, 2.0), n_conc)


# (log10 kd, log10 ka) plane
TWO_PEAK_DOMAIN = Domain((-4.0, 0.0), (1.0, 8.0), x_param="kd", log10=True)
TWO_PEAK_CENTERS = ((-2.0, 3.2), (-0.9, 4.4))
TWO_PEAK_WIDTH = 0.25
# response scale of a QCM instrument (tens of Hz), so the unit hyperpriors stay weak
TWO_PEAK_HEIGHT = 100.0
TWO_PEAK_KINETICS = KineticsParams(t_inj=84.0, t0=0.0)


def two_peak_map(x, y, width: float = TWO_PEAK_WIDTH, height: float = TWO_PEAK_HEIGHT):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros(np.broadcast(x, y).shape)
    for cx, cy in TWO_PEAK_CENTERS:
        out = out + np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width ** 2))
    return height * out


def two_peak_grid(n_times: int = 150) -> InjectionGrid:
    """Six concentrations from 1214 to 9714 nM (in M), 300 s of sampling."""
    conc = np.geomspace(1214e-9, 9714e-9, 6)
    return InjectionGrid(np.linspace(0.0, 300.0, n_times), conc)
