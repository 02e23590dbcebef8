"""Propensity-score overlap coefficient (PS-OV).

The densities of the PS within each treatment group are estimated by a
Gaussian KDE on the logit scale and the shared area is integrated with the
trapezoidal rule. The overlap of two densities is unchanged by a monotone
change of variable, so integrating on the logit grid gives the same number as
mapping the densities back to [0, 1] with the Jacobian.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import logit

GRID_POINTS = 2048
PS_LO = 1e-6
PS_HI = 1.0 - 1e-6


@dataclass(frozen=True)
class OverlapResult:
    ps_ov: float
    grid_points: int
    bandwidths: tuple


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman's rule of thumb, ``0.9 * min(sd, IQR/1.34) * n**-0.2``."""
    n = x.size
    sd = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd if sd > 0 else 1.0
    return 0.9 * spread * n ** -0.2


def _binned_kde(x, grid, h):
    # linear binning onto the grid, then convolution with a sampled Gaussian
    delta = grid[1] - grid[0]
    pos = (x - grid[0]) / delta
    left = np.clip(np.floor(pos).astype(np.int64), 0, grid.size - 2)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=grid.size)
    counts += np.bincount(left + 1, weights=frac, minlength=grid.size)
    half = int(min(np.ceil(5.0 * h / delta), grid.size - 1))
    offsets = np.arange(-half, half + 1) * delta
    kernel = np.exp(-0.5 * (offsets / h) ** 2)
    kernel /= kernel.sum()
    dens = fftconvolve(counts, kernel, mode="same")
    return np.clip(dens, 0.0, None) / (x.size * delta)


def group_densities(ps, a, grid_points: int = GRID_POINTS):
    """Logit-scale KDEs of the PS in each group on a shared uniform grid."""
    ps = np.asarray(ps, dtype=float)
    if np.any((ps <= 0) | (ps >= 1)):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    return logit_group_densities(logit(ps), a, grid_points)


def logit_group_densities(lp, a, grid_points: int = GRID_POINTS):
    """Same as :func:`group_densities` but takes the PS on the logit scale."""
    lp = np.asarray(lp, dtype=float)
    a = np.asarray(a)
    if lp.shape != a.shape:
        raise ValueError("ps and a must have the same length")
    treated = a == 1
    n1 = int(treated.sum())
    n0 = lp.size - n1
    if n1 < 2 or n0 < 2:
        raise ValueError("each group needs at least 2 observations to estimate a density")
    lo, hi = logit(PS_LO), logit(PS_HI)
    lp = np.clip(lp, lo, hi)
    grid = np.linspace(lo, hi, grid_points)
    h0 = silverman_bandwidth(lp[~treated])
    h1 = silverman_bandwidth(lp[treated])
    f0 = _binned_kde(lp[~treated], grid, h0)
    f1 = _binned_kde(lp[treated], grid, h1)
    return grid, f0, f1, (h0, h1)


def ps_overlap(ps, a, grid_points: int = GRID_POINTS) -> OverlapResult:
    """Percentage of area shared by the treated and control PS densities."""
    return _integrate(*group_densities(ps, a, grid_points))


def ps_overlap_logit(lp, a, grid_points: int = GRID_POINTS) -> OverlapResult:
    return _integrate(*logit_group_densities(lp, a, grid_points))


def _integrate(grid, f0, f1, bws):
    grid_points = grid.size
    ov = 100.0 * np.trapezoid(np.minimum(f0, f1), grid)
    return OverlapResult(ps_ov=float(min(max(ov, 0.0), 100.0)), grid_points=grid_points, bandwidths=bws)
