"""Two-sample energy test and log-log slope fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import norm


@dataclass
class EnergyTestResult:
    statistic: float  # mean block energy distance
    stderr: float
    z: float
    p_value: float
    blocks: int
    block_size: int

    def rejects(self, level: float) -> bool:
        return self.p_value < level


def energy_distance_block_test(x: np.ndarray, y: np.ndarray, block_size: int = 1000) -> EnergyTestResult:
    """Block energy-distance test of equal distributions.

    Samples are split into disjoint blocks; each block gives the unbiased
    U-statistic ``2 E|X - Y| - E|X - X'| - E|Y - Y'|``, which has mean 0
    under the null. Block values are i.i.d., so their mean is compared with
    a one-sided normal reference.
    """
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    n = min(len(x), len(y))
    nb = n // block_size
    if nb < 2:
        raise ValueError("need at least two full blocks")
    vals = np.empty(nb)
    for b in range(nb):
        xb = x[b * block_size:(b + 1) * block_size]
        yb = y[b * block_size:(b + 1) * block_size]
        cross = cdist(xb, yb).mean()
        within_x = pdist(xb).mean()
        within_y = pdist(yb).mean()
        vals[b] = 2.0 * cross - within_x - within_y
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(nb))
    z = mean / se if se > 0 else (0.0 if mean == 0 else math.copysign(math.inf, mean))
    return EnergyTestResult(mean, se, z, float(norm.sf(z)), nb, block_size)


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    slope_se: float
    ci_low: float
    ci_high: float


def fit_loglog_slope(n, values, stderr=None, level: float = 0.95) -> SlopeFit:
    """Weighted least squares of log(values) on log(n).

    Per-point weights come from the delta-method variance
    ``(stderr / value)^2``; with no errors given the fit is ordinary least
    squares and the interval collapses to the point estimate.
    """
    n = np.asarray(n, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0):
        raise ValueError("values must be positive for a log-log fit")
    x, y = np.log(n), np.log(v)
    if stderr is None or np.all(np.asarray(stderr) == 0):
        w = np.ones_like(x)
        weighted = False
    else:
        sig = np.asarray(stderr, dtype=float) / v
        sig = np.maximum(sig, 1e-12)
        w = 1.0 / sig**2
        weighted = True
    A = np.stack([x, np.ones_like(x)], axis=1)
    AtW = A.T * w
    cov = np.linalg.inv(AtW @ A)
    slope, intercept = cov @ (AtW @ y)
    se = math.sqrt(cov[0, 0]) if weighted else 0.0
    q = norm.ppf(0.5 + level / 2.0)
    return SlopeFit(float(slope), float(intercept), se, float(slope - q * se), float(slope + q * se))
