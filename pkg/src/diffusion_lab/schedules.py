"""Time grids t_0 = 0 < t_1 < ... < t_n = T and their increments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ALPHA_ONE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Schedule:
    """Immutable time grid.

    ``increments`` are authoritative: for steep geometric grids the late (or
    early) steps can fall below the float spacing of ``times`` near T, so
    ``times`` is only guaranteed nondecreasing while every increment is
    strictly positive.
    """

    times: np.ndarray
    increments: np.ndarray
    family: str
    alpha: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        d = np.asarray(self.increments, dtype=float)
        if t.ndim != 1 or d.ndim != 1 or t.size != d.size + 1 or d.size < 1:
            raise ValueError("need n >= 1 increments and n + 1 times")
        if t[0] != 0.0:
            raise ValueError("t_0 must be 0")
        if not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise ValueError("increments must be positive and finite")
        if np.any(np.diff(t) < 0):
            raise ValueError("times must be nondecreasing")
        T = t[-1]
        if not T > 0:
            raise ValueError("horizon must be positive")
        if abs(d.sum() - T) > 1e-10 * T:
            raise ValueError("increments do not sum to the horizon")
        if np.max(np.abs(np.diff(t) - d)) > 1e-12 * T * max(1.0, math.log2(t.size)):
            raise ValueError("increments inconsistent with times")
        t.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "increments", d)

    @property
    def n(self) -> int:
        return self.increments.size

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def delta_max(self) -> float:
        return float(self.increments.max())

    def describe(self) -> dict:
        out = {"family": self.family, "T": self.T, "n": self.n}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.family == "explicit":
            out["times"] = self.times.tolist()
        return out


def _check(T: float, n: int):
    if not (T > 0 and math.isfinite(T)):
        raise ValueError("horizon T must be positive")
    if int(n) != n or n < 1:
        raise ValueError("step count n must be a positive integer")


def uniform_schedule(T: float, n: int) -> Schedule:
    _check(T, n)
    n = int(n)
    times = np.arange(n + 1) * (T / n)
    times[-1] = T
    inc = np.full(n, T / n)
    inc[-1] = T - times[-2]
    return Schedule(times, inc, "uniform", 1.0)


def geometric_schedule(T: float, n: int, alpha: float) -> Schedule:
    """t_k = T (alpha^k - 1) / (alpha^n - 1), so that delta_{k+1} = alpha delta_k."""
    _check(T, n)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if abs(alpha - 1.0) <= ALPHA_ONE_TOL:
        return uniform_schedule(T, n)
    n = int(n)
    L = math.log(alpha)
    k = np.arange(n + 1, dtype=float)
    j = np.arange(1, n + 1, dtype=float)
    if alpha > 1:
        # factor out alpha^n to stay finite for large n
        den = -math.expm1(-n * L)
        times = T * np.exp((k - n) * L) * (-np.expm1(-k * L)) / den
        inc = T * np.exp((j - n) * L) * (-math.expm1(-L)) / den
    else:
        den = -math.expm1(n * L)
        times = T * (-np.expm1(k * L)) / den
        inc = T * np.exp((j - 1) * L) * (-math.expm1(L)) / den
    times[0] = 0.0
    times[-1] = T
    return Schedule(times, inc, "geometric", float(alpha))


def explicit_schedule(times) -> Schedule:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("need at least two time points")
    if np.any(np.diff(t) <= 0):
        raise ValueError("explicit times must be strictly increasing")
    return Schedule(t, np.diff(t), "explicit", None)


def corollary_alpha(T: float, n: int) -> float:
    """alpha_n = (T log T)^(1/n)."""
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    if not T > 0 or T * math.log(T) <= 1.0:
        raise ValueError("requires T log T > 1")
    return math.exp(math.log(T * math.log(T)) / n)


def from_config(cfg: dict) -> Schedule:
    family = cfg.get("family", "uniform")
    if family == "uniform":
        return uniform_schedule(float(cfg["T"]), int(cfg["n"]))
    if family == "geometric":
        alpha = cfg.get("alpha")
        if alpha in (None, "corollary"):
            alpha = corollary_alpha(float(cfg["T"]), int(cfg["n"]))
        return geometric_schedule(float(cfg["T"]), int(cfg["n"]), float(alpha))
    if family == "explicit":
        return explicit_schedule(cfg["times"])
    raise ValueError(f"unknown schedule family {family!r}")
