"""KL divergence between the comparison chain and a sampler.

Exact values come from the three-term decomposition
``sum_k delta_k/2 M(t_{k-1}) - I(T) + sum_k delta_k/2 err_k``; the Monte
Carlo route accumulates per-step log transition-density ratios along
simulated comparison paths. The two routes share no code beyond the target
posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import targets as tg
from .processes import DEFAULT_CHUNK, MAX_FAILED_FRACTION, SimulationError, comparison_steps, map_chunks
from .rng import StreamBatch, path_stream_ids
from .schedules import Schedule

_LOG_2PI = math.log(2.0 * math.pi)
KL_ROLE = 1  # pathwise estimates reuse the comparison-chain streams


@dataclass
class DivergenceReport:
    mmse_riemann_term: float
    mutual_info_term: float
    estimator_error_term: float
    delta_exact: float
    thm1_bound: float
    thm2_bound: float | None
    tv_bound: float
    numerical_error: float = 0.0
    mc_estimate: float | None = None
    mc_stderr: float | None = None
    paths_used: int = 0
    violations: list[str] = field(default_factory=list)

    def check(self, tol: float = 1e-9) -> list[str]:
        """Invariant violations beyond ``tol`` (empty when all hold)."""
        out = []
        ident = self.mmse_riemann_term - self.mutual_info_term + self.estimator_error_term
        if abs(ident - self.delta_exact) > tol:
            out.append(f"decomposition mismatch {ident - self.delta_exact:.3e}")
        if self.delta_exact < -tol:
            out.append(f"negative divergence {self.delta_exact:.3e}")
        if self.delta_exact > self.thm1_bound + tol:
            out.append(f"delta {self.delta_exact:.6g} exceeds first bound {self.thm1_bound:.6g}")
        if self.thm2_bound is not None and self.delta_exact > self.thm2_bound + tol:
            out.append(f"delta {self.delta_exact:.6g} exceeds geometric bound {self.thm2_bound:.6g}")
        return out


def pinsker_tv(delta: float) -> float:
    """Total-variation bound sqrt(delta / 2)."""
    if delta < 0:
        raise ValueError("divergence must be nonnegative")
    return math.sqrt(delta / 2.0)


def _estimator_error_term(estimator: est.EstimatorSpec | None, schedule: Schedule) -> tuple[float, float]:
    if estimator is None:
        return 0.0, 0.0
    val, err = estimator.error_sq_with_error(schedule.times[:-1])
    inc = schedule.increments
    return float(0.5 * inc @ val), float(0.5 * inc @ err)


def thm1_bound(model: tg.TargetModel, schedule: Schedule, estimator: est.EstimatorSpec | None = None) -> float:
    """delta_max/2 tr cov(X) + sum_k delta_k/2 E||f_k - E[X | Y_{k-1}]||^2."""
    err, _ = _estimator_error_term(estimator, schedule)
    return 0.5 * schedule.delta_max * model.trace_cov + err


def thm2_bound(model: tg.TargetModel, T: float, n: int, alpha: float, tol: float = 1e-8) -> float:
    """Geometric-schedule bound
    (alpha - 1) (T (M(0) - M(T)) / (2 (alpha^n - 1)) + I(T) - T M(T)/2),
    with the alpha -> 1 limit T (M(0) - M(T)) / (2n)."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    m0 = model.trace_cov
    mT = tg.mmse(model, T)
    if abs(alpha - 1.0) <= 1e-9:
        return T * (m0 - mT) / (2.0 * n)
    iT = tg.mutual_information(model, T, tol)
    L = math.log(alpha)
    # (alpha - 1) / (alpha^n - 1), overflow-safe
    if alpha > 1:
        ratio = math.exp(-(n - 1) * L) * (-math.expm1(-L)) / (-math.expm1(-n * L))
    else:
        ratio = math.expm1(L) / math.expm1(n * L)
    return ratio * T * (m0 - mT) / 2.0 + (alpha - 1.0) * (iT - T * mT / 2.0)


def _thm2_for(model, schedule: Schedule, estimator, tol) -> float | None:
    if estimator is not None and estimator.variant != "exact_posterior_mean":
        return None
    if schedule.family not in ("uniform", "geometric"):
        return None
    return thm2_bound(model, schedule.T, schedule.n, schedule.alpha, tol)


def delta_exact(model: tg.TargetModel, schedule: Schedule, estimator: est.EstimatorSpec | None = None,
                tol: float = 1e-8) -> DivergenceReport:
    """Exact divergence from the three-term decomposition, plus both bounds."""
    if estimator is not None and estimator.model is not model:
        estimator = est.EstimatorSpec(model, estimator.variant, estimator.bias, estimator.scale)
    inc = schedule.increments
    m_left, m_err = tg.mmse_with_error(model, schedule.times[:-1])
    riemann = float(0.5 * inc @ m_left)
    info = tg.mutual_information(model, schedule.T, tol)
    err_term, err_err = _estimator_error_term(estimator, schedule)
    delta = riemann - info + err_term
    b1 = thm1_bound(model, schedule, estimator)
    rep = DivergenceReport(
        mmse_riemann_term=riemann,
        mutual_info_term=info,
        estimator_error_term=err_term,
        delta_exact=delta,
        thm1_bound=b1,
        thm2_bound=_thm2_for(model, schedule, estimator, tol),
        tv_bound=pinsker_tv(max(delta, 0.0)),
        numerical_error=float(0.5 * inc @ m_err) + err_err + tol,
    )
    rep.violations = rep.check(max(1e-9, 3.0 * rep.numerical_error))
    return rep


# --------------------------------------------------------------------------
# Monte Carlo route


@dataclass
class KLEstimate:
    estimate: float
    stderr: float
    paths: int
    per_step: np.ndarray  # mean log-ratio contributed by each step
    failed: int = 0

    def __iter__(self):
        return iter((self.estimate, self.stderr))


def _gaussian_logpdf_iso(x: np.ndarray, mean: np.ndarray, var: float) -> np.ndarray:
    d = x.shape[1]
    return -0.5 * d * (_LOG_2PI + math.log(var)) - 0.5 * np.sum((x - mean) ** 2, axis=1) / var


def _gaussian_logpdf_full(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    if d == 1:
        v = cov[:, 0, 0]
        r = (x - mean)[:, 0]
        return -0.5 * (_LOG_2PI + np.log(v)) - 0.5 * r * r / v
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (x - mean)[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return -0.5 * (d * _LOG_2PI + logdet) - 0.5 * np.sum(sol**2, axis=1)


def log_q(sampler, y_prev: np.ndarray, y_next: np.ndarray, t_prev: float, delta: float) -> np.ndarray:
    """Sampler transition log-density q_k(y_next | y_prev)."""
    if isinstance(sampler, est.EstimatorSpec):
        f = est.evaluate_batch(sampler, y_prev, t_prev)
        return _gaussian_logpdf_iso(y_next, y_prev + delta * f, delta)
    if isinstance(sampler, est.KernelSpec):
        if sampler.variant == "posterior_exact":
            return tg.log_transition_density(sampler.model, y_prev, y_next, t_prev, delta)
        mean, cov = est.kernel_moments_batch(sampler, y_prev, t_prev)
        if sampler.variant == "mean_only":
            return _gaussian_logpdf_iso(y_next, y_prev + delta * mean, delta)
        d = y_prev.shape[1]
        return _gaussian_logpdf_full(y_next, y_prev + delta * mean, delta * delta * cov + delta * np.eye(d))
    raise TypeError("sampler must be an EstimatorSpec or KernelSpec")


def pathwise_kl_estimate(model: tg.TargetModel, schedule: Schedule, sampler, paths: int, master_seed: int,
                         *, workers: int = 1, chunk: int = DEFAULT_CHUNK) -> KLEstimate:
    """Monte Carlo estimate of the path-space divergence with its standard error."""
    if sampler.model is not model:
        raise ValueError("sampler must refer to the same target model")
    times, inc = schedule.times, schedule.increments
    n = schedule.n

    def run(a: int, b: int):
        batch = StreamBatch(master_seed, path_stream_ids(KL_ROLE, a, b))
        steps = comparison_steps(model, schedule, batch)
        next(steps)
        total = np.zeros(b - a)
        per_step = np.zeros(n)
        bad = np.zeros(b - a, dtype=bool)
        for k, y_prev, y_next in steps:
            t_prev, dk = times[k - 1], inc[k - 1]
            lp = tg.log_transition_density(model, y_prev, y_next, t_prev, dk)
            if isinstance(sampler, est.KernelSpec) and sampler.variant == "posterior_exact":
                ratio = lp - lp
            else:
                ratio = lp - log_q(sampler, y_prev, y_next, t_prev, dk)
            nonfinite = ~np.isfinite(ratio)
            if nonfinite.any():
                bad |= nonfinite
                ratio = np.where(nonfinite, 0.0, ratio)
            total += ratio
            per_step[k - 1] = ratio.sum()
        return total, per_step, bad

    parts = map_chunks(run, paths, workers, chunk)
    total = np.concatenate([p[0] for p in parts])
    bad = np.concatenate([p[2] for p in parts])
    if bad.mean() > MAX_FAILED_FRACTION:
        raise SimulationError(f"{int(bad.sum())} of {paths} paths produced non-finite log-ratios")
    good = total[~bad]
    m = good.size
    per_step = np.sum([p[1] for p in parts], axis=0) / paths
    se = float(good.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return KLEstimate(float(good.mean()), se, m, per_step, int(bad.sum()))


# --------------------------------------------------------------------------
# I-MMSE checks and the Riemann picture


@dataclass
class SandwichRow:
    k: int
    lower: float
    mid: float
    upper: float
    violated: bool


def sandwich_check(model: tg.TargetModel, schedule: Schedule, tol: float = 1e-8, slack: float = 1e-6) -> list[SandwichRow]:
    """delta_k/2 M(t_k) <= I(t_k) - I(t_{k-1}) <= delta_k/2 M(t_{k-1}) for each k."""
    t, inc = schedule.times, schedule.increments
    m = tg.mmse(model, t)
    info = tg.mutual_information_grid(model, t, tol)
    rows = []
    for k in range(1, schedule.n + 1):
        lo = 0.5 * inc[k - 1] * m[k]
        hi = 0.5 * inc[k - 1] * m[k - 1]
        mid = info[k] - info[k - 1]
        rows.append(SandwichRow(k, float(lo), float(mid), float(hi), bool(mid < lo - slack or mid > hi + slack)))
    return rows


@dataclass
class Figure1Data:
    riemann_area: float
    info_area: float
    gap_area: float
    curve_t: np.ndarray
    curve_m: np.ndarray
    step_t: np.ndarray  # step-function vertices
    step_m: np.ndarray
    times: np.ndarray
    m_at_times: np.ndarray


def figure1_decomposition(model: tg.TargetModel, schedule: Schedule, samples: int = 201, tol: float = 1e-8) -> Figure1Data:
    """Areas of the left Riemann sum of M, of 2 I(T), and of their gap (= 2 delta)."""
    t, inc = schedule.times, schedule.increments
    m = tg.mmse(model, t)
    riemann = float(inc @ m[:-1])
    info = 2.0 * tg.mutual_information(model, schedule.T, tol)
    ct = np.linspace(0.0, schedule.T, samples)
    cm = tg.mmse(model, ct)
    st = np.repeat(t, 2)[1:-1]
    sm = np.repeat(m[:-1], 2)
    return Figure1Data(riemann, info, riemann - info, ct, cm, st, sm, t.copy(), m)
