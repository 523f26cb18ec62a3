"""Target distributions and their exact posterior statistics.

Every shipped target is a finite mixture of axis-aligned Gaussians, with
point masses as zero-variance components. Observations follow
``Y(t) = t X + sqrt(t) N``; for ``t > 0`` this is equivalent to the channel
``sqrt(t) X + N`` up to a scale, so the MMSE and mutual information of that
channel are computed from the same posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import brentq

from .quadrature import adaptive_simpson
from .rng import Stream, StreamBatch

_LOG_2PI = math.log(2.0 * math.pi)

KINDS = ("isotropic_gaussian", "diagonal_gaussian", "gaussian_mixture", "atom_mixture")


@dataclass(frozen=True, eq=False)
class TargetModel:
    """A mixture of axis-aligned Gaussians on R^d.

    ``means`` and ``variances`` have shape ``(K, d)``; a zero variance row is
    a point mass. Use the constructor functions below rather than building
    this directly.
    """

    kind: str
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    gh_order: int = 64
    quadrature: str = "trapezoid"
    mc_samples: int = 200_000
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise ValueError("inconsistent component shapes")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("non-finite target parameters")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var < 0):
            raise ValueError("variances must be nonnegative")
        if self.quadrature not in ("trapezoid", "gauss_hermite"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")
        if self.kind != "atom_mixture" and np.any(var <= 0):
            raise ValueError("Gaussian variances must be strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def is_gaussian(self) -> bool:
        """True when μ is a single Gaussian or a single point mass."""
        return self.n_components == 1

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @cached_property
    def covariance(self) -> np.ndarray:
        m = self.mean
        second = np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        second += np.diag(self.weights @ self.variances)
        cov = second - np.outer(m, m)
        return 0.5 * (cov + cov.T)

    @cached_property
    def trace_cov(self) -> float:
        return float(np.trace(self.covariance))

    @cached_property
    def second_moment(self) -> float:
        """E||X||^2."""
        return float(self.trace_cov + self.mean @ self.mean)

    @cached_property
    def subgaussian_L(self) -> float:
        """Smallest L with E exp(||X||^2 / L^2) <= 2."""
        return subgaussian_constant(self)

    def digest_dict(self) -> dict:
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @cached_property
    def _mc_draws(self):
        # Common random numbers keep the Monte Carlo M(s) smooth in s.
        batch = StreamBatch(0x5EED_3C3C, np.arange(self.mc_samples, dtype=np.uint64))
        x = sample_batch(self, batch)
        z = batch.normals(self.dim)
        return x, z


def logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Stable log-sum-exp; rows that are all -inf give -inf."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


# --------------------------------------------------------------------------
# constructors


def isotropic_gaussian(mean, variance: float) -> TargetModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if not variance > 0:
        raise ValueError("variance must be positive")
    return TargetModel(
        "isotropic_gaussian", np.ones(1), mean[None, :], np.full((1, mean.size), float(variance))
    )


def diagonal_gaussian(mean, variances) -> TargetModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    variances = np.atleast_1d(np.asarray(variances, dtype=float))
    if variances.shape != mean.shape:
        raise ValueError("mean and variances must have the same length")
    return TargetModel("diagonal_gaussian", np.ones(1), mean[None, :], variances[None, :])


def gaussian_mixture(weights, means, variances) -> TargetModel:
    """Mixture of isotropic Gaussians; ``means`` is (K, d) or (K,) for d = 1."""
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    if means.ndim == 1:
        means = means[:, None]
    variances = np.asarray(variances, dtype=float).reshape(-1)
    if variances.shape[0] != means.shape[0]:
        raise ValueError("one variance per component required")
    if np.any(variances <= 0):
        raise ValueError("variances must be positive")
    var = np.repeat(variances[:, None], means.shape[1], axis=1)
    return TargetModel("gaussian_mixture", weights, means, var)


def atom_mixture(weights, atoms) -> TargetModel:
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    return TargetModel("atom_mixture", np.asarray(weights, dtype=float), atoms, np.zeros_like(atoms))


def from_config(cfg: dict) -> TargetModel:
    """Build a model from the ``target`` block of a run config."""
    kind = cfg.get("kind")
    dim = cfg.get("dim")
    gh = int(cfg.get("gh_order", 64))
    rule = cfg.get("quadrature", "trapezoid")

    def vec(x):
        a = np.atleast_1d(np.asarray(x, dtype=float))
        if dim is not None and a.size == 1 and dim > 1:
            a = np.full(dim, a.item())
        return a

    def rows(x):
        a = np.asarray(x, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if dim is not None and a.shape[1] == 1 and dim > 1:
            a = np.repeat(a, dim, axis=1)
        return a

    if kind == "isotropic_gaussian":
        model = isotropic_gaussian(vec(cfg.get("mean", 0.0)), float(cfg.get("variance", 1.0)))
    elif kind == "diagonal_gaussian":
        model = diagonal_gaussian(vec(cfg["mean"]), vec(cfg["variances"]))
    elif kind == "gaussian_mixture":
        model = gaussian_mixture(cfg["weights"], rows(cfg["means"]), cfg["variances"])
    elif kind == "atom_mixture":
        model = atom_mixture(cfg["weights"], rows(cfg["atoms"]))
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    if dim is not None and model.dim != dim:
        raise ValueError(f"target dim {model.dim} does not match declared dim {dim}")
    return TargetModel(
        model.kind, model.weights, model.means, model.variances, gh_order=gh, quadrature=rule, spec=dict(cfg)
    )


# --------------------------------------------------------------------------
# sampling


def sample_batch(model: TargetModel, batch: StreamBatch) -> np.ndarray:
    """One draw of X per stream in ``batch``, shape (P, d).

    Consumes one uniform block (component choice) and ``ceil(d/2)`` normal
    blocks regardless of the model, so counters stay aligned.
    """
    u = batch.uniforms(1)[:, 0]
    z = batch.normals(model.dim)
    comp = _pick_component(model.weights, u)
    return model.means[comp] + np.sqrt(model.variances[comp]) * z


def sample_target(model: TargetModel, stream: Stream) -> np.ndarray:
    u = stream.uniforms(1)[0]
    z = stream.normals(model.dim)
    comp = _pick_component(model.weights, np.array([u]))[0]
    return model.means[comp] + np.sqrt(model.variances[comp]) * z


def _pick_component(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, len(weights) - 1)


# --------------------------------------------------------------------------
# posterior


@dataclass(frozen=True)
class PosteriorStats:
    mean: np.ndarray
    covariance: np.ndarray
    responsibilities: np.ndarray | None = None


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def posterior_components(model: TargetModel, y: np.ndarray, t: float):
    """Per-component posterior of X given Y(t) = y.

    Returns ``(log_resp, comp_means, comp_vars)`` with shapes (P, K),
    (P, K, d) and (K, d). ``y`` has shape (P, d).
    """
    t = float(t)
    if t < 0:
        raise ValueError("t must be >= 0")
    m, v = model.means, model.variances
    p = y.shape[0]
    if t == 0.0:
        log_resp = np.broadcast_to(_safe_log(model.weights), (p, model.n_components))
        return log_resp, np.broadcast_to(m, (p,) + m.shape), v
    denom = 1.0 + t * v  # (K, d)
    comp_vars = v / denom
    comp_means = (m[None] + v[None] * y[:, None, :]) / denom[None]
    if model.n_components == 1:
        return np.zeros((p, 1)), comp_means, comp_vars
    # log N(y; t m, t(1 + t v)) up to terms shared by all components; the
    # common y^2 / t piece is dropped so small t loses no precision
    yy = y[:, None, :]
    quad = (2.0 * yy * m[None] - t * m[None] ** 2 + v[None] * yy**2) / denom[None]
    ll = -0.5 * np.sum(np.log(denom), axis=1)[None] + 0.5 * np.sum(quad, axis=2)
    lw = _safe_log(model.weights)[None] + ll
    return lw - logsumexp(lw, axis=1, keepdims=True), comp_means, comp_vars


def _safe_log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def posterior_mean_batch(model: TargetModel, y: np.ndarray, t: float) -> np.ndarray:
    log_resp, cm, _ = posterior_components(model, y, t)
    if model.n_components == 1:
        return cm[:, 0, :]
    return np.einsum("pk,pkd->pd", np.exp(log_resp), cm)


def posterior_moments_batch(model: TargetModel, y: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean (P, d) and PSD-clamped covariance (P, d, d) in one pass."""
    log_resp, cm, cv = posterior_components(model, y, t)
    r = np.exp(log_resp)
    mean = np.einsum("pk,pkd->pd", r, cm)
    diag = r @ cv
    centered = cm - mean[:, None, :]
    cov = np.einsum("pk,pki,pkj->pij", r, centered, centered)
    idx = np.arange(model.dim)
    cov[:, idx, idx] += diag
    return mean, _clamp_psd(cov)


def posterior_cov_batch(model: TargetModel, y: np.ndarray, t: float) -> np.ndarray:
    return posterior_moments_batch(model, y, t)[1]


def posterior_var_trace_batch(model: TargetModel, y: np.ndarray, t: float) -> np.ndarray:
    """tr cov(X | Y(t) = y), shape (P,)."""
    log_resp, cm, cv = posterior_components(model, y, t)
    r = np.exp(log_resp)
    mean = np.einsum("pk,pkd->pd", r, cm)
    spread = np.einsum("pk,pk->p", r, np.sum((cm - mean[:, None, :]) ** 2, axis=2))
    return np.maximum(spread + r @ cv.sum(axis=1), 0.0)


def _clamp_psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if cov.shape[-1] == 1:
        return np.maximum(cov, 0.0)
    w, q = np.linalg.eigh(cov)
    if np.all(w >= 0):
        return cov
    w = np.where(w < 0, 0.0, w)
    return np.einsum("...ij,...j,...kj->...ik", q, w, q)


def posterior_stats(model: TargetModel, y, t: float) -> PosteriorStats:
    """Exact conditional mean and covariance of X given Y(t) = y."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _check_finite(y)
    if y.shape != (model.dim,):
        raise ValueError(f"y must have shape ({model.dim},)")
    y2 = y[None]
    log_resp, cm, _ = posterior_components(model, y2, t)
    resp = np.exp(log_resp[0]) if model.n_components > 1 else None
    return PosteriorStats(
        mean=posterior_mean_batch(model, y2, t)[0],
        covariance=posterior_cov_batch(model, y2, t)[0],
        responsibilities=resp,
    )


def sample_posterior_batch(model: TargetModel, y: np.ndarray, t: float, batch: StreamBatch) -> np.ndarray:
    """Exact draw of X given Y(t) = y per row; same block usage as :func:`sample_batch`."""
    u = batch.uniforms(1)[:, 0]
    z = batch.normals(model.dim)
    log_resp, cm, cv = posterior_components(model, y, t)
    if model.n_components == 1:
        comp = np.zeros(len(u), dtype=int)
    else:
        cdf = np.cumsum(np.exp(log_resp), axis=1)
        comp = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), model.n_components - 1)
    rows = np.arange(len(u))
    return cm[rows, comp] + np.sqrt(cv[comp]) * z


# --------------------------------------------------------------------------
# MMSE and mutual information


def mmse_with_error(model: TargetModel, s) -> tuple[np.ndarray, np.ndarray]:
    """M(s) = E||X - E[X | sqrt(s) X + N]||^2 and its numerical error estimate.

    Closed form for single-component models; for d = 1 mixtures a uniform-grid
    trapezoid rule (default) or Gauss-Hermite; Monte Carlo with a reported
    standard error for d > 1 mixtures.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("snr must be >= 0")
    flat = s.reshape(-1)
    err = np.zeros_like(flat)
    if model.is_gaussian:
        v = model.variances[0]
        out = np.sum(v[None] / (1.0 + flat[:, None] * v[None]), axis=1)
    elif model.dim == 1:
        rule = _mmse_gh if model.quadrature == "gauss_hermite" else _mmse_trapezoid
        out = np.array([rule(model, x) for x in flat])
    else:
        pairs = [_mmse_mc(model, x) for x in flat]
        out = np.array([p[0] for p in pairs])
        err = np.array([p[1] for p in pairs])
    out = np.where(flat == 0.0, model.trace_cov, out)
    err = np.where(flat == 0.0, 0.0, err)
    return out.reshape(s.shape), err.reshape(s.shape)


def mmse(model: TargetModel, s):
    val, _ = mmse_with_error(model, s)
    return float(val) if np.ndim(val) == 0 else val


def _mmse_gh(model: TargetModel, s: float) -> float:
    if s == 0.0:
        return model.trace_cov
    x, w = hermgauss(model.gh_order)
    w = w / math.sqrt(math.pi)
    total = 0.0
    for j in range(model.n_components):
        if model.weights[j] == 0:
            continue
        sd = math.sqrt(s * s * model.variances[j, 0] + s)
        y = (s * model.means[j, 0] + sd * math.sqrt(2.0) * x)[:, None]
        total += model.weights[j] * float(w @ posterior_var_trace_batch(model, y, s))
    return total


def _mmse_trapezoid(model: TargetModel, s: float) -> float:
    # Uniform-grid trapezoid over y: geometrically convergent for the analytic,
    # Gaussian-tailed integrand p(y) tr cov(X | y).
    if s == 0.0:
        return model.trace_cov
    m = model.means[:, 0]
    sd = np.sqrt(s * s * model.variances[:, 0] + s)
    spread = np.ptp(m) if len(m) > 1 else 0.0
    h = min(sd.min(), 1.0 / spread if spread > 0 else np.inf) / 8.0
    lo = (s * m - 12.0 * sd).min()
    hi = (s * m + 12.0 * sd).max()
    npts = int(math.ceil((hi - lo) / h)) + 1
    if npts > 4_000_000:
        raise ValueError("MMSE grid too large; use gauss_hermite quadrature")
    y = np.linspace(lo, hi, npts)[:, None]
    dens = np.exp(log_marginal_density(model, y, s, math.sqrt(s)))
    vals = dens * posterior_var_trace_batch(model, y, s)
    return float(np.trapezoid(vals, y[:, 0]))


def _mmse_mc(model: TargetModel, s: float) -> tuple[float, float]:
    if s == 0.0:
        return model.trace_cov, 0.0
    x, z = model._mc_draws
    y = s * x + math.sqrt(s) * z
    vals = posterior_var_trace_batch(model, y, s)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def mutual_information(model: TargetModel, s: float, tol: float = 1e-8) -> float:
    """I(s) = I(X; sqrt(s) X + N) in nats."""
    s = float(s)
    if s < 0:
        raise ValueError("snr must be >= 0")
    if s == 0.0:
        return 0.0
    if model.is_gaussian:
        return 0.5 * float(np.sum(np.log1p(s * model.variances[0])))
    return 0.5 * adaptive_simpson(lambda u: mmse(model, u), 0.0, s, 2.0 * tol)


def mutual_information_grid(model: TargetModel, times, tol: float = 1e-8) -> np.ndarray:
    """I(t_k) for an increasing grid, integrating M piecewise."""
    times = np.asarray(times, dtype=float)
    if model.is_gaussian:
        return np.array([mutual_information(model, t) for t in times])
    out = np.zeros_like(times)
    span = max(times[-1] - times[0], 1e-300)
    acc = mutual_information(model, times[0], tol) if times[0] > 0 else 0.0
    out[0] = acc
    for k in range(1, len(times)):
        a, b = times[k - 1], times[k]
        if b > a:
            local = max(2.0 * tol * (b - a) / span, 1e-14)
            acc += 0.5 * adaptive_simpson(lambda u: mmse(model, u), a, b, local)
        out[k] = acc
    return out


def gaussian_mi_bound(model: TargetModel, s: float) -> float:
    """1/2 log det(I + s cov(X)); equals I(s) iff μ is Gaussian."""
    sign, logdet = np.linalg.slogdet(np.eye(model.dim) + s * model.covariance)
    return 0.5 * float(logdet)


# --------------------------------------------------------------------------
# densities


def log_transition_density(model: TargetModel, y_prev, y_next, t_prev: float, delta: float) -> np.ndarray:
    """log p(y_next | y_prev) for one step of the comparison chain.

    The increment is ``delta X' + sqrt(delta) N`` with X' drawn from the
    posterior at ``(y_prev, t_prev)``. Inputs may be (d,) or (P, d).
    """
    if not delta > 0:
        raise ValueError("step must be positive")
    y_prev = np.asarray(y_prev, dtype=float)
    y_next = np.asarray(y_next, dtype=float)
    single = y_prev.ndim == 1
    yp = np.atleast_2d(y_prev)
    yn = np.atleast_2d(y_next)
    _check_finite(yp, yn)
    log_resp, cm, cv = posterior_components(model, yp, t_prev)
    var = delta * delta * cv + delta  # (K, d)
    resid = (yn - yp)[:, None, :] - delta * cm
    comp_ll = -0.5 * np.sum(_LOG_2PI + np.log(var), axis=1)[None] - 0.5 * np.sum(resid**2 / var[None], axis=2)
    if model.n_components == 1:
        out = comp_ll[:, 0]
    else:
        out = logsumexp(log_resp + comp_ll, axis=1)
    return out[0] if single else out


def log_marginal_density(model: TargetModel, y, a: float, sigma: float) -> np.ndarray:
    """Log density of ``a X + sigma N`` evaluated at ``y`` ((d,) or (P, d))."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    var = a * a * model.variances + sigma * sigma  # (K, d)
    resid = y2[:, None, :] - a * model.means[None]
    comp_ll = -0.5 * np.sum(_LOG_2PI + np.log(var), axis=1)[None] - 0.5 * np.sum(resid**2 / var[None], axis=2)
    out = logsumexp(_safe_log(model.weights)[None] + comp_ll, axis=1)
    return out[0] if single else out


# --------------------------------------------------------------------------
# sub-Gaussian constant


def subgaussian_constant(model: TargetModel) -> float:
    """Smallest L with E exp(||X||^2 / L^2) <= 2, from the closed-form MGF."""

    def mgf(L):
        b = 1.0 / (L * L)
        v, m = model.variances, model.means
        if np.any(2.0 * b * v >= 1.0):
            return np.inf
        log_terms = np.sum(-0.5 * np.log1p(-2.0 * b * v) + b * m * m / (1.0 - 2.0 * b * v), axis=1)
        return float(model.weights @ np.exp(log_terms))

    if np.all(model.variances == 0) and np.all(model.means == 0):
        return 0.0
    # Jensen gives L >= sqrt(E||X||^2 / log 2); the MGF needs L^2 > 2 max v
    lo = max(math.sqrt(2.0 * model.variances.max()) * (1 + 1e-9),
             math.sqrt(model.second_moment / math.log(2.0)) * (1 - 1e-9))
    hi = lo * 2.0
    with np.errstate(over="ignore"):
        while mgf(hi) > 2.0:
            hi *= 2.0
        if mgf(lo) <= 2.0:
            return lo
        return brentq(lambda L: mgf(L) - 2.0, lo, hi, xtol=1e-12, rtol=1e-12)
