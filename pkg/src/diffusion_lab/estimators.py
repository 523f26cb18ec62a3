"""Plug-in drift functions f_k, stochastic kernels Q, and the Tweedie score map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import targets as tg
from .rng import Stream, StreamBatch

ESTIMATOR_VARIANTS = ("exact_posterior_mean", "biased", "scaled", "zero")
KERNEL_VARIANTS = ("posterior_exact", "gaussian_matched", "mean_only")


@dataclass(frozen=True, eq=False)
class EstimatorSpec:
    model: tg.TargetModel
    variant: str = "exact_posterior_mean"
    bias: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.variant not in ESTIMATOR_VARIANTS:
            raise ValueError(f"unknown estimator variant {self.variant!r}")
        if self.variant == "biased":
            b = np.atleast_1d(np.asarray(self.bias, dtype=float))
            if b.size == 1 and self.model.dim > 1:
                b = np.full(self.model.dim, b.item())
            if b.shape != (self.model.dim,) or not np.all(np.isfinite(b)):
                raise ValueError("bias must be a finite vector of the model dimension")
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)
        if self.variant == "scaled" and not math.isfinite(self.scale):
            raise ValueError("scale must be finite")

    @property
    def label(self) -> str:
        if self.variant == "biased":
            return "biased(" + ";".join(repr(float(x)) for x in self.bias) + ")"
        if self.variant == "scaled":
            return f"scaled({self.scale!r})"
        return self.variant

    def error_sq(self, t: np.ndarray) -> np.ndarray:
        """E||f(Y(t)) - E[X | Y(t)]||^2 at each time in ``t``.

        Uses E||E[X | Y(t)]||^2 = E||X||^2 - M(t) for the scaled and zero
        variants, so no second quadrature is needed.
        """
        t = np.asarray(t, dtype=float)
        if self.variant == "exact_posterior_mean":
            return np.zeros_like(t)
        if self.variant == "biased":
            return np.full_like(t, float(self.bias @ self.bias))
        c = self.scale if self.variant == "scaled" else 0.0
        energy = self.model.second_moment - tg.mmse(self.model, t)
        return (c - 1.0) ** 2 * np.maximum(energy, 0.0)

    def error_sq_with_error(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        val = self.error_sq(t)
        if self.variant in ("scaled", "zero"):
            c = self.scale if self.variant == "scaled" else 0.0
            _, err = tg.mmse_with_error(self.model, t)
            return val, (c - 1.0) ** 2 * err
        return val, np.zeros_like(val)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    model: tg.TargetModel
    variant: str = "gaussian_matched"

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")

    @property
    def label(self) -> str:
        return self.variant

    @property
    def matched_order(self) -> int:
        return {"posterior_exact": 10**9, "gaussian_matched": 2, "mean_only": 1}[self.variant]


def estimator_from_config(cfg: dict, model: tg.TargetModel) -> EstimatorSpec:
    variant = cfg.get("variant", "exact_posterior_mean")
    if variant == "exact":
        variant = "exact_posterior_mean"
    return EstimatorSpec(model, variant, bias=cfg.get("bias"), scale=float(cfg.get("scale", 1.0)))


def kernel_from_config(cfg: dict, model: tg.TargetModel) -> KernelSpec:
    return KernelSpec(model, cfg.get("variant", "gaussian_matched"))


def evaluate_batch(spec: EstimatorSpec, y: np.ndarray, t: float) -> np.ndarray:
    """f(y) for each row of ``y`` (P, d)."""
    if spec.variant == "zero":
        return np.zeros_like(y)
    mean = tg.posterior_mean_batch(spec.model, y, t)
    if spec.variant == "biased":
        return mean + spec.bias
    if spec.variant == "scaled":
        return spec.scale * mean
    return mean


def evaluate_estimator(spec: EstimatorSpec, y, t: float) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite input")
    if t < 0:
        raise ValueError("t must be >= 0")
    return evaluate_batch(spec, y[None], t)[0]


def kernel_moments_batch(spec: KernelSpec, z: np.ndarray, t: float):
    """Analytic mean (P, d) and covariance (P, d, d) of Q(. | z, t)."""
    if spec.variant == "mean_only":
        mean = tg.posterior_mean_batch(spec.model, z, t)
        return mean, np.zeros(z.shape + (z.shape[1],))
    return tg.posterior_moments_batch(spec.model, z, t)


def sample_kernel_batch(spec: KernelSpec, z: np.ndarray, t: float, batch: StreamBatch) -> np.ndarray:
    """One draw from Q(. | z, t) per row.

    Every variant consumes one uniform block plus ``ceil(d/2)`` normal blocks
    so that chains using different kernels stay counter-aligned.
    """
    if spec.variant == "posterior_exact":
        return tg.sample_posterior_batch(spec.model, z, t, batch)
    batch.uniforms(1)
    noise = batch.normals(spec.model.dim)
    mean, cov = kernel_moments_batch(spec, z, t)
    if spec.variant == "mean_only":
        return mean
    return mean + np.einsum("pij,pj->pi", psd_sqrt(cov), noise)


def sample_kernel(spec: KernelSpec, z, t: float, stream: Stream) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return sample_kernel_batch(spec, z[None], t, stream._batch)[0]


def psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of a stack of matrices, eigenvalues clamped at 0."""
    if mat.shape[-1] == 1:
        if np.any(mat < -1e-10):
            raise np.linalg.LinAlgError("matrix is not positive semidefinite")
        return np.sqrt(np.maximum(mat, 0.0))
    w, q = np.linalg.eigh(0.5 * (mat + np.swapaxes(mat, -1, -2)))
    if np.any(w < -1e-10 * np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True))):
        raise np.linalg.LinAlgError("matrix is not positive semidefinite")
    return np.einsum("...ij,...j,...kj->...ik", q, np.sqrt(np.maximum(w, 0.0)), q)


def tweedie_score(model: tg.TargetModel, y, a: float, sigma: float) -> np.ndarray:
    """Score of the density of ``a X + sigma N`` at ``y`` via
    ``(a E[X | Y = y] - y) / sigma^2``.

    The conditional mean comes from the canonical observation
    ``Y(t) = t X + sqrt(t) N`` with ``t = a^2 / sigma^2`` after rescaling
    ``y`` by ``a / sigma^2``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    s2 = sigma * sigma
    cond_mean = tg.posterior_mean_batch(model, y2 * (a / s2), a * a / s2)
    out = (a * cond_mean - y2) / s2
    return out[0] if single else out
