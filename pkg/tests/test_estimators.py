import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusion_lab import estimators as est
from diffusion_lab import targets as tg
from diffusion_lab.rng import Stream, StreamBatch, path_stream_ids
from diffusion_lab.schedules import uniform_schedule
from diffusion_lab.divergence import thm1_bound

GAUSS = tg.isotropic_gaussian([0.0], 1.0)
ATOMS = tg.atom_mixture([0.5, 0.5], [-1.0, 1.0])
MIX = tg.gaussian_mixture([0.5, 0.5], [[-2.0], [2.0]], [0.25, 0.25])


class TestEstimatorVariants:
    def test_exact_gaussian(self):
        assert est.evaluate_estimator(est.EstimatorSpec(GAUSS), [2.0], 1.0)[0] == pytest.approx(1.0)

    def test_zero(self):
        assert np.all(est.evaluate_estimator(est.EstimatorSpec(MIX, "zero"), [3.0], 2.0) == 0.0)

    def test_biased_and_scaled(self):
        base = est.evaluate_estimator(est.EstimatorSpec(ATOMS), [0.3], 1.0)
        biased = est.evaluate_estimator(est.EstimatorSpec(ATOMS, "biased", bias=0.5), [0.3], 1.0)
        scaled = est.evaluate_estimator(est.EstimatorSpec(ATOMS, "scaled", scale=0.8), [0.3], 1.0)
        assert biased == pytest.approx(base + 0.5)
        assert scaled == pytest.approx(0.8 * base)

    def test_constant_bias_error_sum(self):
        spec = est.EstimatorSpec(GAUSS, "biased", bias=1.0)
        s = uniform_schedule(1.0, 4)
        # the error term alone is T/2 * ||b||^2
        assert thm1_bound(GAUSS, s, spec) - thm1_bound(GAUSS, s) == pytest.approx(0.5)

    def test_scaled_error_against_monte_carlo(self):
        spec = est.EstimatorSpec(MIX, "scaled", scale=0.8)
        t = 1.3
        rng = np.random.default_rng(3)
        n = 400_000
        comp = rng.integers(0, 2, n)
        x = np.where(comp == 0, -2.0, 2.0) + 0.5 * rng.standard_normal(n)
        y = (t * x + math.sqrt(t) * rng.standard_normal(n))[:, None]
        err = np.sum((est.evaluate_batch(spec, y, t) - tg.posterior_mean_batch(MIX, y, t)) ** 2, axis=1)
        assert abs(spec.error_sq(np.array([t]))[0] - err.mean()) < 4 * err.std() / math.sqrt(n)

    def test_scaled_error_nonzero_mean_target(self):
        m = tg.isotropic_gaussian([2.0], 1.0)
        spec = est.EstimatorSpec(m, "zero")
        # f = 0, so the error is E||E[X | Y]||^2 = E||X||^2 - M(t)
        assert spec.error_sq(np.array([0.0]))[0] == pytest.approx(4.0)
        assert spec.error_sq(np.array([1.0]))[0] == pytest.approx(5.0 - 0.5)

    def test_rejects_bad_input(self):
        spec = est.EstimatorSpec(GAUSS)
        with pytest.raises(ValueError):
            est.evaluate_estimator(spec, [np.nan], 1.0)
        with pytest.raises(ValueError):
            est.evaluate_estimator(spec, [0.0], -1.0)
        with pytest.raises(ValueError):
            est.EstimatorSpec(GAUSS, "oracle")
        with pytest.raises(ValueError):
            est.EstimatorSpec(GAUSS, "biased", bias=[1.0, 2.0])

    def test_from_config(self):
        spec = est.estimator_from_config({"variant": "exact"}, GAUSS)
        assert spec.variant == "exact_posterior_mean"
        assert est.estimator_from_config({"variant": "scaled", "scale": 0.8}, GAUSS).label == "scaled(0.8)"


class TestKernels:
    def test_mean_only_is_deterministic(self):
        spec = est.KernelSpec(ATOMS, "mean_only")
        draws = {float(est.sample_kernel(spec, [0.4], 1.0, Stream(1, i))[0]) for i in range(20)}
        assert len(draws) == 1

    def test_gaussian_matched_moments_on_atoms(self):
        spec = est.KernelSpec(ATOMS, "gaussian_matched")
        n = 1_000_000
        z = np.full((n, 1), 0.4)
        x = est.sample_kernel_batch(spec, z, 1.0, StreamBatch(5, path_stream_ids(5, 0, n)))[:, 0]
        ps = tg.posterior_stats(ATOMS, [0.4], 1.0)
        se_mean = x.std() / math.sqrt(n)
        assert abs(x.mean() - ps.mean[0]) < 4 * se_mean
        se_var = math.sqrt(np.var((x - x.mean()) ** 2) / n)
        assert abs(x.var() - ps.covariance[0, 0]) < 4 * se_var

    def test_posterior_exact_matches_gaussian_matched_in_law_for_gaussian(self):
        n = 200_000
        z = np.full((n, 1), 1.0)
        a = est.sample_kernel_batch(est.KernelSpec(GAUSS, "posterior_exact"), z, 2.0, StreamBatch(1, path_stream_ids(5, 0, n)))
        b = est.sample_kernel_batch(est.KernelSpec(GAUSS, "gaussian_matched"), z, 2.0, StreamBatch(2, path_stream_ids(5, 0, n)))
        assert abs(a.mean() - b.mean()) < 0.01 and abs(a.var() - b.var()) < 0.01
        assert abs(a.mean() - 1 / 3) < 0.01 and abs(a.var() - 1 / 3) < 0.01

    def test_psd_sqrt(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((10, 3, 3))
        cov = g @ np.swapaxes(g, 1, 2)
        root = est.psd_sqrt(cov)
        np.testing.assert_allclose(root @ root, cov, atol=1e-10)
        with pytest.raises(np.linalg.LinAlgError):
            est.psd_sqrt(-np.eye(2)[None])


class TestTweedie:
    def test_gaussian(self):
        y = np.linspace(-3, 3, 13)[:, None]
        np.testing.assert_allclose(est.tweedie_score(GAUSS, y, 1.0, 1.0)[:, 0], -y[:, 0] / 2, atol=1e-14)

    @pytest.mark.parametrize("model", [ATOMS, MIX])
    def test_symmetric_model_zero_at_origin(self, model):
        assert est.tweedie_score(model, np.array([0.0]), 1.3, 0.7)[0] == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("a,sigma", [(1.0, 1.0), (0.5, 2.0), (3.0, 0.4)])
    def test_matches_finite_difference(self, a, sigma):
        y = np.linspace(-5, 5, 101)[:, None]
        h = 1e-5
        fd = (tg.log_marginal_density(ATOMS, y + h, a, sigma) - tg.log_marginal_density(ATOMS, y - h, a, sigma)) / (2 * h)
        assert np.max(np.abs(est.tweedie_score(ATOMS, y, a, sigma)[:, 0] - fd)) < 1e-4

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            est.tweedie_score(ATOMS, np.array([0.0]), 1.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(y=st.floats(-20, 20), t=st.floats(0, 30), c=st.floats(-2, 2))
def test_estimator_variants_are_affine_in_posterior_mean(y, t, c):
    base = est.evaluate_estimator(est.EstimatorSpec(MIX), [y], t)
    assert np.all(np.isfinite(base))
    assert est.evaluate_estimator(est.EstimatorSpec(MIX, "scaled", scale=c), [y], t) == pytest.approx(c * base, abs=1e-12)
    assert est.evaluate_estimator(est.EstimatorSpec(MIX, "biased", bias=c), [y], t) == pytest.approx(base + c, abs=1e-12)
