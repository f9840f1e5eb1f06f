"""Tests for particle_em.models: log densities, gradients, M-steps and cloud evaluation."""

import numpy as np
import pytest
from scipy.special import logsumexp

from particle_em.errors import DimensionError
from particle_em.models import (
    LOG_2PI,
    BnnModel,
    LogisticRegressionModel,
    ToyHierarchical,
    em_exact_step,
)
from particle_em.oracles import finite_difference_check, m_step_residual


def _cloud(rng, n, d, scale=1.0):
    return scale * rng.standard_normal((n, d))


def _joint_hessian(model, theta, x, eps=1e-5):
    """Central differences of the analytic (θ, x) gradient."""
    split = model.d_theta
    point = np.concatenate([theta, x])

    def gradient(z):
        return np.concatenate([model.grad_theta(z[:split], z[split:]), model.grad_x(z[:split], z[split:])])

    columns = []
    for i in range(point.size):
        step = np.zeros_like(point)
        step[i] = eps
        columns.append((gradient(point + step) - gradient(point - step)) / (2 * eps))
    hessian = np.column_stack(columns)
    return 0.5 * (hessian + hessian.T)


def _along_ray(model, theta, direction, scales=(1e2, 1e3, 1e4)):
    direction = direction / np.linalg.norm(direction)
    return np.array([model.log_joint(theta, t * direction) for t in scales])


class TestToyHierarchical:
    def test_log_joint_value(self):
        toy = ToyHierarchical([1.0, 2.0])
        assert toy.log_joint([0.0], [0.0, 0.0]) == pytest.approx(-2.5 - 2 * LOG_2PI)

    def test_dimensions(self, toy):
        assert toy.d_x == 5
        assert toy.d_theta == 1
        np.testing.assert_array_equal(toy.theta_term_counts, [5.0])

    def test_theta_star(self):
        toy = ToyHierarchical([1.0, 2.0, 6.0])
        assert toy.theta_star == pytest.approx(3.0)

    def test_gradient_vanishes_at_posterior_mean(self, toy):
        np.testing.assert_allclose(toy.grad_x([0.4], toy.posterior_mean(0.4)), 0.0, atol=1e-14)

    def test_cloud_methods_match_rows(self, toy, rng):
        points = _cloud(rng, 6, toy.d_x)
        theta = np.array([0.3])
        np.testing.assert_allclose(toy.log_joint_cloud(theta, points), [toy.log_joint(theta, x) for x in points])
        np.testing.assert_allclose(toy.grad_x_cloud(theta, points), [toy.grad_x(theta, x) for x in points])
        np.testing.assert_allclose(
            toy.grad_theta_cloud(theta, points), [toy.grad_theta(theta, x) for x in points]
        )
        assert toy.neg_hess_theta_sum(theta, points)[0, 0] == 6 * toy.d_x

    def test_em_step_fixed_point(self, toy):
        assert em_exact_step(toy, toy.theta_star) == pytest.approx(toy.theta_star)
        assert toy.em_step([0.0])[0] == pytest.approx(0.5 * toy.theta_star)

    def test_exact_m_step_is_grand_mean(self, toy, rng):
        points = _cloud(rng, 4, toy.d_x)
        assert toy.exact_m_step(points)[0] == pytest.approx(points.mean())
        assert m_step_residual(toy, points) < 1e-12

    def test_sample_prior(self, toy):
        draws = toy.sample_prior([2.0], 4000, np.random.default_rng(0))
        assert draws.shape == (4000, toy.d_x)
        assert draws.mean() == pytest.approx(2.0, abs=0.05)

    def test_finite_differences(self, toy):
        assert finite_difference_check(toy, point_count=10, tol=1e-8).passed

    def test_shape_errors(self, toy):
        with pytest.raises(DimensionError):
            toy.log_joint([0.0], [0.0, 0.0])
        with pytest.raises(DimensionError):
            toy.grad_x([0.0, 1.0], np.zeros(toy.d_x))


class TestLogisticRegressionModel:
    def test_log_joint_matches_direct_sum(self, logistic, rng):
        x = rng.standard_normal(logistic.d_x)
        theta = 0.3
        z = logistic.features @ x
        expected = np.sum(logistic.labels * z - np.log1p(np.exp(z)))
        expected += -np.sum((x - theta) ** 2) / 10.0 - 0.5 * logistic.d_x * (LOG_2PI + np.log(5.0))
        assert logistic.log_joint([theta], x) == pytest.approx(expected)

    def test_grad_theta(self, logistic):
        x = np.array([1.0, 2.0, 3.0])
        assert logistic.grad_theta([1.0], x)[0] == pytest.approx((6.0 - 3.0) / 5.0)

    def test_finite_differences(self, logistic):
        assert finite_difference_check(logistic, point_count=10, tol=1e-5).passed

    def test_cloud_methods_match_rows(self, logistic, rng):
        points = _cloud(rng, 5, logistic.d_x)
        theta = np.array([-0.2])
        np.testing.assert_allclose(
            logistic.grad_x_cloud(theta, points), [logistic.grad_x(theta, x) for x in points]
        )
        np.testing.assert_allclose(
            logistic.neg_hess_theta_sum(theta, points), 5 * logistic.neg_hess_theta(theta, points[0])
        )

    def test_extreme_weights_stay_finite(self, logistic):
        x = np.full(logistic.d_x, 1e4)
        assert np.isfinite(logistic.log_joint([0.0], x))
        assert np.all(np.isfinite(logistic.grad_x([0.0], x)))

    def test_m_step_stationary(self, logistic, rng):
        assert m_step_residual(logistic, _cloud(rng, 7, logistic.d_x)) < 1e-12

    def test_strictly_concave(self, logistic, rng):
        assert np.any(logistic.features.sum(axis=1) != 0.0)
        for _ in range(10):
            theta = rng.standard_normal(1)
            x = rng.standard_normal(logistic.d_x)
            eigenvalues = np.linalg.eigvalsh(_joint_hessian(logistic, theta, x))
            assert eigenvalues.max() < -1e-4, eigenvalues

    def test_log_joint_falls_along_rays(self, logistic, rng):
        for _ in range(5):
            values = _along_ray(logistic, [0.5], rng.standard_normal(logistic.d_x))
            assert np.all(np.diff(values) < 0.0)
            assert values[-1] < -1e6

    def test_predictive_probabilities(self, logistic, rng):
        points = _cloud(rng, 4, logistic.d_x)
        probs = logistic.predictive_probabilities(points, logistic.features[:6])
        assert probs.shape == (4, 6, 2)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            LogisticRegressionModel(np.zeros((3, 2)), np.zeros(4))


class TestBnnModel:
    def test_dimensions(self, bnn):
        assert bnn.d_w == 5 * 4
        assert bnn.d_v == 2 * 5
        assert bnn.d_x == 30
        assert bnn.d_theta == 2
        np.testing.assert_array_equal(bnn.theta_term_counts, [20.0, 10.0])

    def test_split_layout(self, bnn):
        x = np.arange(bnn.d_x, dtype=float)[None, :]
        w, v = bnn.split(x)
        assert w.shape == (1, 5, 4)
        assert v.shape == (1, 2, 5)
        assert w[0, 1, 0] == 4.0
        assert v[0, 0, 0] == 20.0

    def test_log_joint_matches_loop(self, bnn, rng):
        x = rng.standard_normal(bnn.d_x)
        alpha, beta = 0.2, -0.3
        w = x[: bnn.d_w].reshape(5, 4)
        v = x[bnn.d_w :].reshape(2, 5)
        expected = 0.0
        for f, label in zip(bnn.features, bnn.labels):
            a = v @ np.tanh(w @ f)
            expected += a[label] - logsumexp(a)
        expected += -0.5 * np.sum(w**2) * np.exp(-2 * alpha) - bnn.d_w * alpha
        expected += -0.5 * np.sum(v**2) * np.exp(-2 * beta) - bnn.d_v * beta
        expected += -0.5 * bnn.d_x * LOG_2PI
        assert bnn.log_joint([alpha, beta], x) == pytest.approx(expected)

    def test_finite_differences(self, bnn):
        report = finite_difference_check(bnn, point_count=5, tol=1e-4)
        assert report.passed, report

    def test_class_probabilities(self, bnn, rng):
        probs = bnn.class_probabilities(_cloud(rng, 3, bnn.d_x), bnn.features)
        assert probs.shape == (3, bnn.features.shape[0], 2)
        assert np.all((probs >= 0.0) & (probs <= 1.0))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_large_logits_stay_finite(self, bnn):
        x = np.full((1, bnn.d_x), 500.0)
        assert np.all(np.isfinite(bnn.class_probabilities(x, bnn.features)))
        assert np.isfinite(bnn.log_joint_cloud([0.0, 0.0], x)[0])

    def test_log_joint_falls_along_rays(self, bnn, rng):
        for _ in range(5):
            values = _along_ray(bnn, [0.0, 0.0], rng.standard_normal(bnn.d_x))
            assert np.all(np.isfinite(values))
            assert np.all(np.diff(values) < 0.0)
            assert values[-1] < -1e6

    def test_exact_m_step(self, bnn, rng):
        points = _cloud(rng, 6, bnn.d_x, scale=2.0)
        np.testing.assert_allclose(bnn.exact_m_step(points), [np.log(2.0)] * 2, atol=0.35)
        assert m_step_residual(bnn, points) < 1e-10

    def test_exact_m_step_unit_weights(self, bnn):
        signs = np.where(np.arange(bnn.d_x) % 3 == 0, -1.0, 1.0)[None, :]
        np.testing.assert_allclose(bnn.exact_m_step(signs), [0.0, 0.0], atol=1e-15)

    def test_cloud_gradient_matches_rows(self, bnn, rng):
        points = _cloud(rng, 3, bnn.d_x)
        theta = np.array([0.1, -0.1])
        np.testing.assert_allclose(bnn.grad_x_cloud(theta, points), [bnn.grad_x(theta, x) for x in points])

    def test_sample_prior_scale(self, bnn):
        draws = bnn.sample_prior([np.log(3.0), 0.0], 2000, np.random.default_rng(0))
        assert draws[:, : bnn.d_w].std() == pytest.approx(3.0, rel=0.05)
        assert draws[:, bnn.d_w :].std() == pytest.approx(1.0, rel=0.05)

    def test_label_range(self):
        with pytest.raises(ValueError):
            BnnModel(np.zeros((2, 3)), np.array([0, 2]), hidden=2)
