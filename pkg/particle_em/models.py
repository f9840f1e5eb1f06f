"""Benchmark models: toy hierarchical Gaussian, Bayesian logistic regression, tanh BNN.

Each model keeps every additive constant of its log density, θ-dependent or
not, so ``log_joint`` is the exact log of p_θ(x, y).
"""

from __future__ import annotations

import logging
from typing import Any

import numpy as np
from scipy.special import expit, logsumexp, softmax

from particle_em.types import Array, ModelSpec

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


class ToyHierarchical(ModelSpec):
    """x_d ~ N(θ, 1), y_d | x_d ~ N(x_d, 1) independently for d = 1..D_x.

    The marginal likelihood is maximized at θ* = mean(y) and the posterior at
    θ is N(½(y + θ1), ½I).
    """

    def __init__(self, y: Any) -> None:
        self.y = np.atleast_1d(np.array(y, dtype=np.float64))
        self.d_x = self.y.shape[0]
        self.d_theta = 1

    @classmethod
    def simulate(cls, d_x: int, theta: float = 1.0, seed: int = 0) -> ToyHierarchical:
        """Draw synthetic observations from the model at the given θ."""
        rng = np.random.default_rng(seed)
        x = theta + rng.standard_normal(d_x)
        y = x + rng.standard_normal(d_x)
        return cls(y)

    @property
    def theta_star(self) -> float:
        return float(np.mean(self.y))

    @property
    def theta_term_counts(self) -> Array:
        return np.array([float(self.d_x)])

    def posterior_mean(self, theta: float) -> Array:
        return 0.5 * (self.y + theta)

    def posterior_cov(self) -> Array:
        return 0.5 * np.eye(self.d_x)

    def log_joint(self, theta, x) -> float:
        theta = self.check_theta(theta)
        x = self.check_x(x)
        return float(
            -0.5 * np.sum((x - theta[0]) ** 2) - 0.5 * np.sum((self.y - x) ** 2) - self.d_x * LOG_2PI
        )

    def grad_theta(self, theta, x) -> Array:
        theta = self.check_theta(theta)
        x = self.check_x(x)
        return np.array([np.sum(x - theta[0])])

    def grad_x(self, theta, x) -> Array:
        theta = self.check_theta(theta)
        x = self.check_x(x)
        return self.y - x - (x - theta[0])

    def neg_hess_theta(self, theta, x) -> Array:
        self.check_theta(theta)
        self.check_x(x)
        return np.array([[float(self.d_x)]])

    def exact_m_step(self, points) -> Array:
        points = self.check_points(points)
        return np.array([np.mean(points)])

    def em_step(self, theta) -> Array:
        theta = self.check_theta(theta)
        return np.array([em_exact_step(self, theta[0])])

    def sample_prior(self, theta, n: int, rng: np.random.Generator) -> Array:
        theta = self.check_theta(theta)
        return theta[0] + rng.standard_normal((n, self.d_x))

    def log_joint_cloud(self, theta, points) -> Array:
        theta = self.check_theta(theta)
        points = self.check_points(points)
        return (
            -0.5 * np.sum((points - theta[0]) ** 2, axis=1)
            - 0.5 * np.sum((self.y - points) ** 2, axis=1)
            - self.d_x * LOG_2PI
        )

    def grad_theta_cloud(self, theta, points) -> Array:
        theta = self.check_theta(theta)
        points = self.check_points(points)
        return np.sum(points - theta[0], axis=1)[:, None]

    def grad_x_cloud(self, theta, points) -> Array:
        theta = self.check_theta(theta)
        points = self.check_points(points)
        return self.y + theta[0] - 2 * points

    def neg_hess_theta_sum(self, theta, points) -> Array:
        self.check_theta(theta)
        points = self.check_points(points)
        return np.array([[float(points.shape[0] * self.d_x)]])


def em_exact_step(toy: ToyHierarchical, theta: float) -> float:
    """One exact EM iteration: θ ↦ ½(mean(y) + θ)."""
    return 0.5 * (toy.theta_star + float(theta))


class LogisticRegressionModel(ModelSpec):
    """Bayesian logistic regression with prior x ~ N(θ1, σ²I), σ² = 5.

    The quadratic prior term is ‖x − θ1‖²/(2σ²), consistent with the stated
    prior variance and with the gradient (θ1 − x)/σ².
    """

    def __init__(self, features: Any, labels: Any, prior_variance: float = 5.0) -> None:
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be M×D and labels length M")
        self.prior_variance = float(prior_variance)
        self.d_x = self.features.shape[1]
        self.d_theta = 1

    @classmethod
    def from_dataset(cls, dataset, prior_variance: float = 5.0) -> LogisticRegressionModel:
        train = dataset.train()
        return cls(train.features, train.labels, prior_variance)

    @property
    def theta_term_counts(self) -> Array:
        return np.array([float(self.d_x)])

    def _log_prior_norm(self) -> float:
        return -0.5 * self.d_x * (LOG_2PI + np.log(self.prior_variance))

    def log_joint(self, theta, x) -> float:
        theta = self.check_theta(theta)
        x = self.check_x(x)
        return float(self.log_joint_cloud(theta, x[None, :])[0])

    def grad_theta(self, theta, x) -> Array:
        theta = self.check_theta(theta)
        x = self.check_x(x)
        return np.array([(np.sum(x) - self.d_x * theta[0]) / self.prior_variance])

    def grad_x(self, theta, x) -> Array:
        theta = self.check_theta(theta)
        x = self.check_x(x)
        return self.grad_x_cloud(theta, x[None, :])[0]

    def neg_hess_theta(self, theta, x) -> Array:
        self.check_theta(theta)
        self.check_x(x)
        return np.array([[self.d_x / self.prior_variance]])

    def exact_m_step(self, points) -> Array:
        points = self.check_points(points)
        return np.array([np.mean(points)])

    def sample_prior(self, theta, n: int, rng: np.random.Generator) -> Array:
        theta = self.check_theta(theta)
        return theta[0] + np.sqrt(self.prior_variance) * rng.standard_normal((n, self.d_x))

    def log_joint_cloud(self, theta, points) -> Array:
        theta = self.check_theta(theta)
        points = self.check_points(points)
        z = points @ self.features.T
        # log(1 + e^z) via logaddexp stays finite for large |z|
        log_lik = np.sum(self.labels * z - np.logaddexp(0.0, z), axis=1)
        log_prior = (
            -np.sum((points - theta[0]) ** 2, axis=1) / (2 * self.prior_variance)
            + self._log_prior_norm()
        )
        return log_lik + log_prior

    def grad_theta_cloud(self, theta, points) -> Array:
        theta = self.check_theta(theta)
        points = self.check_points(points)
        return ((np.sum(points, axis=1) - self.d_x * theta[0]) / self.prior_variance)[:, None]

    def grad_x_cloud(self, theta, points) -> Array:
        theta = self.check_theta(theta)
        points = self.check_points(points)
        residual = self.labels - expit(points @ self.features.T)
        return (theta[0] - points) / self.prior_variance + residual @ self.features

    def neg_hess_theta_sum(self, theta, points) -> Array:
        self.check_theta(theta)
        points = self.check_points(points)
        return np.array([[points.shape[0] * self.d_x / self.prior_variance]])

    def predictive_probabilities(self, points, features) -> Array:
        """(N, M, 2) class probabilities for each particle and feature row."""
        points = self.check_points(points)
        p1 = expit(points @ np.asarray(features, dtype=np.float64).T)
        return np.stack([1.0 - p1, p1], axis=-1)


class BnnModel(ModelSpec):
    """Two-layer tanh network without biases, latent x = (w, v), θ = (α, β).

    p(l | f, x) ∝ exp(Σ_j v_lj tanh(Σ_i w_ji f_i)), with priors
    w ~ N(0, e^{2α}I) and v ~ N(0, e^{2β}I). The flattened latent vector holds
    w (hidden × inputs, row-major) followed by v (classes × hidden).
    """

    def __init__(self, features: Any, labels: Any, hidden: int = 40, n_classes: int = 2) -> None:
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.intp)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be M×D and labels length M")
        if np.any(self.labels < 0) or np.any(self.labels >= n_classes):
            raise ValueError(f"labels must lie in 0..{n_classes - 1}")
        self.hidden = hidden
        self.n_classes = n_classes
        self.d_in = self.features.shape[1]
        self.d_w = hidden * self.d_in
        self.d_v = n_classes * hidden
        self.d_x = self.d_w + self.d_v
        self.d_theta = 2

    @classmethod
    def from_dataset(cls, dataset, hidden: int = 40) -> BnnModel:
        train = dataset.train()
        return cls(train.features, train.labels, hidden=hidden)

    @property
    def theta_term_counts(self) -> Array:
        return np.array([float(self.d_w), float(self.d_v)])

    def split(self, points: Array) -> tuple[Array, Array]:
        """(N, hidden, inputs) and (N, classes, hidden) weight views."""
        n = points.shape[0]
        w = points[:, : self.d_w].reshape(n, self.hidden, self.d_in)
        v = points[:, self.d_w :].reshape(n, self.n_classes, self.hidden)
        return w, v

    def _forward(self, points: Array, features: Array) -> tuple[Array, Array]:
        w, v = self.split(points)
        hidden = np.tanh(np.matmul(w, features.T))  # (N, H, M)
        logits = np.matmul(v, hidden)  # (N, C, M)
        return hidden, logits

    def class_probabilities(self, points, features) -> Array:
        """(N, M, C) class probabilities via a max-shifted softmax."""
        points = self.check_points(points)
        _, logits = self._forward(points, np.asarray(features, dtype=np.float64))
        return np.moveaxis(softmax(logits, axis=1), 1, 2)

    predictive_probabilities = class_probabilities

    def _log_likelihood_cloud(self, points: Array) -> Array:
        _, logits = self._forward(points, self.features)
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        m = np.arange(self.labels.shape[0])
        return np.sum(log_probs[:, self.labels, m], axis=1)

    def _sq_norms(self, points: Array) -> tuple[Array, Array]:
        return (
            np.sum(points[:, : self.d_w] ** 2, axis=1),
            np.sum(points[:, self.d_w :] ** 2, axis=1),
        )

    def log_joint_cloud(self, theta, points) -> Array:
        alpha, beta = self.check_theta(theta)
        points = self.check_points(points)
        w2, v2 = self._sq_norms(points)
        log_prior = (
            -0.5 * w2 * np.exp(-2 * alpha) - self.d_w * alpha
            - 0.5 * v2 * np.exp(-2 * beta) - self.d_v * beta
            - 0.5 * self.d_x * LOG_2PI
        )
        return self._log_likelihood_cloud(points) + log_prior

    def log_joint(self, theta, x) -> float:
        x = self.check_x(x)
        return float(self.log_joint_cloud(theta, x[None, :])[0])

    def grad_theta_cloud(self, theta, points) -> Array:
        alpha, beta = self.check_theta(theta)
        points = self.check_points(points)
        w2, v2 = self._sq_norms(points)
        return np.stack(
            [w2 * np.exp(-2 * alpha) - self.d_w, v2 * np.exp(-2 * beta) - self.d_v], axis=1
        )

    def grad_theta(self, theta, x) -> Array:
        x = self.check_x(x)
        return self.grad_theta_cloud(theta, x[None, :])[0]

    def grad_x_cloud(self, theta, points) -> Array:
        """Backpropagation through the softmax and tanh layers, plus prior terms."""
        alpha, beta = self.check_theta(theta)
        points = self.check_points(points)
        w, v = self.split(points)
        hidden, logits = self._forward(points, self.features)
        delta = -softmax(logits, axis=1)  # (N, C, M)
        delta[:, self.labels, np.arange(self.labels.shape[0])] += 1.0
        grad_v = np.matmul(delta, hidden.transpose(0, 2, 1))  # (N, C, H)
        grad_pre = np.matmul(v.transpose(0, 2, 1), delta) * (1.0 - hidden**2)  # (N, H, M)
        grad_w = np.matmul(grad_pre, self.features)  # (N, H, I)
        grad_w -= w * np.exp(-2 * alpha)
        grad_v -= v * np.exp(-2 * beta)
        n = points.shape[0]
        return np.concatenate([grad_w.reshape(n, -1), grad_v.reshape(n, -1)], axis=1)

    def grad_x(self, theta, x) -> Array:
        x = self.check_x(x)
        return self.grad_x_cloud(theta, x[None, :])[0]

    def neg_hess_theta(self, theta, x) -> Array:
        x = self.check_x(x)
        return self.neg_hess_theta_sum(theta, x[None, :])

    def neg_hess_theta_sum(self, theta, points) -> Array:
        alpha, beta = self.check_theta(theta)
        points = self.check_points(points)
        w2, v2 = self._sq_norms(points)
        return np.diag([2 * np.sum(w2) * np.exp(-2 * alpha), 2 * np.sum(v2) * np.exp(-2 * beta)])

    def exact_m_step(self, points) -> Array:
        points = self.check_points(points)
        w2, v2 = self._sq_norms(points)
        n = points.shape[0]
        with np.errstate(divide="ignore"):
            return 0.5 * np.log(np.array([np.sum(w2) / (n * self.d_w), np.sum(v2) / (n * self.d_v)]))

    def sample_prior(self, theta, n: int, rng: np.random.Generator) -> Array:
        alpha, beta = self.check_theta(theta)
        draws = rng.standard_normal((n, self.d_x))
        draws[:, : self.d_w] *= np.exp(alpha)
        draws[:, self.d_w :] *= np.exp(beta)
        return draws
