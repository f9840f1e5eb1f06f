"""Predictive metrics and Monte-Carlo summaries of particle runs."""

from __future__ import annotations

from typing import Any, Optional, Sequence, Union

import numpy as np

from particle_em.data import DataSplit
from particle_em.errors import InsufficientSamplesError
from particle_em.types import Array, ModelSpec, ParticleCloud, Trace

LPPD_FLOOR = 1e-300

Clouds = Union[ParticleCloud, Sequence[ParticleCloud], Array]


def pool(clouds: Clouds) -> Array:
    """Stack one or more clouds into a single matrix of particles."""
    if isinstance(clouds, ParticleCloud):
        return clouds.points
    if isinstance(clouds, np.ndarray):
        return np.atleast_2d(clouds)
    return np.vstack([c.points if isinstance(c, ParticleCloud) else np.atleast_2d(c) for c in clouds])


class Classifier:
    """g(l | f): the class probabilities averaged over every pooled particle."""

    __slots__ = ["model", "points"]

    def __init__(self, model: ModelSpec, clouds: Clouds) -> None:
        self.model = model
        self.points = model.check_points(pool(clouds))

    @classmethod
    def from_trace(cls, model: ModelSpec, trace: Trace, burn_in: Optional[int] = None) -> Classifier:
        """Time-averaged classifier over the clouds recorded after the burn-in."""
        clouds = trace.retained_clouds(burn_in)
        if not clouds:
            raise InsufficientSamplesError("trace holds no particle clouds")
        return cls(model, clouds)

    def probabilities(self, features: Any) -> Array:
        """(M, classes) matrix of g(l | f_m)."""
        return np.mean(self.model.predictive_probabilities(self.points, features), axis=0)

    def predict(self, features: Any) -> Array:
        # argmax returns the first maximum, so ties go to label 0
        return np.argmax(self.probabilities(features), axis=1)


def test_error(classifier, test_set: DataSplit) -> float:
    """Fraction of test points whose most probable label is wrong."""
    if test_set.m == 0:
        raise InsufficientSamplesError("empty test set")
    predicted = np.argmax(classifier.probabilities(test_set.features), axis=1)
    return float(np.mean(predicted != test_set.labels))


def lppd(classifier, test_set: DataSplit) -> float:
    """Mean log g(l_m | f_m) over the test set, with g floored at LPPD_FLOOR."""
    if test_set.m == 0:
        raise InsufficientSamplesError("empty test set")
    probs = classifier.probabilities(test_set.features)
    picked = probs[np.arange(test_set.m), np.asarray(test_set.labels, dtype=np.intp)]
    return float(np.mean(np.log(np.maximum(picked, LPPD_FLOOR))))


def lppd_path(model: ModelSpec, trace: Trace, test_set: DataSplit) -> list[tuple[int, float]]:
    """LPPD of each recorded cloud on its own, in recording order."""
    return [(step, lppd(Classifier(model, cloud), test_set)) for step, cloud in trace.clouds]


def posterior_variance_estimate(clouds: Clouds) -> Array:
    """Unbiased per-coordinate variance over all pooled particles."""
    points = pool(clouds)
    if points.shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {points.shape[0]}")
    return np.var(points, axis=0, ddof=1)


def stationary_theta_variance(trace: Trace) -> Array:
    """Sample variance of the post-burn-in θ_k, per coordinate."""
    kept = trace.theta_path[trace.burn_in :]
    if kept.shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 post-burn-in steps, got {kept.shape[0]}")
    return np.var(kept, axis=0, ddof=1)


def batch_means_standard_error(series: Any, batches: int = 20) -> float:
    """Standard error of the mean of an autocorrelated series by non-overlapping batch means."""
    series = np.asarray(series, dtype=np.float64).ravel()
    size = series.size // batches
    if batches < 2 or size < 1:
        raise InsufficientSamplesError(f"{series.size} values cannot fill {batches} batches")
    means = series[: size * batches].reshape(batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(batches))
