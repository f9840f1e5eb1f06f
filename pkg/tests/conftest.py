"""Shared fixtures for particle_em tests."""

import numpy as np
import pytest

from particle_em.data import synthetic_dataset
from particle_em.models import BnnModel, LogisticRegressionModel, ToyHierarchical


@pytest.fixture
def toy():
    """Five-dimensional toy model with observations drawn at θ = 1."""
    return ToyHierarchical.simulate(5, theta=1.0, seed=0)


@pytest.fixture
def toy1():
    return ToyHierarchical([0.7])


@pytest.fixture
def small_dataset():
    return synthetic_dataset(m=80, d=3, seed=1)


@pytest.fixture
def logistic(small_dataset):
    return LogisticRegressionModel.from_dataset(small_dataset)


@pytest.fixture
def bnn():
    dataset = synthetic_dataset(m=30, d=4, seed=2)
    return BnnModel.from_dataset(dataset, hidden=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
