import numpy as np
import pytest

from gmixdyn.mixture import two_class_spec, realize_means, sample_dataset
from gmixdyn.perceptron import Activation, Loss, momentum_coeffs, make_maps


@pytest.fixture(scope="session")
def small_problem():
    """Shared small geometry: two classes, coupling -0.5, n = 8."""
    spec = two_class_spec(coupling=-0.5, ambient_dim=8, theta0_norm=0.1)
    means = realize_means(spec, 7)
    return spec, means


@pytest.fixture(scope="session")
def small_dataset(small_problem):
    spec, means = small_problem
    return sample_dataset(spec, 40, 3, means=means, assignment="fixed")


@pytest.fixture(scope="session")
def linear_model():
    return Activation.from_tag("linear"), Loss.from_tag("squared")


@pytest.fixture(scope="session")
def soft_model():
    return Activation.from_tag("soft_relu"), Loss.from_tag("squared")
