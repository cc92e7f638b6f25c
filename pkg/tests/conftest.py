import numpy as np
import pytest

from PyAnytimeLab.core.problem import ProblemSpec, build_spectrum


@pytest.fixture
def unit_spec() -> ProblemSpec:
    # d=1, λ=1, w*=1
    return ProblemSpec(dimension=1, capacity=2.0, source=2.0, noise_var=0.0)


@pytest.fixture
def unit_spectrum(unit_spec):
    return build_spectrum(unit_spec)


@pytest.fixture
def small_spec() -> ProblemSpec:
    return ProblemSpec(dimension=20, capacity=1.5, source=3.0, noise_var=0.01)


@pytest.fixture
def noisy_spec() -> ProblemSpec:
    """Noise-dominated instance: tiny signal, unit label noise."""
    return ProblemSpec(dimension=20, capacity=1.5, source=1.5, noise_var=1.0, signal_scale=0.01)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
