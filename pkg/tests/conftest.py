import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial

from discount_kernel.services.data_service import SyntheticSpec, generate_synthetic
from discount_kernel.services.kernel_service import KernelSpec, SectionTerm


class GaussianKernel:
    """e^{-(x-y)^2}, which falsely claims single-exponential sections"""

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        return np.exp(-((x - y) ** 2))

    def derivative_x(self, x, y):
        x = np.asarray(x, dtype=float)
        return -2.0 * (x - y) * np.exp(-((x - y) ** 2))

    def section_terms(self, y):
        return [SectionTerm(rate=2.0 * y, poly=Polynomial([math.exp(-(y**2))]))]


@pytest.fixture
def base_kernel():
    return KernelSpec(alpha=0.2, beta=0.04)


@pytest.fixture
def unit_kernel():
    """alpha = 0, beta = 1: k(x, y) = e^{xy}"""
    return KernelSpec(alpha=0.0, beta=1.0)


@pytest.fixture
def gaussian_kernel():
    return GaussianKernel()


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def small_dataset():
    """Noiseless three-factor data: 3 days, 12 bonds per day"""
    return generate_synthetic(SyntheticSpec(n_days=3, contracts_per_day=12, seed=7))
