import numpy as np
import pytest

from tracegp.model.kernels import KernelBasis, KernelMatrix, kernel_basis
from tracegp.model.ranking import sample_labels


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def random_kernel():
    """Factory: full-rank PSD kernel of size n with largest eigenvalue 1"""
    def make(n, rng, ridge=0.1):
        a = rng.standard_normal((n, n))
        k = a @ a.T / n + ridge * np.eye(n)
        return KernelMatrix(k / np.linalg.eigvalsh(k)[-1])
    return make


@pytest.fixture
def identity_bases():
    def make(n_rows, n_cols):
        return KernelBasis(np.eye(n_rows)), KernelBasis(np.eye(n_cols))
    return make


@pytest.fixture
def kernel_bases(random_kernel):
    """Factory: (K_M, K_N, G_M, G_N) from random kernels"""
    def make(n_rows, n_cols, rng):
        k_m, k_n = random_kernel(n_rows, rng), random_kernel(n_cols, rng)
        return k_m, k_n, kernel_basis(k_m), kernel_basis(k_n)
    return make


@pytest.fixture
def planted_labels(rng):
    """Labels from the top entries of each row of a random score matrix"""
    def make(n_rows, n_cols, positives_per_row=3, seed=0):
        z = np.random.default_rng(seed).standard_normal((n_rows, n_cols))
        return z, sample_labels(z, positives_per_row, seed)
    return make
