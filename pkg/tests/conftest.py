import numpy as np
import pytest

from d2dcache import ContactMatrix, DemandProfile


def random_profile(gen: np.random.Generator, K: int, F: int) -> DemandProfile:
    """Random valid profile: normalized-uniform w and rows of Q."""
    w = gen.uniform(0.1, 1.0, K)
    w /= w.sum()
    Q = gen.uniform(0.01, 1.0, (K, F))
    Q /= Q.sum(axis=1, keepdims=True)
    return DemandProfile(w, Q)


def random_contacts(gen: np.random.Generator, K: int,
                    fractional: bool = False) -> ContactMatrix:
    """Random symmetric contact matrix with unit diagonal."""
    if fractional:
        a = gen.uniform(0.0, 1.0, (K, K))
    else:
        a = (gen.uniform(0.0, 1.0, (K, K)) < 0.5).astype(np.float64)
    a = np.triu(a, k=1)
    a = a + a.T
    np.fill_diagonal(a, 1.0)
    return ContactMatrix(a, r_c=30.0)


@pytest.fixture
def gen():
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(12345)))
