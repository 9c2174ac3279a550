import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dklab import spectral as sp

settings.register_profile(
    "dklab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("dklab")


def band_limited(n, kmax, rng, mean=0.0):
    """Random real field with modes |k_i| <= kmax."""
    fhat = np.zeros((n, n // 2 + 1), dtype=complex)
    k1, k2 = sp.wavenumbers(n)
    mask = (np.abs(k1) <= kmax) & (k2 <= kmax)
    fhat[mask] = rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())
    f = sp.from_spectral(fhat, n)
    f = f - f.mean()
    return f / sp.l2_norm(f) + mean


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def coords32():
    return sp.Grid(32).coords()
