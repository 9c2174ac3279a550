import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dklab import spectral as sp
from dklab.interaction import (
    KernelParams, estimate_gn_constant, gn_ratio, interaction_divergence, interaction_field,
    interaction_flux, smallness_check,
)
from conftest import band_limited


@pytest.fixture
def rho_cos(coords32):
    return 1 + np.cos(2 * np.pi * coords32[0])


class TestField:
    def test_keller_segel_mode(self, rho_cos, coords32):
        V = interaction_field(rho_cos, KernelParams(kappa1=1.0))
        s = np.sin(2 * np.pi * coords32[0]) / (2 * np.pi)
        assert np.allclose(V[0], s, atol=1e-14) and np.allclose(V[1], 0, atol=1e-14)
        assert V[0].max() == pytest.approx(0.15915, abs=1e-5)

    def test_biot_savart_mode(self, rho_cos, coords32):
        V = interaction_field(rho_cos, KernelParams(kappa2=1.0))
        assert np.allclose(V[0], 0, atol=1e-14)
        assert np.allclose(V[1], np.sin(2 * np.pi * coords32[0]) / (2 * np.pi), atol=1e-14)
        assert np.max(np.abs(sp.divergence(V))) < 1e-14

    def test_constant(self):
        V = interaction_field(np.full((16, 16), 3.0), KernelParams(1.0, 1.0))
        assert np.allclose(V, 0, atol=1e-15)

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, seed, a, b):
        r = np.random.default_rng(seed)
        r1, r2 = r.standard_normal((2, 16, 16))
        p = KernelParams(-0.7, 1.3)
        lhs = interaction_field(a * r1 + b * r2, p)
        rhs = a * interaction_field(r1, p) + b * interaction_field(r2, p)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + np.max(np.abs(rhs)))

    def test_pure_gradient_has_no_curl(self, rng):
        rho = band_limited(32, 8, rng, mean=1.0)
        assert np.max(np.abs(sp.curl(interaction_field(rho, KernelParams(kappa1=-2.0))))) <= 1e-12


class TestDivergence:
    def test_identity_mode(self, rho_cos, coords32):
        d = interaction_divergence(rho_cos, KernelParams(kappa1=1.0))
        assert np.allclose(d, np.cos(2 * np.pi * coords32[0]), atol=1e-14)

    def test_biot_savart_zero(self, rng):
        rho = rng.random((16, 16))
        assert np.all(interaction_divergence(rho, KernelParams(kappa2=5.0)) == 0)

    @pytest.mark.parametrize("k1,k2", [(1.0, 0.0), (-0.5, 1.0), (0.0, 1.0)])
    def test_spectral_oracle(self, k1, k2, rng):
        rho = band_limited(32, 10, rng, mean=1.0)
        p = KernelParams(k1, k2)
        err = sp.divergence(interaction_field(rho, p)) - interaction_divergence(rho, p)
        assert np.max(np.abs(err)) <= 1e-10

    def test_flux_zero_kernel(self, rng):
        assert np.all(interaction_flux(rng.random((2, 8, 8)), KernelParams()) == 0)


class TestGagliardoNirenberg:
    def test_cosine_floor(self):
        x1, _ = sp.Grid(32).coords()
        floor = (1.5) ** 0.25 / np.sqrt(2 * np.pi)
        assert gn_ratio(np.sqrt(2) * np.cos(2 * np.pi * x1)) == pytest.approx(floor, rel=1e-12)
        assert floor == pytest.approx(0.4415, abs=1e-4)
        assert estimate_gn_constant(sp.Grid(32), trials=1) >= floor

    def test_monotone_in_trials(self):
        g = sp.Grid(16)
        a = estimate_gn_constant(g, trials=2, seed=3)
        b = estimate_gn_constant(g, trials=4, seed=3)
        assert b >= a

    def test_resolution(self):
        a = estimate_gn_constant(sp.Grid(32), trials=4)
        b = estimate_gn_constant(sp.Grid(64), trials=4)
        assert abs(a - b) / b <= 0.05

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            estimate_gn_constant(sp.Grid(16), trials=0)


class TestSmallness:
    @pytest.mark.parametrize("k1", [0.0, 2.0])
    def test_nonattractive_passes(self, k1):
        assert smallness_check(KernelParams(kappa1=k1, kappa2=1.0), 100.0, 5.0).passed

    def test_boundary_fails(self):
        c, m = 0.64, 1.0
        assert not smallness_check(KernelParams(kappa1=-4 / (c * m)), m, c).passed

    def test_margin(self, caplog):
        with caplog.at_level(logging.INFO):
            v = smallness_check(KernelParams(kappa1=-1.9), 2.0, 1.0)
        assert v.passed and v.margin == pytest.approx(0.1)
        assert "approximate" in str(v)
        assert any("smallness" in r.message for r in caplog.records)

    @pytest.mark.parametrize("m,c", [(0.0, 1.0), (1.0, -1.0)])
    def test_rejects(self, m, c):
        with pytest.raises(ValueError):
            smallness_check(KernelParams(), m, c)


def test_kernel_integrability_regression():
    """grad G * delta: L^1.5 norm converges under refinement, L^2 diverges logarithmically."""
    norms = {}
    for n in (32, 64, 128, 256):
        d = np.zeros((n, n))
        d[0, 0] = n * n
        g = sp.gradient(sp.green_convolve(d))
        m = np.sqrt(np.sum(g * g, axis=0))
        norms[n] = [np.mean(m**p) ** (1 / p) for p in (1.5, 2.0)]
    ns = sorted(norms)
    inc15 = np.diff([norms[n][0] for n in ns])
    assert np.all(inc15 > 0) and np.all(inc15[1:] / inc15[:-1] < 0.8)
    # |grad G| ~ 1/(2 pi r): each doubling adds log(2)/(2 pi) to the squared L^2 norm
    inc2 = np.diff([norms[n][1] ** 2 for n in ns])
    assert np.allclose(inc2, np.log(2) / (2 * np.pi), rtol=0.03)
    # frozen values at n = 64
    assert norms[64] == pytest.approx([0.54009, 0.79531], abs=1e-4)
