import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from dklab import functionals as fn
from dklab import spectral as sp
from conftest import band_limited

# calibrated once on the corpus in test_interpolation_constant (max 0.3273), then frozen
C_INTERP = 0.34


def x1_of(n):
    return sp.Grid(n).coords()[0]


class TestMass:
    def test_constant(self):
        assert fn.mass(np.ones((16, 16))) == 1.0

    def test_oscillation(self):
        x1 = x1_of(32)
        assert fn.mass(1 + 0.5 * np.cos(2 * np.pi * x1)) == pytest.approx(1.0, abs=1e-15)

    def test_bessel_oracle(self):
        x1 = x1_of(64)
        exact, _ = integrate.quad(lambda x: np.exp(np.sin(2 * np.pi * x)), 0, 1, epsabs=1e-14)
        assert exact == pytest.approx(special.i0(1.0), rel=1e-13)
        assert fn.mass(np.exp(np.sin(2 * np.pi * x1))) == pytest.approx(exact, abs=1e-10)


class TestEntropy:
    def test_one(self):
        assert fn.entropy_functional(np.ones((8, 8))) == pytest.approx(-1.0)

    def test_e(self):
        assert fn.entropy_functional(np.full((8, 8), np.e)) == pytest.approx(0.0, abs=1e-15)

    def test_zero_is_zero(self):
        assert fn.entropy_density(0.0) == 0.0

    def test_quadrature_oracle(self):
        x1 = x1_of(64)
        f = lambda x: (1 + 0.5 * np.cos(2 * np.pi * x)) * np.log(1 + 0.5 * np.cos(2 * np.pi * x)) \
            - (1 + 0.5 * np.cos(2 * np.pi * x))
        exact, _ = integrate.quad(f, 0, 1, epsabs=1e-13)
        assert abs(fn.entropy_functional(1 + 0.5 * np.cos(2 * np.pi * x1)) - exact) <= 1e-8

    def test_clamps_without_mutating(self):
        rho = np.ones((8, 8))
        rho[0, 0] = -0.5
        before = rho.copy()
        fn.entropy_functional(rho)
        assert np.array_equal(rho, before)
        assert fn.negative_count(rho) == 1

    @given(st.integers(0, 2**32 - 1))
    def test_lower_bound(self, seed):
        r = np.random.default_rng(seed)
        rho = r.random((16, 16)) ** 3
        rho /= rho.mean()
        assert fn.entropy_functional(rho) >= -1 - 1e-12


class TestFisher:
    def test_constant(self):
        assert fn.fisher_information(np.full((16, 16), 2.0)) == pytest.approx(0.0, abs=1e-20)

    def test_square_of_band_limited(self):
        x1 = x1_of(32)
        rho = (1 + 0.25 * np.cos(2 * np.pi * x1)) ** 2
        assert fn.fisher_information(rho) == pytest.approx(np.pi**2 / 8, rel=1e-12)
        assert np.pi**2 / 8 == pytest.approx(1.2337, abs=1e-4)

    def test_quadrature_oracle(self):
        x1 = x1_of(128)
        exact, _ = integrate.quad(
            lambda x: np.pi**2 * np.sin(2 * np.pi * x) ** 2 / (4 * (1 + 0.5 * np.cos(2 * np.pi * x))), 0, 1,
            epsabs=1e-13)
        assert fn.fisher_information(1 + 0.5 * np.cos(2 * np.pi * x1)) == pytest.approx(exact, rel=1e-4)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 31), st.integers(0, 31))
    def test_translation_invariant(self, seed, s1, s2):
        r = np.random.default_rng(seed)
        rho = band_limited(32, 4, r) * 0.2 + 1
        shifted = np.roll(rho, (s1, s2), axis=(0, 1))
        assert fn.fisher_information(shifted) == pytest.approx(fn.fisher_information(rho), rel=1e-10)


class TestNegSobolev:
    def test_constant(self):
        assert fn.neg_sobolev_norm(np.full((16, 16), -3.0)) == pytest.approx(3.0)

    @pytest.mark.parametrize("beta", [0.5, 1.0, 3.5])
    def test_single_mode(self, beta):
        x1 = x1_of(32)
        val = fn.neg_sobolev_norm(np.sqrt(2) * np.cos(2 * np.pi * x1), beta)
        assert val == pytest.approx((1 + 4 * np.pi**2) ** (-beta / 2), rel=1e-12)

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            fn.neg_sobolev_norm(np.zeros((8, 8)), 0.0)

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
    def test_monotone_and_bounded(self, seed, beta):
        f = np.random.default_rng(seed).standard_normal((16, 16))
        a = fn.neg_sobolev_norm(f, beta)
        assert a < fn.neg_sobolev_norm(f, beta * 0.9)
        assert a <= sp.l2_norm(f) * (1 + 1e-12)


class TestTimeHolder:
    def test_constant_trajectory(self, rng):
        f = rng.standard_normal((16, 16))
        t = np.linspace(0, 1, 11)
        val = fn.time_holder_seminorm(t, np.array([f] * len(t)))
        assert val == pytest.approx(fn.neg_sobolev_norm(f), rel=1e-12)

    def test_two_equal_snapshots(self, rng):
        f = rng.standard_normal((8, 8))
        val = fn.time_holder_seminorm([0.0, 0.5], np.array([f, f]))
        assert val == pytest.approx(0.5 * fn.neg_sobolev_norm(f), rel=1e-12)

    def test_linear_closed_form(self, rng):
        a = 1 / 3
        f = rng.standard_normal((16, 16))
        t = np.linspace(0, 1, 129)
        val = fn.time_holder_seminorm(t, t[:, None, None] * f, alpha=a)
        exact = fn.neg_sobolev_norm(f) * (0.5 + 2 / ((1 - a) * (2 - a)))
        assert val == pytest.approx(exact, rel=0.02)

    @pytest.mark.parametrize("kw", [dict(alpha=0.5), dict(alpha=0.0), dict(beta=0.0)])
    def test_rejects_parameters(self, kw):
        with pytest.raises(ValueError):
            fn.time_holder_seminorm([0, 1], np.zeros((2, 8, 8)), **kw)

    def test_rejects_single_sample(self):
        with pytest.raises(ValueError):
            fn.time_holder_seminorm([0.0], np.zeros((1, 8, 8)))


def test_interpolation_constant():
    """||rho||_2 <= C (Fisher^{1/2} + 1) for mass-one nonnegative band-limited densities."""
    for seed, count in ((2024, 400), (7, 200)):
        r = np.random.default_rng(seed)
        for _ in range(count):
            f = band_limited(32, int(r.integers(1, 8)), r) + r.uniform(0, 2)
            rho = f**2
            rho /= rho.mean()
            assert sp.l2_norm(rho) <= C_INTERP * (np.sqrt(fn.fisher_information(rho)) + 1)


class TestDiagnosticsSeries:
    def test_record_and_rows(self):
        s = fn.DiagnosticsSeries()
        s.record(0.0, np.ones((8, 8)), 0.0)
        s.record(0.1, np.full((8, 8), 2.0), 0.3)
        assert len(s) == 2
        assert s.rows()[1][0] == 0.1 and s.rows()[1][1] == 2.0 and s.rows()[1][-1] == 0.3
        again = fn.DiagnosticsSeries.from_rows(s.rows())
        assert again.rows() == s.rows()

    def test_times_increase(self):
        s = fn.DiagnosticsSeries()
        s.record(0.1, np.ones((8, 8)))
        with pytest.raises(ValueError):
            s.record(0.1, np.ones((8, 8)))
