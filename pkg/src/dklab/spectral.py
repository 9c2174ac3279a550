"""Pseudo-spectral operators on the unit torus [0, 1)^2.

Fields are plain numpy arrays whose last two axes are the (x1, x2) grid;
vector fields carry an extra component axis of length 2 just before them.
Any leading axes are treated as a batch, so a stack of replicas can be
pushed through every operator at once.

Fourier coefficients follow f(x) = sum_k fhat(k) exp(2 pi i k.x), i.e.
``fhat = rfft2(f) / n**2``; the mean mode therefore equals the grid average
and -Laplacian acts as 4 pi^2 |k|^2.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi
FOUR_PI2 = 4.0 * np.pi**2


class ConfigurationError(ValueError):
    """Raised when operator parameters are incompatible with the grid."""


@dataclass(frozen=True)
class Grid:
    """Uniform n x n grid on the unit torus."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8 or self.n % 2:
            raise ConfigurationError(f"grid size must be an even integer >= 8, got {self.n}")

    @property
    def spacing(self):
        return 1.0 / self.n

    @property
    def weight(self):
        """Quadrature weight of a single grid point."""
        return 1.0 / self.n**2

    def coords(self):
        """Return the meshgrid (x1, x2), indexed so that ``f[i, j] = f(i/n, j/n)``."""
        x = np.arange(self.n) / self.n
        return np.meshgrid(x, x, indexing="ij")

    def zeros(self, batch=()):
        return np.zeros(tuple(batch) + (self.n, self.n))


# --------------------------------------------------------------------------
# wavenumber tables (immutable once built, so safe to share across threads)


def _frozen(a):
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def wavenumbers(n):
    """Integer wavenumbers (k1, k2) broadcastable to the rfft2 layout (n, n//2 + 1)."""
    k1 = np.fft.fftfreq(n, d=1.0 / n).round().astype(np.int64)[:, None]
    k2 = np.arange(n // 2 + 1, dtype=np.int64)[None, :]
    return _frozen(k1), _frozen(k2)


@lru_cache(maxsize=None)
def _k_squared(n):
    k1, k2 = wavenumbers(n)
    return _frozen((k1**2 + k2**2).astype(float))


@lru_cache(maxsize=None)
def _derivative_multipliers(n):
    # Nyquist rows/columns have no real odd-derivative partner and are zeroed.
    k1, k2 = wavenumbers(n)
    d1 = np.where(np.abs(k1) == n // 2, 0.0, TWO_PI * k1) * np.ones_like(k2)
    d2 = np.where(k2 == n // 2, 0.0, TWO_PI * k2) * np.ones_like(k1)
    return _frozen(1j * d1), _frozen(1j * d2)


@lru_cache(maxsize=None)
def _green_multiplier(n, smoothing):
    ksq = _k_squared(n)
    with np.errstate(divide="ignore"):
        mult = np.where(ksq > 0, 1.0 / (FOUR_PI2 * ksq), 0.0)
    if smoothing > 0:
        mult = mult * np.exp(-(smoothing**2) * FOUR_PI2 * ksq)
    return _frozen(mult)


@lru_cache(maxsize=None)
def _rfft_weights(n):
    # multiplicity of each rfft column in the full lattice
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return _frozen(w)


@lru_cache(maxsize=None)
def mode_ball_mask(n, K):
    """Boolean mask of the rfft coefficients with Euclidean |k| <= K."""
    return _frozen(_k_squared(n) <= K * K + 1e-9)


@lru_cache(maxsize=None)
def dealias_mask(n):
    """Two-thirds rule: keep |k1|, |k2| < n/3."""
    k1, k2 = wavenumbers(n)
    return _frozen((3 * np.abs(k1) < n) & (3 * k2 < n))


# --------------------------------------------------------------------------
# transforms


def grid_size(f):
    n = f.shape[-1]
    if f.shape[-2] != n:
        raise ConfigurationError(f"fields must be square, got shape {f.shape[-2:]}")
    return n


def to_spectral(f):
    """Normalized forward transform; the (0, 0) entry is the grid mean."""
    n = grid_size(f)
    return sfft.rfft2(f, axes=(-2, -1)) / n**2


def from_spectral(fhat, n):
    return sfft.irfft2(fhat * n**2, s=(n, n), axes=(-2, -1))


def check_finite(f, name="field"):
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        bad = np.argwhere(~np.isfinite(f))
        shown = ", ".join(str(tuple(int(i) for i in idx)) for idx in bad[:8])
        more = "" if len(bad) <= 8 else f" (+{len(bad) - 8} more)"
        raise ValueError(f"{name} has non-finite entries at {shown}{more}")
    return f


def transform_roundtrip(f):
    """Forward then inverse transform; identity up to rounding for finite input."""
    f = check_finite(f)
    return from_spectral(to_spectral(f), grid_size(f))


# --------------------------------------------------------------------------
# differential operators


def gradient(f):
    n = grid_size(f)
    fhat = to_spectral(f)
    d1, d2 = _derivative_multipliers(n)
    return np.stack([from_spectral(d1 * fhat, n), from_spectral(d2 * fhat, n)], axis=-3)


def divergence(v):
    n = grid_size(v)
    d1, d2 = _derivative_multipliers(n)
    vhat = to_spectral(v)
    out = d1 * vhat[..., 0, :, :] + d2 * vhat[..., 1, :, :]
    out[..., 0, 0] = 0.0
    return from_spectral(out, n)


def curl(v):
    """Scalar curl d1 v2 - d2 v1."""
    n = grid_size(v)
    d1, d2 = _derivative_multipliers(n)
    vhat = to_spectral(v)
    return from_spectral(d1 * vhat[..., 1, :, :] - d2 * vhat[..., 0, :, :], n)


def laplacian(f):
    n = grid_size(f)
    return from_spectral(-FOUR_PI2 * _k_squared(n) * to_spectral(f), n)


def green_convolve(f, smoothing=0.0):
    """Mean-zero solution u of -Laplacian u = f - mean(f).

    ``smoothing`` > 0 applies the Gaussian damping exp(-smoothing^2 4 pi^2 |k|^2),
    i.e. convolution of the Green function with a heat-kernel mollifier.
    """
    n = grid_size(f)
    return from_spectral(_green_multiplier(n, float(smoothing)) * to_spectral(f), n)


def project_modes(f, K):
    """Zero every Fourier coefficient with Euclidean |k| > K."""
    n = grid_size(f)
    if K < 0 or K > n // 2 - 1:
        raise ConfigurationError(f"cutoff K={K} must satisfy 0 <= K <= n/2 - 1 = {n // 2 - 1}")
    return from_spectral(np.where(mode_ball_mask(n, K), to_spectral(f), 0.0), n)


def dealias(f):
    n = grid_size(f)
    return from_spectral(np.where(dealias_mask(n), to_spectral(f), 0.0), n)


# --------------------------------------------------------------------------
# norms


def inner(f, g):
    """L^2 inner product on the unit torus (grid average of f*g)."""
    return np.mean(f * g, axis=(-2, -1))


def l2_norm(f):
    return np.sqrt(np.mean(f * f, axis=(-2, -1)))


def spectral_sum(weights, fhat):
    """sum over the full lattice of weights(k) |fhat(k)|^2 for rfft-layout arrays."""
    n = 2 * (fhat.shape[-1] - 1)
    return np.sum(_rfft_weights(n) * weights * np.abs(fhat) ** 2, axis=(-2, -1))


def coefficient_norm(f):
    """l^2 norm of the Fourier coefficients (equal to l2_norm by Parseval)."""
    n = grid_size(f)
    return np.sqrt(spectral_sum(np.ones((1, n // 2 + 1)), to_spectral(f)))


def k_squared(n):
    return _k_squared(n)
