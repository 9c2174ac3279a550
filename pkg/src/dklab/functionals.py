"""Scalar functionals of densities and trajectories.

Negative density values are clamped to zero inside the entropy and Fisher
functionals only; the stored field is never modified. Use
:func:`negative_count` to record how many points were clamped.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import spectral as sp

DEFAULT_SOBOLEV_ORDER = 3.5
DEFAULT_HOLDER_EXPONENT = 1.0 / 3.0


def mass(rho):
    return np.mean(rho, axis=(-2, -1))


def negative_count(rho):
    return np.count_nonzero(np.asarray(rho) < 0, axis=(-2, -1))


def entropy_density(z):
    """Psi(z) = z log z - z with Psi(0) = 0, for z >= 0."""
    z = np.asarray(z, dtype=float)
    safe = np.where(z > 0, z, 1.0)
    return np.where(z > 0, z * np.log(safe) - z, 0.0)


def entropy_functional(rho):
    return np.mean(entropy_density(np.maximum(rho, 0.0)), axis=(-2, -1))


def fisher_information(rho):
    """||grad sqrt(rho)||^2_{L^2} from the spectral gradient of the pointwise root."""
    g = sp.gradient(np.sqrt(np.maximum(rho, 0.0)))
    return np.mean(np.sum(g * g, axis=-3), axis=(-2, -1))


def neg_sobolev_norm(f, beta=DEFAULT_SOBOLEV_ORDER):
    if beta <= 0:
        raise ValueError(f"Sobolev order must be positive, got {beta}")
    n = sp.grid_size(f)
    w = (1.0 + sp.FOUR_PI2 * sp.k_squared(n)) ** (-beta)
    return np.sqrt(sp.spectral_sum(w, sp.to_spectral(f)))


def _neg_sobolev_features(fields, beta):
    # real feature vectors whose Euclidean distance is the H^-beta distance
    fields = np.asarray(fields, dtype=float)
    n = sp.grid_size(fields)
    w = (1.0 + sp.FOUR_PI2 * sp.k_squared(n)) ** (-beta) * sp._rfft_weights(n)
    c = sp.to_spectral(fields) * np.sqrt(w)
    c = c.reshape(len(fields), -1)
    return np.concatenate([c.real, c.imag], axis=1)


def _trapezoid_weights(t):
    dt = np.diff(t)
    w = np.zeros_like(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def time_holder_seminorm(times, fields, alpha=DEFAULT_HOLDER_EXPONENT, beta=DEFAULT_SOBOLEV_ORDER):
    """Discrete W^{alpha,1}([0,T]; H^-beta) norm of a sampled trajectory.

    Sums ||u_i|| w_i plus the off-diagonal double sum
    ||u_i - u_j|| w_i w_j / |t_i - t_j|^(1+alpha) with trapezoid weights w.
    The diagonal blocks, where the kernel is singular, are integrated
    exactly under a locally linear model using the centred difference
    quotient, which removes the O(dt^(1-alpha)) bias of the bare sum.
    """
    t = np.asarray(times, dtype=float)
    if len(t) < 2:
        raise ValueError("time_holder_seminorm needs at least 2 samples")
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")
    if beta <= 0:
        raise ValueError(f"Sobolev order must be positive, got {beta}")
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample times must be strictly increasing")

    feats = _neg_sobolev_features(fields, beta)
    w = _trapezoid_weights(t)
    norms = np.linalg.norm(feats, axis=1)
    dist = squareform(pdist(feats))

    gap = np.abs(t[:, None] - t[None, :])
    np.fill_diagonal(gap, 1.0)
    kernel = dist / gap ** (1.0 + alpha)
    np.fill_diagonal(kernel, 0.0)
    off_diag = w @ kernel @ w

    idx = np.arange(len(t))
    lo, hi = np.maximum(idx - 1, 0), np.minimum(idx + 1, len(t) - 1)
    slope = dist[lo, hi] / (t[hi] - t[lo])
    diag = np.sum(slope * 2.0 * w ** (2.0 - alpha) / ((1.0 - alpha) * (2.0 - alpha)))

    return float(norms @ w + off_diag + diag)


def sobolev_w1p_norm(rho, p):
    """||rho||_{L^p} + ||grad rho||_{L^p} on the grid (C0-class diagnostic)."""
    g = sp.gradient(rho)
    gn = np.sqrt(np.sum(g * g, axis=-3))
    lp = lambda f: np.mean(np.abs(f) ** p, axis=(-2, -1)) ** (1.0 / p)
    return lp(rho) + lp(gn)


@dataclass
class DiagnosticsSeries:
    times: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    fisher: list = field(default_factory=list)
    min_density: list = field(default_factory=list)
    l2_norm: list = field(default_factory=list)
    entropy_martingale: list = field(default_factory=list)

    COLUMNS = ("t", "mass", "entropy", "fisher", "min_density", "l2", "entropy_martingale")

    def record(self, t, rho, martingale=0.0):
        if self.times and t <= self.times[-1]:
            raise ValueError(f"diagnostic times must increase: {t} after {self.times[-1]}")
        self.times.append(float(t))
        self.mass.append(float(mass(rho)))
        self.entropy.append(float(entropy_functional(rho)))
        self.fisher.append(float(fisher_information(rho)))
        self.min_density.append(float(np.min(rho)))
        self.l2_norm.append(float(sp.l2_norm(rho)))
        self.entropy_martingale.append(float(martingale))

    def rows(self):
        return list(
            zip(self.times, self.mass, self.entropy, self.fisher,
                self.min_density, self.l2_norm, self.entropy_martingale)
        )

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_rows(cls, rows):
        out = cls()
        for r in rows:
            for name, v in zip(
                ("times", "mass", "entropy", "fisher", "min_density", "l2_norm", "entropy_martingale"), r
            ):
                getattr(out, name).append(float(v))
        return out
