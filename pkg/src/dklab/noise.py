"""Square-root mollifier, truncated spectral noise and the Girsanov shift.

The noise is realised in the real orthonormal basis e_0 = 1,
sqrt(2) cos(2 pi k.x), sqrt(2) sin(2 pi k.x) for k in a half lattice with
|k| <= K. Each basis element carries an independent two-dimensional
Brownian increment.

Random numbers are addressed by (seed, replica, step): every increment is
drawn from a fresh Philox generator keyed by (seed, replica) with the step
index in its counter, so replicas can be generated in any order or on any
worker and still reproduce bit for bit.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import spectral as sp


@dataclass(frozen=True)
class MollifierParams:
    """s_eta(z) = sqrt(z + eta) - sqrt(eta); eta = 0 is the exact square root."""

    eta: float = 0.0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")

    def value(self, z):
        return np.sqrt(z + self.eta) - np.sqrt(self.eta)

    def derivative(self, z):
        with np.errstate(divide="ignore"):
            return 0.5 / np.sqrt(z + self.eta)

    @property
    def derivative_sup(self):
        """sup_z s'_eta(z) = 1 / (2 sqrt(eta)); infinite for eta = 0."""
        return np.inf if self.eta == 0 else 0.5 / np.sqrt(self.eta)


def mollifier_eval(m, z):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("mollifier is defined for z >= 0 only; clamp first")
    return m.value(z), m.derivative(z)


@dataclass(frozen=True)
class ModeSet:
    K: int
    modes: tuple  # lattice points k with |k| <= K
    half: tuple  # one representative of each +-k pair, k != 0

    @property
    def F1K(self):
        return len(self.modes)

    @property
    def NK(self):
        return sum(k1 * k1 + k2 * k2 for k1, k2 in self.modes)

    @property
    def size(self):
        """Number of real basis functions (equals F1K)."""
        return 1 + 2 * len(self.half)

    @property
    def gradient_energy(self):
        """sum_j ||grad e_j||_inf^2 = 4 pi^2 N_K on the unit torus."""
        return sp.FOUR_PI2 * self.NK


@lru_cache(maxsize=None)
def mode_set(K):
    if K < 0 or int(K) != K:
        raise ValueError(f"cutoff must be a nonnegative integer, got {K}")
    K = int(K)
    modes = tuple(
        (k1, k2) for k1 in range(-K, K + 1) for k2 in range(-K, K + 1) if k1 * k1 + k2 * k2 <= K * K
    )
    half = tuple((k1, k2) for k1, k2 in modes if k1 > 0 or (k1 == 0 and k2 > 0))
    return ModeSet(K, modes, half)


@lru_cache(maxsize=32)
def real_basis(K, n):
    """Array (F1K, n, n) of the real basis functions sampled on the grid."""
    if K > n // 2 - 1:
        raise sp.ConfigurationError(f"cutoff K={K} is not resolved on an n={n} grid (need K < n/2)")
    ms = mode_set(K)
    x1, x2 = sp.Grid(n).coords()
    out = [np.ones((n, n))]
    for k1, k2 in ms.half:
        phase = sp.TWO_PI * (k1 * x1 + k2 * x2)
        out.append(np.sqrt(2) * np.cos(phase))
        out.append(np.sqrt(2) * np.sin(phase))
    basis = np.array(out)
    basis.setflags(write=False)
    return basis


@dataclass(frozen=True)
class NoiseIncrement:
    """Brownian increments, shape (..., F1K, 2), over a step of length dt."""

    values: np.ndarray
    dt: float
    K: int
    tag: tuple = field(default=())


class NoiseStream:
    """Counter-addressed Gaussian stream for one replica."""

    def __init__(self, seed, replica=0):
        self.seed = int(seed)
        self.replica = int(replica)

    def generator(self, step):
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.replica], dtype=np.uint64)
        counter = np.array([0, int(step), 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def increment(self, ms, dt, step):
        return sample_increment(ms, dt, self.generator(step), tag=(self.seed, self.replica, int(step)))


def sample_increment(ms, dt, rng, tag=()):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    values = np.sqrt(dt) * rng.standard_normal((ms.size, 2))
    return NoiseIncrement(values, float(dt), ms.K, tag)


def ensemble_increment(ms, dt, seed, replicas, step):
    """Stack the increments of several replicas at one step, shape (R, F1K, 2)."""
    vals = [NoiseStream(seed, r).increment(ms, dt, step).values for r in replicas]
    return NoiseIncrement(np.array(vals), float(dt), ms.K, (seed, "ensemble", int(step)))


def synthesize_noise_field(inc, n):
    """W(x) = sum_j e_j(x) dB_j as a vector field of shape (..., 2, n, n)."""
    basis = real_basis(inc.K, n).reshape(-1, n * n)
    vals = np.swapaxes(inc.values, -1, -2)
    return (vals @ basis).reshape(vals.shape[:-1] + (n, n))


def basis_coefficients(g, K):
    """<g, e_j> for each real basis element, shape (..., F1K, 2)."""
    n = sp.grid_size(g)
    basis = real_basis(K, n).reshape(-1, n * n)
    c = g.reshape(g.shape[:-2] + (n * n,)) @ basis.T / n**2
    return np.swapaxes(c, -1, -2)


def girsanov_shift(inc, g, epsilon, dt=None):
    """Shift the increment by eps^{-1/2} <g, e_j> dt.

    ``inc`` holds the increments sampled under the tilted measure Q; the
    returned increment drives the original equation, which picks up the
    control drift -div(s_eta(rho) P_K g). The log-weight increment is that of
    log dQ/dP = M - <M>/2 written in the Q-increments:
    eps^{-1/2} sum c_j . dB_j + (1/2) eps^{-1} sum |c_j|^2 dt.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    dt = inc.dt if dt is None else dt
    c = basis_coefficients(g, inc.K)
    shift = c * (dt / np.sqrt(epsilon))
    qv = quadratic_variation_increment(c, epsilon, dt)
    dlog = np.sum(c * inc.values, axis=(-2, -1)) / np.sqrt(epsilon) + 0.5 * qv
    return NoiseIncrement(inc.values + shift, inc.dt, inc.K, inc.tag), dlog


def quadratic_variation_increment(coeffs, epsilon, dt):
    """Increment of <M>: eps^{-1} sum_j |<g, e_j>|^2 dt."""
    return np.sum(coeffs * coeffs, axis=(-2, -1)) * dt / epsilon
