"""Keller-Segel / Biot-Savart interaction V[rho] = -(kappa1 + kappa2 J) grad(G * rho)."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import spectral as sp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelParams:
    """Interaction weights; ``-kappa1 > 0`` is the attractive Keller-Segel case.

    ``smoothing`` is the width of an optional Gaussian mollification of the
    Green function, used only in convergence studies.
    """

    kappa1: float = 0.0
    kappa2: float = 0.0
    smoothing: float = 0.0

    def __post_init__(self):
        for name in ("kappa1", "kappa2", "smoothing"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.smoothing < 0:
            raise ValueError("smoothing must be nonnegative")

    @property
    def is_zero(self):
        return self.kappa1 == 0 and self.kappa2 == 0


def interaction_field(rho, p):
    du = sp.gradient(sp.green_convolve(rho, p.smoothing))
    a, b = du[..., 0, :, :], du[..., 1, :, :]
    # J (a, b) = (-b, a)
    return -np.stack([p.kappa1 * a - p.kappa2 * b, p.kappa1 * b + p.kappa2 * a], axis=-3)


def interaction_divergence(rho, p):
    """Exact divergence kappa1 (rho - mean rho); the rotated part is divergence free."""
    if p.smoothing > 0:
        return p.kappa1 * sp.laplacian(-sp.green_convolve(rho, p.smoothing))
    return p.kappa1 * (rho - np.mean(rho, axis=(-2, -1), keepdims=True))


def interaction_flux(rho, p):
    """Dealiased product rho V[rho]."""
    if p.is_zero:
        return np.zeros(rho.shape[:-2] + (2,) + rho.shape[-2:])
    return sp.dealias(rho[..., None, :, :] * interaction_field(rho, p))


# --------------------------------------------------------------------------
# Gagliardo-Nirenberg constant


def gn_ratio(f):
    """||f||_{L^4} / (||grad f||^{1/2} ||f||^{1/2}) on the unit torus."""
    g = sp.gradient(f)
    m4 = np.mean(f**4)
    m2 = np.mean(f**2)
    gg = np.mean(np.sum(g * g, axis=0))
    return m4**0.25 / (gg**0.25 * m2**0.25)


def _gn_objective(n):
    mask = sp.dealias_mask(n) & (sp.k_squared(n) > 0)

    def project(x):
        f = x.reshape(n, n)
        return sp.from_spectral(np.where(mask, sp.to_spectral(f), 0.0), n)

    def fun(x):
        f = project(x)
        m4 = np.mean(f**4)
        m2 = np.mean(f**2)
        lap = sp.laplacian(f)
        gg = -np.mean(f * lap)
        val = 0.25 * (np.log(m4) - np.log(gg) - np.log(m2))
        grad = (f**3 / m4 + lap / (2 * gg) - f / (2 * m2)) / f.size
        return -val, -project(grad).ravel()

    return fun, project


def _random_start(grid, rng):
    x1, x2 = grid.coords()
    f = np.zeros((grid.n, grid.n))
    for _ in range(rng.integers(1, 4)):
        c = rng.random(2)
        w = rng.uniform(0.04, 0.25)
        d1 = (x1 - c[0] + 0.5) % 1.0 - 0.5
        d2 = (x2 - c[1] + 0.5) % 1.0 - 0.5
        f += rng.uniform(0.5, 1.5) * np.exp(-(d1**2 + d2**2) / (2 * w * w))
    return f + 0.05 * rng.standard_normal(f.shape)


def estimate_gn_constant(grid, trials=8, seed=0, maxiter=300):
    """Lower estimate of the torus Gagliardo-Nirenberg ratio sup over mean-zero fields.

    Runs ``trials`` restarts of projected quasi-Newton ascent, restart ``i``
    seeded by ``(seed, i)``, and returns the running maximum, so the estimate
    is nondecreasing in ``trials``. Constants are excluded (they make the
    leading ratio unbounded); the band limit is the two-thirds rule.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    x1, _ = grid.coords()
    best = gn_ratio(np.sqrt(2) * np.cos(sp.TWO_PI * x1))
    fun, project = _gn_objective(grid.n)
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        x0 = project(_random_start(grid, rng).ravel()).ravel()
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
        best = max(best, gn_ratio(project(res.x)))
    return float(best)


@dataclass(frozen=True)
class SmallnessVerdict:
    passed: bool
    margin: float
    bound: float

    def __str__(self):
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag}: -kappa1 < 4/(C_GN m0) = {self.bound:.6g} (margin {self.margin:.6g}); "
                "C_GN is the leading-ratio estimate, verdicts near the boundary are approximate")


def smallness_check(p, mass0, c_gn):
    """Advisory check of -kappa1 < 4 / (C_GN * mass0); logs and returns the verdict."""
    if mass0 <= 0 or c_gn <= 0:
        raise ValueError("mass and C_GN must be positive")
    bound = 4.0 / (c_gn * mass0)
    verdict = SmallnessVerdict(passed=bool(-p.kappa1 < bound), margin=bound + p.kappa1, bound=bound)
    log.info("smallness check %s", verdict)
    return verdict
