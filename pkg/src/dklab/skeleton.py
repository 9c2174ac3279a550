"""Skeleton equation, control potentials and the rate function.

The skeleton equation is

    d_t rho = Lap rho - div(rho V[rho]) - div(sqrt(rho) g),

and a path rho has rate I(rho) = 1/2 ||sqrt(rho) grad Psi||^2_{L^2 L^2}, where
Psi solves -div(rho grad Psi) = d_t rho + div(rho V[rho]) - Lap rho at each
time. The same number is the supremum over test functions phi of

    F_rho(phi) - 1/2 <rho grad phi, grad phi>,

which :func:`rate_variational` evaluates on a finite Legendre x Fourier basis.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import CubicSpline
from numpy.polynomial import legendre

from . import functionals as fn
from . import spectral as sp
from .interaction import KernelParams, interaction_flux
from .solver import NumericalError

log = logging.getLogger(__name__)


class PathError(ValueError):
    """The stored path cannot support the requested computation."""


@dataclass
class ControlledPath:
    times: np.ndarray
    rho: np.ndarray  # (S, n, n)
    kernel: KernelParams = field(default_factory=KernelParams)
    g: np.ndarray = None  # (S, 2, n, n)
    psi: np.ndarray = None  # (S, n, n)
    rate: float = None
    certified: bool = True
    warnings: list = field(default_factory=list)

    @property
    def n(self):
        return self.rho.shape[-1]

    def control_at(self, t):
        """Control g linearly interpolated in time (for the tilted sampler)."""
        if self.g is None:
            raise PathError("path carries no control; run solve_psi first")
        t = min(max(t, self.times[0]), self.times[-1])
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(i, len(self.times) - 2)
        a = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return (1 - a) * self.g[i] + a * self.g[i + 1]


def _positive(rho):
    return np.maximum(rho, 0.0)


# --------------------------------------------------------------------------
# skeleton solver


def feedback_control(potential):
    """Control g = sqrt(rho) grad Psi(t) for a prescribed potential ``t -> Psi``."""
    def g(t, rho):
        return np.sqrt(_positive(rho))[None] * sp.gradient(potential(t))
    return g


def solve_skeleton(rho0, control=None, kernel=KernelParams(), dt=1e-3, T=0.1, snapshot_every=1):
    """Integrate the skeleton equation with the dk_solver scheme and no noise.

    ``control`` is None (g = 0) or a callable ``(t, rho) -> g``; it is sampled
    at the left end of each step.
    """
    rho = sp.check_finite(rho0, "initial density").copy()
    if np.min(rho) < 0:
        raise ValueError("initial density must be nonnegative")
    n = sp.grid_size(rho)
    nsteps = int(round(T / dt))
    ksq = sp.k_squared(n)

    def g_of(t, r):
        return np.zeros((2, n, n)) if control is None else np.asarray(control(t, r))

    times, snaps, gs = [0.0], [rho.copy()], [g_of(0.0, rho)]
    for i in range(nsteps):
        t = i * dt
        g = g_of(t, rho)
        rhs = rho - dt * sp.divergence(interaction_flux(rho, kernel))
        rhs = rhs - dt * sp.divergence(np.sqrt(_positive(rho))[None] * g)
        rho = sp.from_spectral(sp.to_spectral(rhs) / (1.0 + dt * sp.FOUR_PI2 * ksq), n)
        if not np.all(np.isfinite(rho)):
            raise NumericalError("non-finite density in skeleton solve", step=i + 1)
        k = i + 1
        if k % snapshot_every == 0 or k == nsteps:
            times.append(k * dt)
            snaps.append(rho.copy())
            gs.append(g_of(k * dt, rho))
    path = ControlledPath(np.array(times), np.array(snaps), kernel, g=np.array(gs))
    if np.min(path.rho) < 0:
        path.warnings.append(f"negative density {np.min(path.rho):.3g} on the skeleton path")
    return path


# --------------------------------------------------------------------------
# control potential


@dataclass
class PsiSolution:
    psi: np.ndarray
    residuals: np.ndarray  # H^-1 residual per slice
    iterations: np.ndarray
    converged: np.ndarray
    floored_points: int


def path_residual(times, rho, kernel):
    """r = d_t rho + div(rho V) - Lap rho with centred time differences."""
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise PathError(f"need at least 3 snapshots for time differences, got {len(times)}")
    if np.any(np.diff(times) <= 0):
        raise PathError("snapshot times must be strictly increasing")
    drho = np.gradient(rho, times, axis=0, edge_order=2)
    return drho + sp.divergence(interaction_flux(rho, kernel)) - sp.laplacian(rho)


def _h_minus1(f):
    return np.sqrt(max(sp.inner(f, sp.green_convolve(f)), 0.0))


def _operator_range(f):
    # mean and Nyquist modes are outside the range of div(w grad .) on the grid
    n = sp.grid_size(f)
    fh = sp.to_spectral(f)
    fh[..., 0, 0] = 0
    fh[..., n // 2, :] = 0
    fh[..., :, n // 2] = 0
    return sp.from_spectral(fh, n)


def weighted_poisson(weight, r, tol=1e-10, maxiter=500, x0=None):
    """Solve -div(weight grad psi) = r for mean-zero psi by preconditioned CG.

    The preconditioner is the spectral inverse Laplacian scaled by the mean
    weight; convergence is measured as the H^-1 norm of the residual relative
    to that of r.
    """
    wbar = float(np.mean(weight))
    apply = lambda u: -sp.divergence(weight[None] * sp.gradient(u))
    precond = lambda f: _operator_range(sp.green_convolve(f)) / wbar
    r = _operator_range(r)
    scale = _h_minus1(r)
    psi = np.zeros_like(r) if x0 is None else _operator_range(x0)
    res = r - apply(psi)
    z = precond(res)
    d = z.copy()
    rz = sp.inner(res, z)
    it = 0
    target = tol * scale + 1e-300
    while np.sqrt(max(rz, 0.0)) * np.sqrt(wbar) > target and it < maxiter:
        Ad = apply(d)
        dAd = sp.inner(d, Ad)
        if not dAd > 1e-12 * np.sqrt(sp.inner(d, d) * sp.inner(Ad, Ad)):
            break  # search direction lost to rounding
        alpha = rz / dAd
        psi = psi + alpha * d
        res = res - alpha * Ad
        z = precond(res)
        rz_new = sp.inner(res, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
        it += 1
    psi = psi - np.mean(psi)
    final = _h_minus1(_operator_range(res))
    return psi, final, it, final <= target * 1.0000001 or scale == 0


def solve_psi(times, rho, kernel=KernelParams(), floor=None, tol=1e-10, maxiter=500, mass_tol=1e-8):
    """Per-slice control potential Psi with -div(rho grad Psi) = r (see module doc).

    Densities are floored at ``floor`` (default 1e-6 * mass). Raises PathError
    if the path does not conserve mass, i.e. mean(r) is not ~0.
    """
    rho = np.asarray(rho, dtype=float)
    r = path_residual(times, rho, kernel)
    m = fn.mass(rho)
    drift = np.abs(np.mean(r, axis=(-2, -1)))
    if np.any(drift > mass_tol * np.maximum(1.0, m)):
        raise PathError(f"inconsistent path: mass changes at rate up to {drift.max():.3g}")
    floor = 1e-6 * float(np.mean(m)) if floor is None else floor
    weight = np.maximum(rho, floor)
    floored = int(np.count_nonzero(rho < floor))

    out = np.zeros_like(rho)
    res = np.zeros(len(rho))
    its = np.zeros(len(rho), dtype=int)
    conv = np.zeros(len(rho), dtype=bool)
    prev = None
    for s in range(len(rho)):
        out[s], res[s], its[s], conv[s] = weighted_poisson(weight[s], r[s], tol, maxiter, x0=prev)
        prev = out[s]
    if not conv.all():
        log.warning("solve_psi: %d slices did not converge", int((~conv).sum()))
    return PsiSolution(out, res, its, conv, floored)


def attach_control(path, **kw):
    """Return a copy of ``path`` carrying Psi, g = sqrt(rho) grad Psi and the rate."""
    sol = solve_psi(path.times, path.rho, path.kernel, **kw)
    g = np.sqrt(_positive(path.rho))[:, None] * sp.gradient(sol.psi)
    warnings = list(path.warnings)
    certified = path.certified
    if sol.floored_points:
        warnings.append(f"density floored at {sol.floored_points} points")
        certified = False
    if not sol.converged.all():
        warnings.append(f"{int((~sol.converged).sum())} Psi slices not converged")
        certified = False
    if np.min(path.rho) < 0:
        certified = False
    out = replace(path, g=g, psi=sol.psi, warnings=warnings, certified=certified)
    out.rate = rate_from_control(out)
    if not certified:
        log.warning("rate %.6g tagged NON-CERTIFIED: %s", out.rate, "; ".join(warnings))
    return out


def manufactured_path(rho_fn, times, kernel=KernelParams(), **kw):
    """Sample an analytic density ``rho_fn(t) -> field`` and attach its control."""
    times = np.asarray(times, dtype=float)
    rho = np.array([rho_fn(t) for t in times])
    return attach_control(ControlledPath(times, rho, kernel), **kw)


# --------------------------------------------------------------------------
# rate function


def _trapezoid_weights(t):
    dt = np.diff(t)
    w = np.zeros_like(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def rate_from_control(path):
    """1/2 int int rho |grad Psi|^2 with trapezoidal time quadrature."""
    if path.psi is None:
        raise PathError("rate_from_control needs psi; run solve_psi/attach_control first")
    gp = sp.gradient(path.psi)
    dens = 0.5 * np.mean(_positive(path.rho) * np.sum(gp * gp, axis=1), axis=(-2, -1))
    return float(_trapezoid_weights(np.asarray(path.times, dtype=float)) @ dens)


def control_energy(path):
    """1/2 ||g||^2_{L^2 L^2}."""
    dens = 0.5 * np.mean(np.sum(path.g * path.g, axis=1), axis=(-2, -1))
    return float(_trapezoid_weights(np.asarray(path.times, dtype=float)) @ dens)


def _full_coefficients(fhat, m1, m2):
    """Coefficients at integer lattice points (m1, m2) from rfft-layout arrays."""
    n = fhat.shape[-2]
    pos = m2 >= 0
    i1 = np.where(pos, m1, -m1) % n
    i2 = np.where(pos, m2, -m2)
    c = fhat[..., i1, i2]
    return np.where(pos, c, np.conj(c))


def _real_fourier_basis(mx):
    half = [(k1, k2) for k1 in range(-mx, mx + 1) for k2 in range(-mx, mx + 1)
            if 0 < k1 * k1 + k2 * k2 <= mx * mx and (k1 > 0 or (k1 == 0 and k2 > 0))]
    ks = np.array(half + [(-a, -b) for a, b in half])
    h = len(half)
    # real basis sqrt2 cos = (e_k + e_-k)/sqrt2, sqrt2 sin = (e_k - e_-k)/(i sqrt2)
    U = np.zeros((2 * h, 2 * h), dtype=complex)
    idx = np.arange(h)
    U[idx, 2 * idx] = 1 / np.sqrt(2)
    U[idx + h, 2 * idx] = 1 / np.sqrt(2)
    U[idx, 2 * idx + 1] = -1j / np.sqrt(2)
    U[idx + h, 2 * idx + 1] = 1j / np.sqrt(2)
    return ks, U


def spline_quadrature_weights(t, m_t):
    """Weights w with sum_s w[s] y_s = int spline(y)(t) x (P_l, P_l', P_l P_m) dt.

    ``spline(y)`` is the not-a-knot cubic spline through the samples (a
    plain linear interpolant for fewer than 4 samples); each integral is
    exact for that interpolant, by Gauss-Legendre on every interval. The
    Legendre polynomials live on [t_0, t_S] mapped to [-1, 1]. Returns
    (wP (S, L), wdP (S, L), wPP (S, L, L), (P_l(-1), P_l(1))).
    """
    S, L = len(t), m_t + 1
    T = t[-1] - t[0]
    eye = np.eye(L)
    basis = [eye[l] for l in range(L)]
    dbasis = [legendre.legder(c) * (2 / T) for c in basis]
    if S >= 4:
        coef = CubicSpline(t, np.eye(S), axis=0).c  # (4, S-1, S), highest power first
    else:
        coef = np.zeros((4, S - 1, S))
        h = np.diff(t)
        for j in range(S - 1):
            coef[2, j, j], coef[2, j, j + 1] = -1 / h[j], 1 / h[j]
            coef[3, j, j] = 1.0
    xg, wg = legendre.leggauss(L + 2)  # exact to degree 2L + 3 >= cubic x P_l P_m
    h = np.diff(t)
    u = 0.5 * (xg[None, :] + 1) * h[:, None]  # (J, G) offsets within each interval
    wq = 0.5 * wg[None, :] * h[:, None]
    tau = 2 * (t[:-1, None] + u - t[0]) / T - 1
    Pq = np.stack([legendre.legval(tau, c) for c in basis], axis=-1)  # (J, G, L)
    dPq = np.stack([legendre.legval(tau, c) for c in dbasis], axis=-1)
    powers = np.stack([u**3, u**2, u, np.ones_like(u)]) * wq  # matches coef's first axis
    # per-interval moments, then contract with the spline coefficients of the unit samples
    mP = np.einsum("pjg,jgl->pjl", powers, Pq)
    mdP = np.einsum("pjg,jgl->pjl", powers, dPq)
    mPP = np.einsum("pjg,jgl,jgm->pjlm", powers, Pq, Pq)
    wP = np.tensordot(coef, mP, axes=([0, 1], [0, 1]))
    wdP = np.tensordot(coef, mdP, axes=([0, 1], [0, 1]))
    wPP = np.tensordot(coef, mPP, axes=([0, 1], [0, 1]))
    P_end = (np.array([legendre.legval(-1.0, c) for c in basis]),
             np.array([legendre.legval(1.0, c) for c in basis]))
    return wP, wdP, wPP, P_end


def rate_variational(times, rho, kernel=KernelParams(), m_t=8, m_x=8, ridge=1e-12):
    """max of F_rho(phi) - 1/2 <rho grad phi, grad phi> over a finite test space.

    The test space is span{P_l(t)} (Legendre, degree <= m_t) times the real
    Fourier modes with 0 < |k| <= m_x. The concave quadratic is maximized in
    closed form as b^T A^{-1} b / 2; a singular Gram matrix A gets a ridge
    shift, logged. Nested bases give nondecreasing values.

    Time integrals are exact for the cubic-spline interpolant of the stored
    snapshots, so the snapshot spacing must resolve the decay time
    1/(4 pi^2 m_x^2) of the highest test mode.
    """
    t = np.asarray(times, dtype=float)
    rho = np.asarray(rho, dtype=float)
    n = rho.shape[-1]
    if len(t) < 2:
        raise PathError("rate_variational needs at least 2 snapshots")
    if 2 * m_x >= n // 2:
        raise sp.ConfigurationError(f"spatial order m_x={m_x} needs n > 4 m_x (n={n})")
    ks, U = _real_fourier_basis(m_x)
    if len(ks) == 0:
        return 0.0

    wP, wdP, wPP, P_end = spline_quadrature_weights(t, m_t)

    rhat = sp.to_spectral(rho)
    qhat = sp.to_spectral(sp.divergence(interaction_flux(rho, kernel)))
    # <f, e_k> = fhat(-k); real-basis projections (S, A)
    proj = lambda fh: (_full_coefficients(fh, -ks[:, 0], -ks[:, 1]) @ U).real
    pr = proj(rhat)
    pq = proj(qhat)
    lam = sp.FOUR_PI2 * np.repeat(np.sum(ks[: len(ks) // 2] ** 2, axis=1), 2)

    b = (np.outer(P_end[1], pr[-1]) - np.outer(P_end[0], pr[0])
         - wdP.T @ pr
         + wP.T @ (pr * lam + pq))

    # Gram of rho-weighted gradients, complex lattice form then rotated to real
    d1 = ks[None, :, 0] - ks[:, None, 0]
    d2 = ks[None, :, 1] - ks[:, None, 1]
    kk = sp.FOUR_PI2 * (ks @ ks.T)
    L, M = m_t + 1, len(ks)
    wpp = wPP.reshape(len(t), L * L)
    # entries depend on rho only through rho_hat(k' - k), so integrate in time first
    rbar = (wpp.T @ rhat.reshape(len(t), -1)).reshape((L * L,) + rhat.shape[1:])
    Gc = kk * _full_coefficients(rbar, d1, d2)  # 4pi^2 k.k' int P_l P_m rho_hat(k' - k)
    A = (U.T @ Gc @ np.conj(U)).real.reshape(L, L, M, M)
    N = b.size
    A = A.transpose(0, 2, 1, 3).reshape(N, N)
    A = 0.5 * (A + A.T)
    bv = b.reshape(N)

    shift = 0.0
    while True:
        try:
            c = sla.solve(A + shift * np.eye(N), bv, assume_a="pos")
            break
        except (np.linalg.LinAlgError, sla.LinAlgError):
            shift = max(shift * 10, ridge * np.trace(A) / N)
            log.warning("rate_variational: Gram matrix singular, ridge shift %.3g", shift)
    return float(0.5 * bv @ c)


# --------------------------------------------------------------------------
# weak-strong stability


@dataclass
class ContractionReport:
    sizes: list
    ratios: list
    bound: float
    passed: bool
    max_distance: list = field(default_factory=list)


def l1_distance_series(path_a, path_b):
    return np.mean(np.abs(path_a.rho - path_b.rho), axis=(-2, -1))


def contraction_check(rho0_a, rho0_b, control=None, kernel=KernelParams(), dt=1e-3, T=0.1, bound=3.0):
    """sup_t ||rho_a - rho_b||_{L^1} / ||rho_a(0) - rho_b(0)||_{L^1} for one pair."""
    pa = solve_skeleton(rho0_a, control, kernel, dt, T)
    pb = solve_skeleton(rho0_b, control, kernel, dt, T)
    dist = l1_distance_series(pa, pb)
    d0 = float(np.mean(np.abs(rho0_a - rho0_b)))
    if d0 == 0:
        return ContractionReport([0.0], [0.0], bound, bool(dist.max() <= 1e-12), [float(dist.max())])
    ratio = float(dist.max() / d0)
    return ContractionReport([d0], [ratio], bound, ratio <= bound, [float(dist.max())])


def contraction_sweep(rho0, direction, sizes=(1e-1, 1e-2, 1e-3), control=None, kernel=KernelParams(),
                      dt=1e-3, T=0.1, bound=3.0):
    """Perturb rho0 by size * direction (direction should be mean-zero)."""
    base = solve_skeleton(rho0, control, kernel, dt, T)
    ratios, dmax = [], []
    for s in sizes:
        pert = solve_skeleton(rho0 + s * direction, control, kernel, dt, T)
        d0 = float(np.mean(np.abs(s * direction)))
        d = l1_distance_series(base, pert)
        ratios.append(float(d.max() / d0))
        dmax.append(float(d.max()))
    return ContractionReport(list(sizes), ratios, bound, bool(max(ratios) <= bound), dmax)


def c0_diagnostic(path, exponents=(2.5, 3.0, 4.0)):
    """sup_t ||rho||_{W^{1,p}} for each p (advisory C0-class metadata)."""
    return {p: float(np.max(fn.sobolev_w1p_norm(path.rho, p))) for p in exponents}
