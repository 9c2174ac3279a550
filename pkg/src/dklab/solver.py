"""Semi-implicit Euler-Maruyama integration of the regularized Dean-Kawasaki SPDE.

The Ito form advanced here is

    d rho = [Lap rho - div(rho V[rho]) + (eps F_{1,K} / 2) div(s'(rho)^2 grad rho)] dt
            - sqrt(eps) div(s(rho) dW_K)

with the Laplacian implicit and everything else explicit. The Ito
correction is a variable-coefficient diffusion; its largest coefficient is
added implicitly and subtracted explicitly (a constant-coefficient
stabilization), which keeps the step unconditionally stable in that term
without changing consistency. Nonlinearities are evaluated at max(rho, 0);
the state itself is never clipped, so mass is conserved to rounding.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import functionals as fn
from . import noise as nz
from . import spectral as sp
from .interaction import KernelParams, interaction_flux

OK = "OK"
FAILED_POSITIVITY = "FAILED-POSITIVITY"

# floor for s'(rho)^2 = 1/(4 rho) when eta = 0 (experimental regime)
_VACUUM_FLOOR = 1e-8


class NumericalError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class SdeParams:
    epsilon: float
    K: int
    eta: float
    dt: float
    T: float
    n: int = 32
    kernel: KernelParams = field(default_factory=KernelParams)
    seed: int = 0
    negativity_tolerance: float = 0.5
    snapshot_every: int = 1
    diagnostics_every: int = 1
    stabilize: bool = True

    def __post_init__(self):
        errors = []
        if not self.epsilon > 0:
            errors.append("epsilon > 0 required")
        if not self.dt > 0:
            errors.append("dt > 0 required")
        if not self.T >= self.dt:
            errors.append("T >= dt required")
        if self.eta < 0:
            errors.append("eta >= 0 required")
        if self.K < 0 or self.K >= self.n // 2:
            errors.append(f"0 <= K < n/2 required (K={self.K}, n={self.n})")
        if self.snapshot_every < 1 or self.diagnostics_every < 1:
            errors.append("strides must be >= 1")
        if errors:
            raise sp.ConfigurationError("; ".join(errors))
        sp.Grid(self.n)

    @property
    def grid(self):
        return sp.Grid(self.n)

    @property
    def mollifier(self):
        return nz.MollifierParams(self.eta)

    @property
    def modes(self):
        return nz.mode_set(self.K)

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class Trajectory:
    times: np.ndarray  # snapshot times
    snapshots: np.ndarray  # (S, n, n)
    diagnostics: fn.DiagnosticsSeries
    params: SdeParams
    replica: int = 0
    log_weight: float = 0.0
    quadratic_variation: float = 0.0
    dissipation: float = 0.0  # left-point sum of Fisher information * dt
    status: str = OK
    clamped_points: int = 0
    min_density: float = np.inf

    @property
    def final(self):
        return self.snapshots[-1]

    @property
    def ok(self):
        return self.status == OK


# --------------------------------------------------------------------------
# drift pieces


def _positive(rho):
    return np.maximum(rho, 0.0)


def correction_coefficient(rho, p):
    """(eps F_{1,K} / 2) s'(rho)^2 evaluated at max(rho, 0)."""
    z = _positive(rho)
    if p.eta == 0:
        sp2 = 0.25 / np.maximum(z, _VACUUM_FLOOR)
    else:
        sp2 = 0.25 / (z + p.eta)
    return 0.5 * p.epsilon * p.modes.F1K * sp2


def explicit_drift(rho, p):
    """Drift without the Laplacian: -div(rho V) + div(D grad rho)."""
    out = -sp.divergence(interaction_flux(rho, p.kernel))
    out += sp.divergence(correction_coefficient(rho, p)[..., None, :, :] * sp.gradient(rho))
    return out


def ito_drift(rho, p):
    return sp.laplacian(rho) + explicit_drift(rho, p)


def _implicit_solve(rhs, coeff, dt):
    n = sp.grid_size(rhs)
    c = np.asarray(coeff, dtype=float)[..., None, None]
    return sp.from_spectral(sp.to_spectral(rhs) / (1.0 + dt * c * sp.FOUR_PI2 * sp.k_squared(n)), n)


def step(rho, p, inc, noise_field=None):
    """One semi-implicit step driven by ``inc`` (shape (..., F1K, 2)).

    ``noise_field`` may pass a precomputed W to avoid synthesizing it twice.
    """
    if inc.K != p.K:
        raise ValueError(f"increment cutoff {inc.K} does not match K={p.K}")
    if not math.isclose(inc.dt, p.dt):
        raise ValueError(f"increment dt {inc.dt} does not match dt={p.dt}")
    dt = p.dt
    s = p.mollifier.value(_positive(rho))
    W = synthesize(inc, rho.shape[-1]) if noise_field is None else noise_field
    D = correction_coefficient(rho, p)
    rhs = rho - np.sqrt(p.epsilon) * sp.divergence(s[..., None, :, :] * W)
    rhs = rhs + dt * (-sp.divergence(interaction_flux(rho, p.kernel)))
    rhs = rhs + dt * sp.divergence(D[..., None, :, :] * sp.gradient(rho))
    if p.stabilize:
        Dbar = np.max(D, axis=(-2, -1))
        rhs = rhs - dt * Dbar[..., None, None] * sp.laplacian(rho)
        return _implicit_solve(rhs, 1.0 + Dbar, dt)
    return _implicit_solve(rhs, np.ones(rho.shape[:-2]), dt)


def synthesize(inc, n):
    return nz.synthesize_noise_field(inc, n)


# --------------------------------------------------------------------------
# time loop


def _worker_count():
    try:
        return max(1, int(os.environ.get("DKLAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_batch(rho0, p, replicas, control, zero_noise):
    R = len(replicas)
    n = p.n
    ms = p.modes
    rho = np.broadcast_to(np.asarray(rho0, dtype=float), (R, n, n)).copy()
    nsteps = p.n_steps

    snaps = [rho.copy()]
    snap_t = [0.0]
    diags = [fn.DiagnosticsSeries() for _ in range(R)]
    for d, r in zip(diags, rho):
        d.record(0.0, r, 0.0)
    logw = np.zeros(R)
    qv = np.zeros(R)
    mart = np.zeros(R)
    dissip = np.zeros(R)
    clamped = np.zeros(R, dtype=np.int64)
    rho_min = np.min(rho, axis=(-2, -1))

    for i in range(nsteps):
        t = i * p.dt
        if zero_noise:
            inc = nz.NoiseIncrement(np.zeros((R, ms.size, 2)), p.dt, p.K)
        else:
            inc = nz.ensemble_increment(ms, p.dt, p.seed, replicas, i)
        if control is not None:
            g = control(t)
            inc, dlog = nz.girsanov_shift(inc, g, p.epsilon)
            qv += nz.quadratic_variation_increment(nz.basis_coefficients(g, p.K), p.epsilon, p.dt)
            logw += dlog
        W = synthesize(inc, n)
        sq = np.sqrt(_positive(rho))
        gsq = sp.gradient(sq)
        dissip += p.dt * np.mean(np.sum(gsq * gsq, axis=-3), axis=(-2, -1))
        mart += np.mean(np.sum(2.0 * gsq * W, axis=-3), axis=(-2, -1))
        clamped += fn.negative_count(rho)

        rho = step(rho, p, inc, noise_field=W)
        if not np.all(np.isfinite(rho)):
            raise NumericalError("non-finite density", step=i + 1)
        rho_min = np.minimum(rho_min, np.min(rho, axis=(-2, -1)))

        k = i + 1
        tk = k * p.dt
        snap = k % p.snapshot_every == 0 or k == nsteps
        # snapshot times are always diagnostic times
        if snap or k % p.diagnostics_every == 0:
            for d, r, m in zip(diags, rho, mart):
                d.record(tk, r, m)
        if snap:
            snaps.append(rho.copy())
            snap_t.append(tk)

    snaps = np.stack(snaps, axis=1)
    out = []
    for j, r in enumerate(replicas):
        status = OK if rho_min[j] >= -p.negativity_tolerance else FAILED_POSITIVITY
        out.append(Trajectory(
            times=np.array(snap_t), snapshots=snaps[j], diagnostics=diags[j], params=p,
            replica=int(r), log_weight=float(logw[j]), quadratic_variation=float(qv[j]),
            dissipation=float(dissip[j]), status=status, clamped_points=int(clamped[j]),
            min_density=float(rho_min[j]),
        ))
    return out


def _validate_initial(rho0, p):
    rho0 = sp.check_finite(rho0, "initial density")
    if rho0.shape != (p.n, p.n):
        raise sp.ConfigurationError(f"initial density shape {rho0.shape} does not match n={p.n}")
    if np.min(rho0) < 0:
        raise ValueError("initial density must be nonnegative")
    if fn.mass(rho0) <= 0:
        raise ValueError("initial density must have positive mass")
    return rho0


def simulate_ensemble(rho0, p, replicas, control=None, zero_noise=False, chunk=64, workers=None):
    """Run independent replicas (batched, optionally threaded).

    ``control`` is a callable ``t -> g`` returning a deterministic vector field;
    when given, the run is tilted and each trajectory carries its log dQ/dP.
    Results are returned in replica order regardless of scheduling.
    """
    rho0 = _validate_initial(rho0, p)
    replicas = [int(r) for r in replicas]
    chunks = [replicas[i:i + chunk] for i in range(0, len(replicas), chunk)]
    workers = _worker_count() if workers is None else workers
    if workers == 1 or len(chunks) == 1:
        parts = [_run_batch(rho0, p, c, control, zero_noise) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda c: _run_batch(rho0, p, c, control, zero_noise), chunks))
    return [t for part in parts for t in part]


def simulate(rho0, p, control=None, replica=0, zero_noise=False):
    return simulate_ensemble(rho0, p, [replica], control=control, zero_noise=zero_noise)[0]


# --------------------------------------------------------------------------
# small-noise scaling


@dataclass(frozen=True)
class Schedule:
    epsilon: float
    K: int
    eta: float
    eps_NK: float
    eps_NK_sprime2: float


def scaling_schedule(epsilon, k_exponent=0.2, eta_exponent=0.2):
    """K = ceil(eps^-a), eta = eps^b, with the realized eps N_K and eps N_K ||s'||^2."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    # guard the ceiling against eps^-a landing a rounding error above an integer
    K = math.ceil(epsilon ** (-k_exponent) * (1 - 1e-12))
    eta = epsilon**eta_exponent
    NK = nz.mode_set(K).NK
    return Schedule(epsilon, K, eta, epsilon * NK, epsilon * NK / (4 * eta))
