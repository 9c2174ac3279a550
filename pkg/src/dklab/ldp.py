"""Monte Carlo large-deviation laboratory.

Naive event-frequency estimates of eps log P, importance sampling under a
Girsanov tilt towards a target skeleton path, and exponential-tightness
diagnostics for ensembles of trajectories.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binomtest

from . import functionals as fn
from .skeleton import ControlledPath, PathError, c0_diagnostic
from .solver import scaling_schedule, simulate_ensemble

log = logging.getLogger(__name__)

EVENT_KINDS = ("whole", "l1-ball-complement", "fisher-exceedance", "observable")


def _trapezoid(t, y):
    t = np.asarray(t, dtype=float)
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t)))


def interpolate_path(times, rho, at):
    """Piecewise-linear interpolation of a snapshot series to new times."""
    times = np.asarray(times, dtype=float)
    at = np.clip(np.asarray(at, dtype=float), times[0], times[-1])
    i = np.clip(np.searchsorted(times, at, side="right") - 1, 0, len(times) - 2)
    a = ((at - times[i]) / (times[i + 1] - times[i]))[:, None, None]
    return (1 - a) * rho[i] + a * rho[i + 1]


def path_l1_distance(times, rho, ref_times, ref_rho):
    """Trapezoidal L^1([0, T] x torus) distance; the reference is interpolated in time."""
    if rho.shape[-2:] != ref_rho.shape[-2:]:
        raise ValueError(f"grid mismatch {rho.shape[-2:]} vs {ref_rho.shape[-2:]}")
    ref = interpolate_path(ref_times, ref_rho, times)
    return _trapezoid(times, np.mean(np.abs(rho - ref), axis=(-2, -1)))


@dataclass
class EventSpec:
    """An event on trajectories.

    ``whole`` is always true; ``l1-ball-complement`` is
    {dist(rho, reference) >= radius}; ``fisher-exceedance`` is
    {int_0^T Fisher dt > threshold}; ``observable`` is {observable(traj) > threshold}.
    """

    kind: str
    reference: tuple = None  # (times, rho) for the ball complement
    radius: float = None
    threshold: float = None
    observable: object = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}; expected one of {EVENT_KINDS}")
        if self.kind == "l1-ball-complement":
            if self.reference is None:
                raise ValueError("ball complement needs a reference path")
            if not (self.radius is not None and self.radius > 0):
                raise ValueError("radius > 0 required")
        if self.kind in ("fisher-exceedance", "observable") and self.threshold is None:
            raise ValueError(f"{self.kind} needs a threshold")
        if self.kind == "observable" and not callable(self.observable):
            raise ValueError("observable must be callable")

    def occurs(self, traj):
        if self.kind == "whole":
            return True
        if self.kind == "l1-ball-complement":
            rt, rr = self.reference
            return path_l1_distance(traj.times, traj.snapshots, rt, rr) >= self.radius
        if self.kind == "fisher-exceedance":
            return traj.dissipation > self.threshold
        return float(self.observable(traj)) > self.threshold


def wilson_interval(hits, total, confidence=0.95):
    ci = binomtest(int(hits), int(total)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def _eps_log(eps, p):
    return eps * math.log(p) if p > 0 else -math.inf


@dataclass
class DecayEstimate:
    epsilons: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    replicas: list = field(default_factory=list)
    probability: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    wilson: list = field(default_factory=list)
    upper_bound_only: list = field(default_factory=list)

    def add(self, eps, hits, total, confidence=0.95):
        p = hits / total
        self.epsilons.append(float(eps))
        self.hits.append(int(hits))
        self.replicas.append(int(total))
        self.probability.append(p)
        self.stderr.append(math.sqrt(p * (1 - p) / total))
        self.wilson.append(wilson_interval(hits, total, confidence))
        self.upper_bound_only.append(hits == 0)

    @property
    def eps_log_p(self):
        return [_eps_log(e, p) for e, p in zip(self.epsilons, self.probability)]

    @property
    def eps_log_p_band(self):
        return [(_eps_log(e, lo), _eps_log(e, hi)) for e, (lo, hi) in zip(self.epsilons, self.wilson)]

    def rows(self):
        for i, e in enumerate(self.epsilons):
            lo, hi = self.eps_log_p_band[i]
            yield (e, self.replicas[i], self.hits[i], self.probability[i], self.stderr[i],
                   self.wilson[i][0], self.wilson[i][1], self.eps_log_p[i], lo, hi,
                   int(self.upper_bound_only[i]))

    COLUMNS = ("epsilon", "replicas", "hits", "p", "stderr", "wilson_lo", "wilson_hi",
               "eps_log_p", "eps_log_p_lo", "eps_log_p_hi", "upper_bound_only")


def params_for(template, epsilon, use_schedule=True, exponents=(0.2, 0.2)):
    """Template parameters at a new epsilon, with K and eta from the scaling schedule."""
    if not use_schedule:
        return template.with_(epsilon=epsilon)
    s = scaling_schedule(epsilon, *exponents)
    return template.with_(epsilon=epsilon, K=s.K, eta=s.eta)


def estimate_event_decay(event, epsilons, replicas, template, rho0, use_schedule=True,
                         min_replicas=50, confidence=0.95):
    """Naive frequency of ``event`` at each epsilon (grid must be decreasing)."""
    epsilons = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilon grid must be strictly decreasing")
    if replicas < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas per epsilon, got {replicas}")
    out = DecayEstimate()
    for eps in epsilons:
        p = params_for(template, eps, use_schedule)
        trajs = simulate_ensemble(rho0, p, range(replicas))
        hits = sum(bool(event.occurs(tr)) for tr in trajs)
        out.add(eps, hits, replicas, confidence)
        if hits == 0:
            log.info("eps=%g: no hits in %d replicas, upper bound only", eps, replicas)
    return out


# --------------------------------------------------------------------------
# tilted sampling


@dataclass
class TiltResult:
    trajectories: list
    log_weights: np.ndarray  # log dQ/dP per replica
    weights: np.ndarray  # dP/dQ, the importance weights
    epsilon: float
    rate: float
    relative_entropy: float  # eps * mean log dQ/dP
    relative_entropy_stderr: float

    @property
    def mean_weight(self):
        return float(np.mean(self.weights))

    @property
    def weight_stderr(self):
        return float(np.std(self.weights, ddof=1) / math.sqrt(len(self.weights))) if len(self.weights) > 1 else 0.0

    def bound_holds(self, slack=0.05, sigmas=3.0):
        return self.relative_entropy <= self.rate * (1 + slack) + sigmas * self.relative_entropy_stderr

    def weighted_probability(self, event):
        """Importance-sampling estimate of P(event) and its standard error."""
        x = np.array([float(event.occurs(t)) for t in self.trajectories]) * self.weights
        se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(np.mean(x)), se


def _check_target(target, template, rho0, mass_tol=1e-10):
    if target.psi is None or target.g is None:
        raise PathError("target has no control potential; run attach_control first")
    if target.n != template.n:
        raise ValueError(f"target grid n={target.n} does not match n={template.n}")
    m_target = float(fn.mass(target.rho[0]))
    m0 = float(fn.mass(rho0))
    if abs(m_target - m0) > mass_tol * max(1.0, abs(m0)):
        raise ValueError(f"target mass {m_target:.12g} is incompatible with initial mass {m0:.12g}")


def tilted_sampler(target, epsilon, replicas, template, rho0=None, use_schedule=False):
    """Sample the tilted SPDE steering towards ``target`` and weight back to P."""
    rho0 = target.rho[0] if rho0 is None else np.asarray(rho0, dtype=float)
    _check_target(target, template, rho0)
    p = params_for(template, epsilon, use_schedule).with_(T=float(target.times[-1]), kernel=target.kernel)
    trajs = simulate_ensemble(rho0, p, range(replicas), control=target.control_at)
    logw = np.array([t.log_weight for t in trajs])
    scaled = epsilon * logw
    se = float(np.std(scaled, ddof=1) / math.sqrt(len(scaled))) if len(scaled) > 1 else 0.0
    rate = target.rate if target.rate is not None else float("nan")
    return TiltResult(trajs, logw, np.exp(-logw), float(epsilon), rate, float(np.mean(scaled)), se)


@dataclass
class ConcentrationReport:
    epsilons: list
    mean_distance: list
    stderr: list
    quartiles: list
    c0_norms: dict
    passed: bool
    separated: list  # consecutive drops larger than the combined standard error

    def rows(self):
        for e, m, s, q in zip(self.epsilons, self.mean_distance, self.stderr, self.quartiles):
            yield (e, m, s, *q)

    COLUMNS = ("epsilon", "mean_distance", "stderr", "q25", "q50", "q75")


def concentration_study(target, epsilons, replicas, template, rho0=None, use_schedule=True,
                        allow_uncertified=False):
    """Mean L^1 distance of tilted samples to the target at each epsilon.

    PASS when the mean distance strictly decreases along the (decreasing)
    epsilon grid.
    """
    if not target.certified and not allow_uncertified:
        raise PathError("target is NON-CERTIFIED; concentration studies use certified targets only")
    rho0 = target.rho[0] if rho0 is None else np.asarray(rho0, dtype=float)
    _check_target(target, template, rho0)
    means, ses, quarts = [], [], []
    for eps in epsilons:
        res = tilted_sampler(target, eps, replicas, template, rho0, use_schedule)
        d = np.array([path_l1_distance(t.times, t.snapshots, target.times, target.rho)
                      for t in res.trajectories])
        means.append(float(np.mean(d)))
        ses.append(float(np.std(d, ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0)
        quarts.append(tuple(float(q) for q in np.percentile(d, [25, 50, 75])))
    passed = all(b < a for a, b in zip(means, means[1:]))
    sep = [a - b > math.hypot(sa, sb) for a, b, sa, sb in zip(means, means[1:], ses, ses[1:])]
    return ConcentrationReport([float(e) for e in epsilons], means, ses, quarts,
                               c0_diagnostic(target), passed, sep)


# --------------------------------------------------------------------------
# exponential tightness


def scaled_log_moment(values, delta, epsilon):
    """eps log E[exp(delta/eps X)] by log-sum-exp; +inf when the exponent overflows."""
    x = np.asarray(values, dtype=float)
    if delta == 0:
        return 0.0
    with np.errstate(over="ignore"):
        a = (delta / epsilon) * x
    if not np.all(np.isfinite(a)):
        return math.inf
    val = epsilon * (logsumexp(a) - math.log(len(a)))
    return float(val) if np.isfinite(val) else math.inf


def trajectory_fisher(traj):
    return traj.dissipation


def trajectory_holder(traj, alpha=1 / 3, beta=3.5):
    return fn.time_holder_seminorm(traj.times, traj.snapshots, alpha, beta)


@dataclass
class TightnessReport:
    epsilons: list
    deltas: list
    fisher_moment: dict  # (delta, eps) -> eps log E exp(delta/eps * int Fisher)
    holder_moment: dict  # (delta, eps) -> same for the time-Holder seminorm
    exceedance: dict  # R -> DecayEstimate of P(int Fisher > R) over eps
    compact_complement: dict  # M -> DecayEstimate of P(outside K_M)

    def exceedance_trend(self):
        """(strictly decreasing in R at each eps, non-increasing as eps decreases).

        All thresholds share one sample, so counts cannot increase with R and
        the R-trend is checked on point estimates; trailing zero-hit cells
        are upper bounds only and may tie. The eps-trend fails only
        when the smaller-eps Wilson band lies entirely above the larger-eps one.
        """
        Rs = sorted(self.exceedance)
        in_R = True
        for j in range(len(self.epsilons)):
            vals = [self.exceedance[R].eps_log_p[j] for R in Rs]
            # two zero-hit cells (both -inf) carry no ordering information
            in_R &= all(b < a or a == b == -math.inf for a, b in zip(vals, vals[1:]))
        in_eps = all(
            not band[j + 1][0] > band[j][1]
            for band in (self.exceedance[R].eps_log_p_band for R in Rs)
            for j in range(len(self.epsilons) - 1)
        )
        return in_R, in_eps


def tightness_diagnostics(ensembles, deltas, R_grid, M_grid=(), min_trajectories=100,
                          alpha=1 / 3, beta=3.5, confidence=0.95):
    """Exponential moments and exceedance rates for ``{eps: [Trajectory, ...]}``.

    The compact set K_M is {int Fisher <= M and time-Holder seminorm <= M}.
    """
    epsilons = sorted(ensembles, reverse=True)
    for eps in epsilons:
        if len(ensembles[eps]) < min_trajectories:
            raise ValueError(f"eps={eps}: need at least {min_trajectories} trajectories, "
                             f"got {len(ensembles[eps])}")
    fisher = {e: np.array([trajectory_fisher(t) for t in ensembles[e]]) for e in epsilons}
    holder = {e: np.array([trajectory_holder(t, alpha, beta) for t in ensembles[e]]) for e in epsilons}
    fm = {(d, e): scaled_log_moment(fisher[e], d, e) for d in deltas for e in epsilons}
    hm = {(d, e): scaled_log_moment(holder[e], d, e) for d in deltas for e in epsilons}
    exc = {}
    for R in R_grid:
        est = DecayEstimate()
        for e in epsilons:
            est.add(e, int(np.sum(fisher[e] > R)), len(fisher[e]), confidence)
        exc[R] = est
    comp = {}
    for M in M_grid:
        est = DecayEstimate()
        for e in epsilons:
            outside = (fisher[e] > M) | (holder[e] > M)
            est.add(e, int(np.sum(outside)), len(outside), confidence)
        comp[M] = est
    return TightnessReport(epsilons, list(deltas), fm, hm, exc, comp)
