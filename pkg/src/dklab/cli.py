"""Command-line orchestration: ``dklab <mode> --config FILE [--seed S] [--out DIR]``.

Every mode writes its outputs, then ``manifest.json`` last and atomically,
so a present manifest certifies a finished run. The manifest is a pure
function of (config, seed, code version); wall-clock goes to ``timing.json``.
"""

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import functionals as fn
from . import io as dio
from . import ldp
from . import skeleton as sk
from . import spectral as sp
from .config import ConfigError, MODES, parse_config
from .interaction import estimate_gn_constant, smallness_check
from .solver import FAILED_POSITIVITY, NumericalError, simulate_ensemble

log = logging.getLogger("dklab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class StageError(RuntimeError):
    """A module failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunContext:
    cfg: object
    out: str
    outputs: dict = field(default_factory=dict)  # name -> sha256
    warnings: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def path(self, name):
        return os.path.join(self.out, name)

    def record(self, name):
        self.outputs[name] = dio.sha256_file(self.path(name))

    def snapshot(self, name, values, **kw):
        dio.write_snapshot(values, self.path(name), **kw)
        self.record(name)

    def table(self, name, columns, rows):
        dio.write_table(self.path(name), columns, rows)
        self.record(name)

    def json(self, name, obj):
        dio.write_json(self.path(name), obj)
        self.record(name)

    def warn(self, msg):
        log.warning(msg)
        self.warnings.append(msg)


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, OSError, ConfigError)):
            raise StageError(self.name, exc) from exc
        return False


# --------------------------------------------------------------------------
# inputs


def initial_density(cfg):
    n = cfg.n
    x1, x2 = sp.Grid(n).coords()
    if cfg.initial == "uniform":
        rho = np.full((n, n), cfg.mass)
    elif cfg.initial == "cosine":
        rho = cfg.mass * (1 + cfg.amplitude * np.cos(sp.TWO_PI * x1))
    elif cfg.initial == "bump":
        if not 0 <= cfg.amplitude <= 1:
            raise ConfigError([f"amplitude={cfg.amplitude}: bump needs 0 <= amplitude <= 1"])
        d1 = (x1 + 0.5) % 1.0 - 0.5
        d2 = (x2 + 0.5) % 1.0 - 0.5
        b = np.exp(-(d1**2 + d2**2) / (2 * cfg.width**2))
        rho = cfg.mass * ((1 - cfg.amplitude) + cfg.amplitude * b / np.mean(b))
    else:
        rho = dio.read_snapshot(cfg.initial_path).values
        if rho.shape != (n, n):
            raise ConfigError([f"initial_path holds shape {rho.shape}, expected ({n}, {n})"])
    if np.min(rho) < 0:
        raise ConfigError([f"initial density is negative somewhere (min {np.min(rho):.3g}); "
                           "reduce amplitude"])
    return rho


def control_potential(cfg):
    if cfg.control == "none":
        return None
    x1, _ = sp.Grid(cfg.n).coords()
    psi = cfg.control_amplitude * np.cos(sp.TWO_PI * x1)
    return sk.feedback_control(lambda t: psi)


def _skeleton_path(cfg, rho0):
    return sk.solve_skeleton(rho0, control_potential(cfg), cfg.kernel_params(), cfg.dt, cfg.T,
                             cfg.snapshot_every)


def _write_trajectories(ctx, trajs):
    for tr in trajs:
        tag = f"r{tr.replica:04d}"
        ctx.snapshot(f"rho_{tag}.snap", tr.snapshots, times=tr.times)
        ctx.table(f"diagnostics_{tag}.csv", fn.DiagnosticsSeries.COLUMNS, tr.diagnostics.rows())
        if tr.status == FAILED_POSITIVITY:
            ctx.warn(f"replica {tr.replica}: {FAILED_POSITIVITY} (min density {tr.min_density:.6g})")
        if tr.clamped_points:
            ctx.counts["clamped_points"] = ctx.counts.get("clamped_points", 0) + tr.clamped_points


def _trajectory_rows(trajs):
    for tr in trajs:
        m = tr.diagnostics.mass
        yield (tr.replica, tr.status, tr.min_density, max(abs(x - m[0]) for x in m),
               tr.dissipation, tr.log_weight, tr.clamped_points)


_TRAJ_COLUMNS = ("replica", "status", "min_density", "mass_drift", "fisher_integral",
                 "log_weight", "clamped_points")


# --------------------------------------------------------------------------
# modes


def mode_simulate(ctx, rho0):
    p = ctx.cfg.sde_params()
    with _stage("simulate"):
        trajs = simulate_ensemble(rho0, p, range(ctx.cfg.replicas))
    ctx.counts["steps"] = p.n_steps * len(trajs)
    _write_trajectories(ctx, trajs)
    ctx.table("replicas.csv", _TRAJ_COLUMNS, _trajectory_rows(trajs))
    ctx.summary.update(K=p.K, eta=p.eta, failed=sum(not t.ok for t in trajs))


def mode_skeleton(ctx, rho0):
    with _stage("solve_skeleton"):
        path = _skeleton_path(ctx.cfg, rho0)
    ctx.counts["steps"] = int(round(ctx.cfg.T / ctx.cfg.dt))
    ctx.snapshot("skeleton_rho.snap", path.rho, times=path.times)
    ctx.snapshot("skeleton_g.snap", path.g, times=path.times, components=2)
    for w in path.warnings:
        ctx.warn(w)
    ctx.summary.update(mass_drift=float(np.max(np.abs(fn.mass(path.rho) - fn.mass(path.rho[0])))))


def _rate_path(ctx, rho0):
    cfg = ctx.cfg
    if cfg.path_in:
        snap = dio.read_snapshot(cfg.path_in)
        if snap.times is None or snap.values.ndim != 3:
            raise StageError("solve_psi", ValueError("path_in must be a time series of scalar fields"))
        return sk.ControlledPath(np.array(snap.times), snap.values, cfg.kernel_params())
    with _stage("solve_skeleton"):
        return _skeleton_path(cfg, rho0)


def _attach(ctx, path):
    with _stage("solve_psi"):
        path = sk.attach_control(path)
    for w in path.warnings:
        ctx.warn(w)
    if not path.certified:
        ctx.warn(f"rate {path.rate:.9g} is NON-CERTIFIED")
    return path


def mode_rate(ctx, rho0):
    path = _attach(ctx, _rate_path(ctx, rho0))
    with _stage("rate_variational"):
        rv = sk.rate_variational(path.times, path.rho, path.kernel, ctx.cfg.m_t, ctx.cfg.m_x)
    ctx.snapshot("psi.snap", path.psi, times=path.times)
    ctx.json("rate.json", {
        "rate_from_control": path.rate, "rate_variational": rv,
        "control_energy": sk.control_energy(path), "basis": [ctx.cfg.m_t, ctx.cfg.m_x],
        "certified": path.certified, "c0_norms": sk.c0_diagnostic(path),
    })
    ctx.summary.update(rate=path.rate, rate_variational=rv)


def mode_tilt(ctx, rho0):
    cfg = ctx.cfg
    target = _attach(ctx, _rate_path(ctx, rho0))
    p = cfg.sde_params()
    with _stage("tilted_sampler"):
        res = ldp.tilted_sampler(target, cfg.epsilon, cfg.replicas, p, rho0)
    ctx.counts["steps"] = p.n_steps * cfg.replicas
    _write_trajectories(ctx, res.trajectories)
    ctx.table("tilt_weights.csv", ("replica", "log_dQdP", "weight"),
              ((t.replica, t.log_weight, w) for t, w in zip(res.trajectories, res.weights)))
    ctx.json("tilt.json", {
        "epsilon": res.epsilon, "rate": res.rate, "eps_mean_log_dQdP": res.relative_entropy,
        "stderr": res.relative_entropy_stderr, "bound_holds": res.bound_holds(),
        "mean_weight": res.mean_weight, "weight_stderr": res.weight_stderr,
    })
    if not res.bound_holds():
        ctx.warn("relative-entropy bound violated beyond tolerance")


def mode_ldp_scan(ctx, rho0):
    cfg = ctx.cfg
    base = cfg.sde_params()
    ensembles = {}
    with _stage("ldp_scan"):
        for eps in cfg.epsilons:
            p = base.with_(epsilon=eps)
            if cfg.use_schedule:
                s = cfg.schedule_at(eps)
                p = p.with_(K=s.K, eta=s.eta)
            ensembles[eps] = simulate_ensemble(rho0, p, range(cfg.replicas))
            ctx.counts[f"steps_eps_{eps!r}"] = p.n_steps * cfg.replicas
        if cfg.event == "l1-ball-complement":
            ref = sk.solve_skeleton(rho0, None, base.kernel, base.dt, base.T, base.snapshot_every)
            event = ldp.EventSpec("l1-ball-complement", reference=(ref.times, ref.rho), radius=cfg.radius)
            decays = {cfg.radius: event}
        elif cfg.event == "whole":
            decays = {0.0: ldp.EventSpec("whole")}
        else:
            decays = {R: ldp.EventSpec("fisher-exceedance", threshold=R) for R in cfg.thresholds}
        rows = []
        for level, ev in decays.items():
            est = ldp.DecayEstimate()
            for eps in cfg.epsilons:
                hits = sum(bool(ev.occurs(t)) for t in ensembles[eps])
                est.add(eps, hits, len(ensembles[eps]))
            rows += [(level,) + r for r in est.rows()]
            for e, ub in zip(est.epsilons, est.upper_bound_only):
                if ub:
                    ctx.warn(f"level {level}: no hits at eps={e}, upper bound only")
        tight = ldp.tightness_diagnostics(ensembles, cfg.deltas, cfg.thresholds, cfg.M_grid,
                                          min_trajectories=1)
    ctx.table("decay.csv", ("level",) + ldp.DecayEstimate.COLUMNS, rows)
    ctx.table("moments.csv", ("delta", "epsilon", "eps_log_moment_fisher", "eps_log_moment_holder"),
              ((d, e, tight.fisher_moment[d, e], tight.holder_moment[d, e])
               for d in tight.deltas for e in tight.epsilons))
    in_R, in_eps = tight.exceedance_trend()
    ctx.json("ldp.json", {"exceedance_decreasing_in_R": in_R, "exceedance_nonincreasing_in_eps": in_eps})
    ctx.summary.update(trend_R=in_R, trend_eps=in_eps)


def mode_diagnose(ctx, rho0):
    cfg = ctx.cfg
    p = cfg.sde_params()
    with _stage("simulate"):
        trajs = simulate_ensemble(rho0, p, range(cfg.replicas))
    ctx.counts["steps"] = p.n_steps * len(trajs)
    ms = p.modes
    report = {"K": p.K, "eta": p.eta, "F1K": ms.F1K, "NK": ms.NK, "replicas": []}
    for tr in trajs:
        d = tr.diagnostics
        # pathwise entropy inequality with C = 1 (kappa1 = 0 case); the noise constant is
        # the unit-torus value sum_j ||grad e_j||^2 = 4 pi^2 N_K
        rhs = d.entropy[0] + np.sqrt(p.epsilon) * d.entropy_martingale[-1] \
            + p.epsilon * ms.gradient_energy * p.T + 1.0
        ok = tr.dissipation <= rhs
        if not ok:
            ctx.warn(f"replica {tr.replica}: pathwise entropy inequality violated")
        report["replicas"].append({
            "replica": tr.replica, "status": tr.status, "min_density": tr.min_density,
            "mass_drift": max(abs(x - d.mass[0]) for x in d.mass),
            "fisher_integral": tr.dissipation, "entropy_bound": rhs, "entropy_ok": bool(ok),
        })
    with _stage("smallness_check"):
        c_gn = estimate_gn_constant(sp.Grid(cfg.n), trials=4, seed=cfg.seed)
        verdict = smallness_check(p.kernel, float(fn.mass(rho0)), c_gn)
    report["c_gn_estimate"] = c_gn
    report["smallness"] = {"passed": verdict.passed, "bound": verdict.bound, "margin": verdict.margin,
                           "note": str(verdict)}
    if not verdict.passed:
        ctx.warn(str(verdict))
    _write_trajectories(ctx, trajs)
    ctx.json("diagnose.json", report)


MODE_FUNCS = {
    "simulate": mode_simulate, "skeleton": mode_skeleton, "rate": mode_rate,
    "tilt": mode_tilt, "ldp-scan": mode_ldp_scan, "diagnose": mode_diagnose,
}


# --------------------------------------------------------------------------
# runner


def _manifest(ctx, status, stage=None, error=None):
    return {
        "code_version": __version__,
        "config_hash": ctx.cfg.digest,
        "config": {k: v for k, v in ctx.cfg.as_dict().items() if k != "out"},
        "mode": ctx.cfg.mode,
        "status": status,
        "failure_stage": stage,
        "error": error,
        "outputs": dict(sorted(ctx.outputs.items())),
        "counts": dict(sorted(ctx.counts.items())),
        "warnings": list(ctx.warnings),
        "warning_count": len(ctx.warnings),
        "summary": ctx.summary,
        "timing_file": "timing.json",
    }


def _exit_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_NUMERICAL


def run(cfg):
    """Execute one configured run; returns (exit code, manifest dict)."""
    ctx = RunContext(cfg, cfg.out)
    t0 = time.perf_counter()
    try:
        os.makedirs(ctx.out, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", ctx.out, exc)
        return EXIT_IO, None
    code, stage, error = EXIT_OK, None, None
    try:
        with _stage("initial"):
            rho0 = initial_density(cfg)
        MODE_FUNCS[cfg.mode](ctx, rho0)
    except StageError as exc:
        code, stage, error = EXIT_NUMERICAL, exc.stage, f"{type(exc.cause).__name__}: {exc.cause}"
        if isinstance(exc.cause, (OSError, dio.SnapshotFormatError)):
            code = EXIT_IO
        elif isinstance(exc.cause, (ConfigError, sp.ConfigurationError)):
            code = EXIT_CONFIG
    except (ConfigError, OSError, NumericalError) as exc:
        code, stage, error = _exit_for(exc), "io" if isinstance(exc, OSError) else cfg.mode, str(exc)
    if error:
        log.error("run failed at stage %s: %s", stage, error)
    manifest = _manifest(ctx, "ok" if code == EXIT_OK else "failed", stage, error)
    try:
        dio.write_json(ctx.path("timing.json"), {"wall_clock_seconds": time.perf_counter() - t0})
        dio.write_json(ctx.path("manifest.json"), manifest)
    except OSError as exc:
        log.error("cannot write manifest: %s", exc)
        return EXIT_IO, manifest
    return code, manifest


def build_parser():
    ap = argparse.ArgumentParser(prog="dklab", description=__doc__.splitlines()[0])
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, help="key=value config file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        print(f"dklab: cannot read config {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    overrides = {"mode": args.mode}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    try:
        cfg = parse_config(text, overrides)
    except ConfigError as exc:
        print(f"dklab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, manifest = run(cfg)
    if manifest is not None:
        print(os.path.join(cfg.out, "manifest.json"))
    return code


if __name__ == "__main__":
    sys.exit(main())
