"""Run configuration: plain ``key = value`` text with optional ``[section]`` headers.

Keys are unique across sections, so a flat file and a sectioned file with
the same assignments describe the same run. Every problem found is
reported at once through :class:`ConfigError`.
"""

import configparser
import hashlib
import json
import math
from dataclasses import dataclass

from .interaction import KernelParams
from .solver import SdeParams, scaling_schedule

MODES = ("simulate", "skeleton", "rate", "tilt", "ldp-scan", "diagnose")
INITIAL_KINDS = ("uniform", "cosine", "bump", "file")
CONTROL_KINDS = ("none", "cosine")
EVENTS = ("whole", "fisher-exceedance", "l1-ball-complement")

_TOP = "__top__"


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _floats(text):
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _choice(options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


_pos = (lambda v: v > 0, "> 0")
_nonneg = (lambda v: v >= 0, ">= 0")
_ge1 = (lambda v: v >= 1, ">= 1")
_finite = (lambda v: math.isfinite(v), "finite")
_all_pos = (lambda v: len(v) > 0 and all(x > 0 for x in v), "a nonempty list of values > 0")
_all_nonneg = (lambda v: all(x >= 0 for x in v), "a list of values >= 0")

# key: (section, parser, default, (predicate, constraint text) or None, symbol for messages)
SCHEMA = {
    "mode": ("run", _choice(MODES), "simulate", None, "mode"),
    "seed": ("run", _int, 0, _nonneg, "seed"),
    "replicas": ("run", _int, 1, _ge1, "replicas"),
    "out": ("run", str, "dklab-out", None, "out"),
    "snapshot_every": ("run", _int, 1, _ge1, "snapshot_every"),
    "diagnostics_every": ("run", _int, 1, _ge1, "diagnostics_every"),
    "epsilon": ("sde", float, 0.01, _pos, "ε"),
    "K": ("sde", _int, 4, _nonneg, "K"),
    "eta": ("sde", float, 0.1, _nonneg, "η"),
    "dt": ("sde", float, 1e-3, _pos, "dt"),
    "T": ("sde", float, 0.1, _pos, "T"),
    "n": ("sde", _int, 32, (lambda v: v >= 8 and v % 2 == 0, "even and >= 8"), "n"),
    "negativity_tolerance": ("sde", float, 0.5, _nonneg, "negativity_tolerance"),
    "stabilize": ("sde", _bool, True, None, "stabilize"),
    "schedule": ("sde", _bool, False, None, "schedule"),
    "k_exponent": ("sde", float, 0.2, _pos, "k_exponent"),
    "eta_exponent": ("sde", float, 0.2, _pos, "eta_exponent"),
    "kappa1": ("kernel", float, 0.0, _finite, "κ₁"),
    "kappa2": ("kernel", float, 0.0, _finite, "κ₂"),
    "smoothing": ("kernel", float, 0.0, _nonneg, "smoothing"),
    "initial": ("initial", _choice(INITIAL_KINDS), "cosine", None, "initial"),
    "amplitude": ("initial", float, 0.5, _finite, "amplitude"),
    "width": ("initial", float, 0.15, _pos, "width"),
    "mass": ("initial", float, 1.0, _pos, "mass"),
    "initial_path": ("initial", str, "", None, "initial_path"),
    "control": ("control", _choice(CONTROL_KINDS), "none", None, "control"),
    "control_amplitude": ("control", float, 0.05, _finite, "control_amplitude"),
    "path_in": ("rate", str, "", None, "path_in"),
    "m_t": ("rate", _int, 8, _nonneg, "m_t"),
    "m_x": ("rate", _int, 4, _ge1, "m_x"),
    "epsilons": ("ldp", _floats, (0.1, 0.05), _all_pos, "epsilons"),
    "event": ("ldp", _choice(EVENTS), "fisher-exceedance", None, "event"),
    "thresholds": ("ldp", _floats, (1.0,), _all_pos, "thresholds"),
    "radius": ("ldp", float, 0.05, _pos, "radius"),
    "deltas": ("ldp", _floats, (0.0, 0.01), _all_nonneg, "deltas"),
    "M_grid": ("ldp", _floats, (), _all_nonneg, "M_grid"),
    "use_schedule": ("ldp", _bool, False, None, "use_schedule"),
}

SECTIONS = sorted({v[0] for v in SCHEMA.values()})


@dataclass(frozen=True)
class RunConfig:
    values: tuple  # sorted (key, value) pairs

    def __getattr__(self, name):
        for k, v in object.__getattribute__(self, "values"):
            if k == name:
                return v
        raise AttributeError(name)

    def as_dict(self):
        return dict(self.values)

    def with_(self, **changes):
        d = self.as_dict()
        d.update(changes)
        return validate(d)

    def canonical_json(self):
        """Run-defining values as JSON; the output location is not part of a run's identity."""
        d = {k: v for k, v in self.values if k != "out"}
        return json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)

    @property
    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def sde_params(self):
        K, eta = self.K, self.eta
        if self.schedule:
            s = self.schedule_at(self.epsilon)
            K, eta = s.K, s.eta
        return SdeParams(
            epsilon=self.epsilon, K=K, eta=eta, dt=self.dt, T=self.T, n=self.n,
            kernel=self.kernel_params(), seed=self.seed,
            negativity_tolerance=self.negativity_tolerance,
            snapshot_every=self.snapshot_every, diagnostics_every=self.diagnostics_every,
            stabilize=self.stabilize,
        )

    def schedule_at(self, epsilon):
        return scaling_schedule(epsilon, self.k_exponent, self.eta_exponent)

    def kernel_params(self):
        return KernelParams(self.kappa1, self.kappa2, self.smoothing)


def _cross_checks(v):
    errors = []
    n, K = v.get("n"), v.get("K")
    if isinstance(n, int) and isinstance(K, int) and not v.get("schedule") and K >= n // 2:
        errors.append(f"K={K}: K < n/2 required (n={n})")
    if v.get("schedule") and isinstance(v.get("epsilon"), float) and isinstance(n, int):
        eps = v["epsilon"]
        if 0 < eps < 1:
            Ks = scaling_schedule(eps, v["k_exponent"], v["eta_exponent"]).K
            if Ks >= n // 2:
                errors.append(f"schedule gives K={Ks} at ε={eps}: K < n/2 required (n={n})")
        else:
            errors.append(f"schedule=true needs 0 < ε < 1 (got {eps})")
    dt, T = v.get("dt"), v.get("T")
    if isinstance(dt, float) and isinstance(T, float) and dt > 0 and T > 0:
        steps = T / dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            errors.append(f"T/dt = {steps:.6g} must be an integer number of steps")
    if v.get("initial") == "file" and not v.get("initial_path"):
        errors.append("initial=file requires initial_path")
    if v.get("mode") == "ldp-scan" and isinstance(v.get("epsilons"), tuple):
        e = v["epsilons"]
        if any(b >= a for a, b in zip(e, e[1:])):
            errors.append("epsilons must be strictly decreasing")
    if v.get("mode") == "rate" and isinstance(n, int) and 4 * v["m_x"] >= n:
        errors.append(f"m_x={v['m_x']}: 4 m_x < n required (n={n})")
    return errors


def validate(raw):
    """Validate a mapping of already-typed or string values."""
    errors = []
    out = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            errors.append(f"unknown key {key!r}")
            continue
        _, parse, _, check, symbol = SCHEMA[key]
        try:
            val = parse(value) if isinstance(value, str) else value
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            continue
        if check is not None and not check[0](val):
            errors.append(f"{key}={value}: {symbol} {check[1]} required")
            continue
        out[key] = val
    for key, (_, _, default, _, _) in SCHEMA.items():
        out.setdefault(key, default)
    errors += _cross_checks(out)
    if errors:
        raise ConfigError(errors)
    return RunConfig(tuple(sorted(out.items())))


def parse_config(text, overrides=None):
    """Parse config text; ``overrides`` (e.g. from the command line) win over the file."""
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
        interpolation=None, strict=True, default_section="__defaults_unused__",
    )
    parser.optionxform = str  # keys are case sensitive (K vs k)
    errors = []
    try:
        parser.read_string(f"[{_TOP}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    raw = {}
    for section in parser.sections():
        if section != _TOP and section not in SECTIONS:
            errors.append(f"unknown section [{section}]")
            continue
        for key, value in parser.items(section):
            if key in SCHEMA and section != _TOP and SCHEMA[key][0] != section:
                errors.append(f"key {key!r} belongs in [{SCHEMA[key][0]}], not [{section}]")
                continue
            if key in raw:
                errors.append(f"key {key!r} given twice")
                continue
            raw[key] = value
    raw.update(overrides or {})
    try:
        cfg = validate(raw)
    except ConfigError as exc:
        errors += exc.errors
        raise ConfigError(errors) from None
    if errors:
        raise ConfigError(errors)
    return cfg
