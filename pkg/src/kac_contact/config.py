"""Experiment configuration: JSON schema, defaults and validation.

A config is a flat JSON object. Dyadic parameters are given by their
exponents: ``gamma = 2**-n1``, ``delta = 2**-n2``, ``xi = L 2**-n3``.
Ladder studies list the exponent sequence under ``ladder``.
"""
import copy
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .kernels import KINDS, make_kernel
from .micro import RHO_FLOOR

MODELS = ("contact", "recovery", "ei", "general")
STUDIES = ("single_run", "gamma_ladder", "delta_ladder", "xi_ladder", "cluster_probe", "correlation")
PROFILES = ("uniform", "bump", "two-phase", "constant")

DEFAULTS = {
    "model": "contact",
    "study": "single_run",
    "d": 1,
    "L": 1,
    "n1": 8,
    "n2": 6,
    "n3": 2,
    "k": 1,
    "lambda_star": 2.0,
    "kernel": {"kind": "smooth_bump", "R": 0.25},
    "rho0": {"profile": "bump", "base": 0.1, "amplitude": 0.5},
    "T": 1.0,
    "output_times": None,
    "replicas": 20,
    "seed": 0,
    "micro_kernel": "A_gamma",
    "initial_average": "integral",
    "grid_n": None,
    "dt": None,
    "recovery_rates": None,
    "ei": None,
    "general": None,
    "ladder": None,
    "cluster": {"a": 0.6, "epsilon": 0.1, "windows": 2000, "scale_windows": True},
    "probes": None,
    "thresholds": {"final_error": 0.05},
}

# ladder key per study
LADDER_PARAM = {"gamma_ladder": "n1", "correlation": "n1", "delta_ladder": "n2", "cluster_probe": "n2", "xi_ladder": "n3"}


def _int(cfg, name, lo=None):
    v = cfg[name]
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ValidationError(f"{name} must be an integer exponent, got {v!r}", name)
    if lo is not None and v < lo:
        raise ValidationError(f"{name} must be >= {lo}, got {v}", name)
    return int(v)


def _num(cfg, name, lo=None, strict=False):
    v = cfg[name]
    if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)) or not math.isfinite(v):
        raise ValidationError(f"{name} must be a finite number, got {v!r}", name)
    if lo is not None and (v <= lo if strict else v < lo):
        raise ValidationError(f"{name} must be {'>' if strict else '>='} {lo}, got {v}", name)
    return float(v)


@dataclass
class ExperimentConfig:
    """Validated experiment parameters; ``raw`` is the normalised JSON object."""

    raw: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["raw"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def gamma(self):
        return 2.0 ** -self.n1

    @property
    def delta(self):
        return 2.0 ** -self.n2

    @property
    def xi(self):
        return self.L * 2.0 ** -self.n3

    def with_overrides(self, **kw):
        raw = copy.deepcopy(self.raw)
        raw.update({k: v for k, v in kw.items() if v is not None})
        return validate_config(raw)

    def kernel(self):
        spec = self.raw["kernel"]
        return make_kernel(spec["kind"], spec.get("R"), self.d, spec.get("table"))

    def ladder_values(self):
        return list(self.raw["ladder"])

    def times(self):
        """Output times; defaults to every multiple of ``delta`` up to ``T``."""
        if self.output_times is not None:
            return np.asarray(self.output_times, dtype=float)
        n = int(round(self.T / self.delta))
        return np.arange(n + 1) * self.delta if math.isclose(n * self.delta, self.T) else np.array([0.0, self.T])

    def to_json(self):
        return json.dumps(self.raw, sort_keys=True, indent=2)


def _validate_kernel(spec, d):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValidationError("kernel must be an object with a 'kind'", "kernel")
    if spec["kind"] not in KINDS:
        raise ValidationError(f"kernel.kind must be one of {KINDS}", "kernel.kind")
    if spec["kind"] == "tabulated":
        if "table" not in spec:
            raise ValidationError("tabulated kernel needs a 'table' file", "kernel.table")
    else:
        R = spec.get("R")
        if isinstance(R, bool) or not isinstance(R, (int, float)) or not R > 0:
            raise ValidationError(f"kernel.R must be a positive number, got {R!r}", "kernel.R")


def _validate_rho0(spec, k):
    if isinstance(spec, str):
        spec = {"profile": spec}
    if not isinstance(spec, dict) or spec.get("profile") not in PROFILES:
        raise ValidationError(f"rho0.profile must be one of {PROFILES}", "rho0.profile")
    if spec["profile"] == "constant":
        lv = spec.get("levels")
        if not isinstance(lv, list) or len(lv) != k + 1:
            raise ValidationError(f"rho0.levels must list {k + 1} densities", "rho0.levels")
        if abs(math.fsum(lv) - 1.0) > 1e-9:
            raise ValidationError("rho0.levels must sum to one", "rho0.levels")
        values = lv
    elif spec["profile"] == "bump":
        base, amp = spec.get("base", 0.1), spec.get("amplitude", 0.5)
        values = [base, base + amp, (1 - base) / k, (1 - base - amp) / k]
    elif spec["profile"] == "two-phase":
        hi, lo = spec.get("high", 0.6), spec.get("low", 0.1)
        values = [hi, lo, (1 - hi) / k, (1 - lo) / k]
    else:
        values = [1.0 / (k + 1)]
    if min(values) < RHO_FLOOR:
        raise ValidationError(f"rho0 densities must stay >= {RHO_FLOOR} everywhere", "rho0")
    return spec


def validate_config(raw):
    """Apply defaults and check every field; raises :class:`ValidationError` naming the field."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object", "<root>")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        name = sorted(unknown)[0]
        raise ValidationError(f"unknown field {name!r}", name)
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if isinstance(DEFAULTS[key], dict) and isinstance(val, dict):
            cfg[key] = {**DEFAULTS[key], **val} if key in ("cluster", "thresholds") else val
        else:
            cfg[key] = val
    if cfg["model"] not in MODELS:
        raise ValidationError(f"model must be one of {MODELS}", "model")
    if cfg["study"] not in STUDIES:
        raise ValidationError(f"study must be one of {STUDIES}", "study")
    d = _int(cfg, "d", 1)
    if d > 3:
        raise ValidationError("d must be 1, 2 or 3", "d")
    _int(cfg, "L", 1)
    _int(cfg, "n1", 1)
    _int(cfg, "n2", 1)
    n3 = _int(cfg, "n3", 0)
    k = _int(cfg, "k", 1)
    _num(cfg, "lambda_star", 0.0)
    _num(cfg, "T", 0.0)
    _int(cfg, "replicas", 1)
    _int(cfg, "seed", 0)
    if cfg["micro_kernel"] not in ("A_gamma", "J_gamma"):
        raise ValidationError("micro_kernel must be 'A_gamma' or 'J_gamma'", "micro_kernel")
    if cfg["initial_average"] not in ("integral", "lattice"):
        raise ValidationError("initial_average must be 'integral' or 'lattice'", "initial_average")
    _validate_kernel(cfg["kernel"], d)
    cfg["rho0"] = _validate_rho0(cfg["rho0"], k)
    if cfg["dt"] is not None:
        _num(cfg, "dt", 0.0, strict=True)
    if cfg["grid_n"] is not None:
        n = _int(cfg, "grid_n", 1)
        if n & (n - 1):
            raise ValidationError("grid_n must be a power of two", "grid_n")
    if cfg["output_times"] is not None:
        ts = cfg["output_times"]
        if not isinstance(ts, list) or not all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in ts):
            raise ValidationError("output_times must be a list of numbers", "output_times")
        if any(b < a for a, b in zip(ts, ts[1:])) or (ts and (ts[0] < 0 or ts[-1] > cfg["T"])):
            raise ValidationError("output_times must be sorted and lie in [0, T]", "output_times")
    if cfg["model"] == "recovery":
        rr = cfg["recovery_rates"]
        if not isinstance(rr, list) or len(rr) != k - 1 or any(not isinstance(v, (int, float)) or v < 0 for v in rr):
            raise ValidationError(f"recovery_rates must list {k - 1} nonnegative rates", "recovery_rates")
    if cfg["model"] == "ei":
        ei = cfg["ei"] or {}
        if not isinstance(ei.get("lambda2"), (int, float)) or ei["lambda2"] < 0:
            raise ValidationError("ei.lambda2 must be a nonnegative number", "ei.lambda2")
    if cfg["model"] == "general":
        _validate_general(cfg["general"])
    study = cfg["study"]
    if study in LADDER_PARAM:
        name = LADDER_PARAM[study]
        lad = cfg["ladder"]
        if not isinstance(lad, list) or len(lad) < 2:
            raise ValidationError(f"{study} needs a ladder of at least two {name} values", "ladder")
        for v in lad:
            if isinstance(v, bool) or not isinstance(v, int) or v < (0 if name == "n3" else 1):
                raise ValidationError(f"ladder entries are integer {name} exponents, got {v!r}", "ladder")
        if any(b <= a for a, b in zip(lad, lad[1:])):
            raise ValidationError("ladder exponents must be strictly increasing (parameter decreasing)", "ladder")
    if study == "correlation":
        probes = cfg["probes"]
        if not isinstance(probes, list) or len(probes) < 2:
            raise ValidationError("correlation study needs at least two probes", "probes")
        for p in probes:
            if not isinstance(p, dict) or not {"block", "level", "time"} <= set(p):
                raise ValidationError("each probe needs block, level and time", "probes")
            if p["time"] > cfg["T"] or p["time"] < 0:
                raise ValidationError(f"probe time {p['time']} lies outside [0, T]", "probes")
            if not 0 <= p["level"] <= k:
                raise ValidationError(f"probe level {p['level']} outside 0..{k}", "probes")
            if not 0 <= p["block"] < (2 ** n3) ** d:
                raise ValidationError(f"probe block {p['block']} does not exist", "probes")
    return ExperimentConfig(cfg)


def _validate_general(g):
    if not isinstance(g, dict) or not isinstance(g.get("states"), int) or g["states"] < 2:
        raise ValidationError("general.states must be an integer >= 2", "general.states")
    for row in g.get("g", []):
        if len(row) != 3 or row[2] < 0:
            raise ValidationError("general.g rows are [i, j, rate] with rate >= 0", "general.g")
    for row in g.get("couplings", []):
        if len(row) != 4 or row[3] < 0:
            raise ValidationError("general.couplings rows are [i, j, l, lambda] with lambda >= 0", "general.couplings")
    if g.get("trigger_mode", "index") not in ("index", "top"):
        raise ValidationError("general.trigger_mode must be 'index' or 'top'", "general.trigger_mode")


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc}", "<file>") from None
    return validate_config(raw)


# ---------------------------------------------------------------------------
# named initial profiles


def _periodic_bump(r, L):
    return np.prod((1 + np.cos(2 * np.pi * (r - L / 2) / L)) / 2, axis=-1)


def make_profile(spec, k, L):
    """Callable ``positions (n, d) -> densities (n, k+1)`` for a named profile.

    ``bump`` puts ``base + amplitude * s(r)`` at level ``k`` with ``s`` a
    smooth periodic bump centred in the box; ``two-phase`` uses ``high`` on
    the lower half of the first axis and ``low`` elsewhere. The remaining
    mass is shared equally among levels below ``k``.
    """
    if isinstance(spec, str):
        spec = {"profile": spec}
    kind = spec["profile"]

    def spread(top):
        top = np.asarray(top, dtype=float)
        out = np.empty(top.shape + (k + 1,))
        out[..., :k] = ((1 - top) / k)[..., None]
        out[..., k] = top
        return out

    if kind == "uniform":
        return lambda r: np.full((len(r), k + 1), 1.0 / (k + 1))
    if kind == "constant":
        row = np.asarray(spec["levels"], dtype=float)
        return lambda r: np.broadcast_to(row, (len(r), k + 1)).copy()
    if kind == "bump":
        base, amp = spec.get("base", 0.1), spec.get("amplitude", 0.5)
        return lambda r: spread(base + amp * _periodic_bump(np.asarray(r, float), L))
    if kind == "two-phase":
        hi, lo = spec.get("high", 0.6), spec.get("low", 0.1)
        return lambda r: spread(np.where(np.asarray(r, float)[:, 0] < L / 2, hi, lo))
    raise ValidationError(f"unknown profile {kind!r}", "rho0.profile")
