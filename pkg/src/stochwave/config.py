"""Run configuration: parsing, validation, digest, and object construction.

The file format is TOML with fixed sections; unknown keys anywhere are
rejected (a silent typo in beta or K invalidates an experiment), duplicate
keys are rejected by the parser, and every validation failure names the
field and its accepted range.  The content digest of the canonical
configuration is embedded in every output file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from typing import Optional

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .kernels import MollifierFamily, SpectralMeasureSpec
from .noise import build_grid, discretize_measure
from .solver import SolverConfig, coefficients


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_MEASURE_KINDS = ("riesz", "dirac-at-zero", "lebesgue", "table")
_MOLLIFIER_FAMILIES = ("band-limit", "gaussian", "fejer")
_COEFF_NAMES = ("zero", "const", "linear", "sin", "table")
_SUITES = ("check-kernel", "simulate", "malliavin", "density", "verify")

ENV_OUTPUT_ROOT = "STOCHWAVE_OUT"


@dataclasses.dataclass
class RunConfig:
    """Complete experiment description; see `defaults()` for the documented defaults."""

    # grid
    d: int = 1
    L: float = 1.0
    K: int = 4
    # measure
    measure_kind: str = "lebesgue"
    beta: Optional[float] = None
    table_radii: Optional[list] = None
    table_values: Optional[list] = None
    # kernel
    kernel_kind: str = "wave"
    # mollifier
    mollifier_family: str = "band-limit"
    mollifier_n: float = 8.0
    # time grid
    T: float = 1.0
    n_steps: int = 16
    # coefficients
    sigma: str = "const"
    sigma_param: Optional[float] = 1.0
    b: str = "zero"
    b_param: Optional[float] = None
    # run
    replicas: int = 400
    seed: int = 0
    workers: int = 1
    batch: int = 128
    out: Optional[str] = None
    shifted_all_terms: bool = False
    # target
    target_t: Optional[float] = None     # defaults to T
    target_x: Optional[list] = None      # defaults to the origin
    # schedules
    delta_schedule: Optional[list] = None       # defaults to T * (1/2, 1/4, 1/8, 1/16)
    eps_schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    mollifier_schedule: tuple = (1.0, 2.0, 4.0, 8.0, 16.0)
    bh_schedule: tuple = (10.0, 100.0, 1000.0)

    # ------------------------------------------------------------------
    def canonical_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_t"] = self.resolved_target_t()
        d["target_x"] = list(self.resolved_target_x())
        d["delta_schedule"] = list(self.resolved_delta_schedule())
        for k in ("eps_schedule", "mollifier_schedule", "bh_schedule"):
            d[k] = list(d[k])
        d.pop("out", None)     # the output location does not affect the numbers
        d.pop("workers", None)  # nor does the worker count, by contract
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolved_target_t(self) -> float:
        return self.T if self.target_t is None else self.target_t

    def resolved_target_x(self) -> tuple:
        if self.target_x is None:
            return (0,) * self.d
        return tuple(int(i) for i in self.target_x)

    def resolved_delta_schedule(self) -> tuple:
        if self.delta_schedule is None:
            t = self.resolved_target_t()
            return tuple(t * f for f in (0.5, 0.25, 0.125, 0.0625))
        return tuple(float(x) for x in self.delta_schedule)

    def output_root(self) -> str:
        if self.out:
            return self.out
        return os.environ.get(ENV_OUTPUT_ROOT, "stochwave-out")

    # ------------------------------------------------------------------
    def validate(self) -> "RunConfig":
        def fail(field, got, accepted):
            raise ConfigError(f"field '{field}': got {got!r}, accepted: {accepted}")

        if not isinstance(self.d, int) or self.d < 1:
            fail("grid.d", self.d, "integer >= 1")
        if self.L <= 0:
            fail("grid.L", self.L, "real > 0")
        if not isinstance(self.K, int) or self.K < 0:
            fail("grid.K", self.K, "integer >= 0")
        if self.measure_kind not in _MEASURE_KINDS:
            fail("measure.kind", self.measure_kind, _MEASURE_KINDS)
        if self.measure_kind == "riesz":
            if self.beta is None or not 0.0 < float(self.beta) < self.d:
                fail("measure.beta", self.beta, f"real in ]0, {self.d}[ (need beta < d)")
        if self.measure_kind == "table" and (self.table_radii is None or self.table_values is None):
            fail("measure.table_radii/table_values", None, "radial sample arrays")
        if self.kernel_kind != "wave":
            fail("kernel.kind", self.kernel_kind, "'wave' (only the wave kernel ships)")
        if self.mollifier_family not in _MOLLIFIER_FAMILIES:
            fail("mollifier.family", self.mollifier_family, _MOLLIFIER_FAMILIES)
        if self.mollifier_n < 1:
            fail("mollifier.n", self.mollifier_n, "real >= 1")
        if self.T <= 0:
            fail("time.T", self.T, "real > 0")
        if not isinstance(self.n_steps, int) or self.n_steps < 1:
            fail("time.n_steps", self.n_steps, "integer >= 1")
        if self.sigma not in _COEFF_NAMES:
            fail("coefficients.sigma", self.sigma, _COEFF_NAMES)
        if self.b not in _COEFF_NAMES:
            fail("coefficients.b", self.b, _COEFF_NAMES)
        if not isinstance(self.replicas, int) or self.replicas < 1:
            fail("run.replicas", self.replicas, "integer >= 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            fail("run.seed", self.seed, "integer >= 0")
        if not isinstance(self.workers, int) or self.workers < 1:
            fail("run.workers", self.workers, "integer >= 1")
        if not isinstance(self.batch, int) or self.batch < 1:
            fail("run.batch", self.batch, "integer >= 1")
        t = self.resolved_target_t()
        dt = self.T / self.n_steps
        if not 0.0 < t <= self.T or abs(t / dt - round(t / dt)) > 1e-9:
            fail("target.t", t, f"grid time in ]0, {self.T}] (multiple of {dt})")
        x = self.resolved_target_x()
        n = 2 * self.K + 1
        if len(x) != self.d or any(not 0 <= xi < n for xi in x):
            fail("target.x", x, f"{self.d} lattice indices in [0, {n})")
        for name, sched, want in (
                ("schedules.delta", self.resolved_delta_schedule(), "positive grid multiples <= target t"),
                ("schedules.eps", self.eps_schedule, "positive decreasing"),
                ("schedules.mollifier_n", self.mollifier_schedule, ">= 1 increasing"),
                ("schedules.bh_n", self.bh_schedule, "positive increasing")):
            arr = list(sched)
            if not arr or any(v <= 0 for v in arr):
                fail(name, arr, want)
        for delta in self.resolved_delta_schedule():
            if delta > t + 1e-12 or abs(delta / dt - round(delta / dt)) > 1e-9:
                fail("schedules.delta", delta, f"grid multiple of {dt} within ]0, {t}]")
        if not all(later < earlier for later, earlier in
                   zip(self.eps_schedule[1:], self.eps_schedule[:-1])):
            fail("schedules.eps", list(self.eps_schedule), "strictly decreasing")
        if list(self.mollifier_schedule) != sorted(set(self.mollifier_schedule)):
            fail("schedules.mollifier_n", list(self.mollifier_schedule), "strictly increasing")
        if list(self.bh_schedule) != sorted(set(self.bh_schedule)):
            fail("schedules.bh_n", list(self.bh_schedule), "strictly increasing")
        return self

    # ------------------------------------------------------------------
    def measure_spec(self) -> SpectralMeasureSpec:
        if self.measure_kind == "riesz":
            return SpectralMeasureSpec("riesz", beta=float(self.beta))
        if self.measure_kind == "table":
            return SpectralMeasureSpec("table", table_radii=tuple(self.table_radii),
                                       table_values=tuple(self.table_values))
        return SpectralMeasureSpec(self.measure_kind)

    def mollifier(self) -> MollifierFamily:
        return MollifierFamily(self.mollifier_family, self.mollifier_n)

    def build(self):
        """(grid, measure, solver config, coefficients) from the validated fields."""
        self.validate()
        grid = build_grid(self.d, self.L, self.K)
        measure = discretize_measure(self.measure_spec(), grid)
        scfg = SolverConfig(grid, measure, self.T, self.n_steps,
                            mollifier=self.mollifier(),
                            shifted_all_terms=self.shifted_all_terms)
        sigma_spec = (self.sigma, self.sigma_param) if self.sigma_param is not None else self.sigma
        b_spec = (self.b, self.b_param) if self.b_param is not None else self.b
        coeffs = coefficients(sigma_spec, b_spec)
        return grid, measure, scfg, coeffs


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SECTION_FIELDS = {
    "grid": {"d": "d", "L": "L", "K": "K"},
    "measure": {"kind": "measure_kind", "beta": "beta",
                "table_radii": "table_radii", "table_values": "table_values"},
    "kernel": {"kind": "kernel_kind"},
    "mollifier": {"family": "mollifier_family", "n": "mollifier_n"},
    "time": {"T": "T", "n_steps": "n_steps"},
    "coefficients": {"sigma": "sigma", "sigma_param": "sigma_param",
                     "b": "b", "b_param": "b_param"},
    "run": {"replicas": "replicas", "seed": "seed", "workers": "workers",
            "batch": "batch", "out": "out", "shifted_all_terms": "shifted_all_terms"},
    "target": {"t": "target_t", "x": "target_x"},
    "schedules": {"delta": "delta_schedule", "eps": "eps_schedule",
                  "mollifier_n": "mollifier_schedule", "bh_n": "bh_schedule"},
}

_INT_FIELDS = {"d", "K", "n_steps", "replicas", "seed", "workers", "batch"}


def _assign(cfg_kw: dict, section: str, key: str, value):
    fields = _SECTION_FIELDS.get(section)
    if fields is None:
        raise ConfigError(f"unknown section '[{section}]'; accepted: {sorted(_SECTION_FIELDS)}")
    if key not in fields:
        raise ConfigError(f"unknown key '{section}.{key}'; accepted: {sorted(fields)}")
    name = fields[key]
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field '{section}.{key}': got {value!r}, accepted: integer")
    cfg_kw[name] = value


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the TOML file, then flag overrides; validated strictly."""
    kw = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from exc
        for section, content in data.items():
            if not isinstance(content, dict):
                raise ConfigError(f"top-level key '{section}' must be a section")
            for key, value in content.items():
                _assign(kw, section, key, value)
    cfg = RunConfig(**kw)
    if overrides:
        for name, value in overrides.items():
            if value is None:
                continue
            if not hasattr(cfg, name):
                raise ConfigError(f"unknown override '{name}'")
            setattr(cfg, name, value)
    cfg.validate()
    return cfg


def defaults() -> RunConfig:
    return RunConfig()
