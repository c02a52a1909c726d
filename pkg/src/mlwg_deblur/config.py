"""Run configuration: flat ``key = value`` files with line-precise errors.

Blank lines and ``#`` comments are ignored.  Every key has a default, so an
empty file is a valid configuration.  Command-line overrides are applied on
top and reported as coming from ``<command line>``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "apply_overrides", "SAMPLERS", "PSF_KINDS"]

SAMPLERS = ("mala", "mlwg", "mlwg-parallel")
PSF_KINDS = ("gaussian", "motion", "box", "delta")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and line."""


@dataclass
class RunConfig:
    truth: str = ""                 # ground-truth image path, or "phantom:<n>"
    data: str = ""                  # observation (.npy keeps full precision)
    output: str = "out"
    n: int = 0                      # 0: take the side from the image
    crop: str = "center"            # how a larger image is cut down to n: center | topleft
    m: int = 64
    psf: str = "gaussian"
    psf_radius: int = 8
    psf_sigma: float = 8.0
    motion_length: int = 17
    motion_angle: float = 45.0
    noise_std: float = 0.01
    lam: float = 0.0                # 0: 1 / noise_std**2
    delta: float = 35.80
    epsilon: float = 1e-5
    sampler: str = "mlwg-parallel"
    n_chains: int = 5
    n_saved: int = 2000
    thin: int = 200
    burn_in: int = 31250
    target_accept: float = 0.547
    tau: float = 0.0                # 0: automatic initial step size
    adapt: bool = True
    seed: int = 0
    init: str = "random"            # chain start: random (uniform on [0, 1]) | data
    workers: int = 1
    ci_level: float = 0.9
    map_tol: float = 1e-8
    map_max_outer: int = 200
    map_max_cg: int = 500
    lines: dict = field(default_factory=dict, repr=False, compare=False)
    source: str = field(default="<defaults>", repr=False, compare=False)

    # -- derived values --

    @property
    def noise_precision(self) -> float:
        if self.lam > 0:
            return self.lam
        if self.noise_std > 0:
            return 1.0 / self.noise_std**2
        return math.inf

    def where(self, key: str) -> str:
        line = self.lines.get(key)
        if line == "cli":
            return "<command line>"
        if line is None:
            return "<defaults>"
        return f"{self.source}:{line}"

    def fail(self, key: str, message: str):
        raise ConfigError(f"{self.where(key)}: {key}: {message}")

    def as_dict(self, with_output: bool = True) -> dict:
        skip = ("lines", "source") if with_output else ("lines", "source", "output")
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}

    def digest(self) -> str:
        """Hash of everything that determines a run's results (the output path does not)."""
        blob = json.dumps(self.as_dict(with_output=False), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- validation --

    def psf_radius_value(self) -> int:
        if self.psf == "delta":
            return 0
        if self.psf == "motion":
            from .forward import motion_psf
            return motion_psf(self.motion_length, self.motion_angle).radius
        return self.psf_radius

    def validate(self, sampling: bool = False) -> "RunConfig":
        if self.psf not in PSF_KINDS:
            self.fail("psf", f"unknown PSF {self.psf!r}; choose from {', '.join(PSF_KINDS)}")
        if self.sampler not in SAMPLERS:
            self.fail("sampler", f"unknown sampler {self.sampler!r}; choose from {', '.join(SAMPLERS)}")
        if self.init not in ("random", "data"):
            self.fail("init", f"expected random or data, got {self.init!r}")
        if self.crop not in ("center", "topleft"):
            self.fail("crop", f"expected center or topleft, got {self.crop!r}")
        if self.psf_radius < 0:
            self.fail("psf_radius", "must be non-negative")
        if self.psf == "gaussian" and not self.psf_sigma > 0:
            self.fail("psf_sigma", "must be positive")
        if self.psf == "motion" and self.motion_length < 1:
            self.fail("motion_length", "must be at least 1")
        if self.n < 0:
            self.fail("n", "must be non-negative")
        if self.m < 1:
            self.fail("m", "must be positive")
        r = self.psf_radius_value()
        if self.m <= 2 * r:
            self.fail("m", f"block side {self.m} must exceed twice the PSF radius ({2 * r})")
        if self.n and self.n % self.m:
            self.fail("m", f"block side {self.m} does not divide image side {self.n}")
        if self.noise_std < 0:
            self.fail("noise_std", "must be non-negative")
        if self.lam < 0:
            self.fail("lam", "must be non-negative (0 selects 1/noise_std^2)")
        if self.delta < 0:
            self.fail("delta", "must be non-negative")
        if self.epsilon < 0:
            self.fail("epsilon", "must be non-negative")
        if not 0 < self.target_accept < 1:
            self.fail("target_accept", "must lie in (0, 1)")
        if not 0 < self.ci_level < 1:
            self.fail("ci_level", "must lie in (0, 1)")
        for key in ("n_chains", "thin", "workers", "map_max_outer", "map_max_cg"):
            if getattr(self, key) < 1:
                self.fail(key, "must be at least 1")
        for key in ("n_saved", "burn_in", "seed"):
            if getattr(self, key) < 0:
                self.fail(key, "must be non-negative")
        if self.tau < 0:
            self.fail("tau", "must be non-negative (0 selects an automatic step)")
        if sampling:
            if not self.epsilon > 0:
                self.fail("epsilon", "sampling needs epsilon > 0")
            if not math.isfinite(self.noise_precision):
                self.fail("noise_std", "sampling needs noise_std > 0 or an explicit lam")
        return self


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
          for f in fields(RunConfig) if f.name not in ("lines", "source")}


def _set(cfg: RunConfig, key: str, raw: str, where: str):
    if key not in _TYPES:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        setattr(cfg, key, _convert(_TYPES[key], raw))
    except ValueError as exc:
        raise ConfigError(f"{where}: {key}: {exc}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig(source=source)
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key in cfg.lines:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {cfg.lines[key]})")
        _set(cfg, key, raw, where)
        cfg.lines[key] = lineno
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Command-line values replace file values; they report as ``<command line>``."""
    out = dataclasses.replace(cfg, lines=dict(cfg.lines))
    for key, raw in overrides.items():
        _set(out, key, str(raw), "<command line>")
        out.lines[key] = "cli"
    return out
