"""Plain-text ``key = value`` experiment configuration.

Keys are the field names of ``ProtocolParams``, ``NoiseParams`` and the run
settings below. Blank lines and ``#`` comments are ignored; unknown keys are
an error. Numeric values are plain literals (``1.2e-9``) or products with
``pi`` such as ``2*pi*25.1e9``.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .montecarlo import RunConfig, sweep_schedule, tomography_schedule
from .protocol import NoiseParams, ProtocolParams


class ConfigError(ValueError):
    pass


MODES = ("entangle", "g2", "hom")
SCHEDULES = ("tomography", "sweep")


@dataclass(frozen=True)
class RunSettings:
    n_attempts: int = 10**7
    seed: int = 0
    shard_count: int = 1
    conditioned: bool = True
    stabilizer_bandwidth: float = 1.5e3
    schedule: str = "tomography"
    sweep_points: int = 5
    mode: str = "entangle"
    block: str = "both"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.block not in ("A", "B", "both"):
            raise ValueError("block must be A, B or both")
        if self.sweep_points < 2:
            raise ValueError("sweep_points must be at least 2")


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    run: RunSettings = field(default_factory=RunSettings)

    def schedule(self):
        if self.run.schedule == "sweep":
            return sweep_schedule(np.linspace(0.0, math.pi, self.run.sweep_points))
        return tomography_schedule(self.protocol.delta_phi)

    def run_config(self, **overrides) -> RunConfig:
        r = self.run
        kw = dict(n_attempts=r.n_attempts, seed=r.seed, shard_count=r.shard_count, protocol=self.protocol,
                  noise=self.noise, schedule=self.schedule(), conditioned=r.conditioned,
                  stabilizer_bandwidth=r.stabilizer_bandwidth)
        kw.update(overrides)
        return RunConfig(**kw)

    def as_dict(self) -> dict:
        return {"protocol": asdict(self.protocol), "noise": asdict(self.noise), "run": asdict(self.run)}

    def with_overrides(self, seed=None, shards=None, attempts=None) -> ExperimentConfig:
        changes = {k: v for k, v in (("seed", seed), ("shard_count", shards), ("n_attempts", attempts))
                   if v is not None}
        return replace(self, run=replace(self.run, **changes)) if changes else self


_SECTIONS = {"protocol": ProtocolParams, "noise": NoiseParams, "run": RunSettings}
_KEYS = {f.name: (section, f) for section, cls in _SECTIONS.items() for f in fields(cls)}
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _number(text: str) -> float:
    value = 1.0
    for factor in text.replace(" ", "").split("*"):
        if factor == "pi":
            value *= math.pi
        elif _NUMBER.match(factor):
            value *= float(factor)
        else:
            raise ValueError(f"not a number: {text!r}")
    return value


def _convert(f, text: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int":
        value = _number(text)
        if value != int(value):
            raise ValueError(f"not an integer: {text!r}")
        return int(value)
    if kind == "float":
        return _number(text)
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    updates = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, f = _KEYS[key]
        try:
            updates[section][key] = _convert(f, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    try:
        return ExperimentConfig(**{name: replace(getattr(base, name), **upd) for name, upd in updates.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, values in cfg.as_dict().items():
        lines.append(f"# {section}")
        lines.extend(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in values.items())
    return "\n".join(lines) + "\n"
