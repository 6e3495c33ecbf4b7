"""Run configuration: TOML sections mapped onto dataclasses, with strict key checking."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .io import dumps

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class PhysicsSection:
    f0: float = 68.5e3
    Q: float = 1000.0
    input_mask: str = "perimeter"
    output_site: str = "center"


@dataclass
class DatasetSection:
    kind: str = "spectral"
    n_per_class: int = 50
    seed: int = 0
    snr_db: float = 20.0
    duration_s: float = 2e-3
    tail_s: float = 0.0
    test_fraction: float = 0.4
    manifest: str = ""
    cache: str = "dataset"


@dataclass
class SurrogateSection:
    n_train: int = 800
    seed: int = 0
    ridge: float = 1e-10
    path: str = "surrogate.json"


@dataclass
class TrainingSection:
    shape: list = field(default_factory=lambda: [3, 3])
    iterations: int = 300
    restarts: int = 3
    correction_period: int = 30
    correction_ramp: int = 5
    corrections: bool = True
    loss_scale: float = 1.0
    bounds: list = field(default_factory=lambda: [0.0, 1.0])
    seed: int = 0
    model_source: str = "surrogate"
    threads: int = 1


@dataclass
class DeepSection:
    enabled: bool = False
    f_s1: float = 66e3
    f_s2: float = 71e3
    f_c: float = 10e3
    Q_s: float = 100.0
    Q_c: float = 2.0
    gamma_shift: float = 3.0
    iterations: int = 60
    restarts: int = 2
    step: float = 1.0


@dataclass
class OutputSection:
    dir: str = "out"


@dataclass
class RunConfig:
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    deep: DeepSection = field(default_factory=DeepSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self):
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(dumps(self.to_dict()).encode()).hexdigest()[:16]


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _coerce(section, name, value, current):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {name} must be true or false")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {name} must be an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {name} must be a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {name} must be a string")
        return value
    if isinstance(current, list):
        if not isinstance(value, list) or len(value) != len(current):
            raise ConfigError(f"[{section}] {name} must be a list of {len(current)} values")
        return [type(c)(v) for c, v in zip(current, value)]
    return value


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for sec, values in data.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{sec}] must be a table")
        obj = getattr(cfg, sec)
        known = {f.name for f in fields(obj)}
        for k, v in values.items():
            if k not in known:
                raise ConfigError(f"unknown key {k!r} in [{sec}]")
            setattr(obj, k, _coerce(sec, k, v, getattr(obj, k)))
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(data)


def override(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply ``section.key=value`` where ``value`` is parsed as a TOML value (bare words are strings)."""
    sec, _, key = dotted.partition(".")
    if sec not in SECTIONS or not key:
        raise ConfigError(f"override {dotted!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    obj = getattr(cfg, sec)
    if key not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown key {key!r} in [{sec}]")
    setattr(obj, key, _coerce(sec, key, value, getattr(obj, key)))
    validate(cfg)


def validate(cfg: RunConfig) -> None:
    d, t = cfg.dataset, cfg.training
    if d.kind not in ("spectral", "temporal", "speech"):
        raise ConfigError("dataset.kind must be spectral, temporal or speech")
    if d.kind == "speech" and not d.manifest:
        raise ConfigError("dataset.kind = speech needs dataset.manifest")
    if d.n_per_class < 1:
        raise ConfigError("dataset.n_per_class must be >= 1")
    if not 0 < d.test_fraction < 1:
        raise ConfigError("dataset.test_fraction must lie in (0, 1)")
    if t.iterations < 1 or t.restarts < 1:
        raise ConfigError("training.iterations and training.restarts must be >= 1")
    if min(t.shape) < 1:
        raise ConfigError("training.shape entries must be >= 1")
    if t.model_source not in ("surrogate", "oracle"):
        raise ConfigError("training.model_source must be surrogate or oracle")
    if not 0 <= t.bounds[0] < t.bounds[1] <= 1:
        raise ConfigError("training.bounds must satisfy 0 <= lo < hi <= 1")
    if cfg.physics.Q <= 0 or cfg.physics.f0 <= 0:
        raise ConfigError("physics.Q and physics.f0 must be positive")
    if cfg.deep.iterations < 1 or cfg.deep.restarts < 1:
        raise ConfigError("deep.iterations and deep.restarts must be >= 1")
    if d.tail_s < 0 or d.duration_s <= 0:
        raise ConfigError("dataset.duration_s must be positive and dataset.tail_s non-negative")
    if t.threads < 1:
        raise ConfigError("training.threads must be >= 1")
