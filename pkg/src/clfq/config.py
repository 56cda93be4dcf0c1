"""Run configuration: one JSON file covering all modules, plus flag overrides.

Unknown keys are rejected so typos fail loudly; every run logs the fully
resolved configuration.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .forest import TrainParams
from .metrics import EdcConfig
from .preprocess import PreprocessConfig
from .sharpness import SharpnessConfig

log = logging.getLogger("clfq")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 100
    samples_per_finger: int = 1

    def __post_init__(self):
        if self.n_per_class < 1 or self.samples_per_finger < 1:
            raise ValueError("synth counts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    sharpness: SharpnessConfig = field(default_factory=SharpnessConfig)
    train: TrainParams = field(default_factory=TrainParams)
    edc: EdcConfig = field(default_factory=EdcConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def resolved(self) -> dict:
        out = {"seed": self.seed, "jobs": self.jobs}
        for section in ("preprocess", "sharpness", "train", "edc", "synth"):
            out[section] = dataclasses.asdict(getattr(self, section))
        return out


_SECTIONS = {
    "preprocess": PreprocessConfig,
    "sharpness": SharpnessConfig,
    "train": TrainParams,
    "edc": EdcConfig,
    "synth": SynthConfig,
}

_TUPLE_FIELDS = {
    "clahe_schedule",
    "acceptable_period_range",
    "outer_ellipse",
    "calibration",
    "c_range",
}


def _build_section(cls, payload: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")
    coerced = {}
    for key, value in payload.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, *, seed=None, jobs=None) -> RunConfig:
    """Build a RunConfig from an optional JSON file and flag overrides."""
    doc = {}
    if path is not None:
        raw = Path(path).read_text()
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")

    unknown = set(doc) - (set(_SECTIONS) | {"seed", "jobs"})
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")

    kwargs = {}
    if "seed" in doc:
        kwargs["seed"] = int(doc["seed"])
    if "jobs" in doc:
        kwargs["jobs"] = int(doc["jobs"])
    for name, cls in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"{path}: section {name!r} must be an object")
            kwargs[name] = _build_section(cls, doc[name], f"{path}:{name}")
    if seed is not None:
        kwargs["seed"] = seed
    if jobs is not None:
        kwargs["jobs"] = jobs
    cfg = RunConfig(**kwargs)
    log.info("resolved config: %s", json.dumps(cfg.resolved(), sort_keys=True))
    return cfg
