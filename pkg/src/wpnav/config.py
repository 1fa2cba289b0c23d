"""Run configuration: flat ``key = value`` text with one dotted section prefix.

Example::

    map = maps/rooms.txt
    seed = 3
    ppo.gamma = 0.95
    curriculum.kind = swpn
    curriculum.stage_scale = 0.01
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .agent import PpoConfig
from .curriculum import KINDS, SWP10_STAGES, CurriculumSchedule, format_stages, parse_stages
from .errors import ConfigError
from .perception import MEAN_MU, SAMPLE_Z


@dataclass
class PerceptionConfig:
    n_z: int = 16
    encode_mode: str = SAMPLE_Z
    batch: int = 64
    iterations: int = 5000
    lr: float = 1e-3
    beta: float = 1.0
    n_poses: int = 200


@dataclass
class CurriculumConfig:
    kind: str = "pointnav"
    n: int = 4
    stages: str = format_stages(SWP10_STAGES)
    f_start: float = 0.2
    f_end: float = 1.0
    ramp_episodes: int = 64_000
    stage_scale: float = 1.0

    def schedule(self) -> CurriculumSchedule:
        sched = CurriculumSchedule(self.kind, n=self.n, stages=parse_stages(self.stages),
                                   f_start=self.f_start, f_end=self.f_end,
                                   ramp_episodes=self.ramp_episodes)
        return sched.scaled(self.stage_scale)


@dataclass
class TrainingConfig:
    total_steps: int = 100_000
    total_episodes: int = 0          # 0: stop on total_steps only
    max_steps: int = 500
    min_geodesic: float = 1.0


@dataclass
class EvaluationConfig:
    suite_size: int = 500
    suite_seed: int = 0


@dataclass
class RunConfig:
    map: str = ""
    seed: int = 0
    out: str = "runs"
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self) -> "RunConfig":
        if self.perception.encode_mode not in (SAMPLE_Z, MEAN_MU):
            raise ConfigError(f"perception.encode_mode must be {SAMPLE_Z} or {MEAN_MU}")
        if self.perception.n_z < 1 or self.perception.batch < 1 or self.perception.iterations < 0:
            raise ConfigError("perception.n_z and batch must be >= 1, iterations >= 0")
        if self.curriculum.kind not in KINDS:
            raise ConfigError(f"curriculum.kind must be one of {KINDS}")
        if not self.curriculum.stage_scale > 0:
            raise ConfigError("curriculum.stage_scale must be > 0")
        self.curriculum.schedule()
        PpoConfig(**{f.name: getattr(self.ppo, f.name) for f in fields(PpoConfig)})
        return self

    def to_text(self) -> str:
        lines = []
        for key, value in flatten(self):
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_SECTIONS = ("perception", "ppo", "curriculum", "training", "evaluation")


def flatten(cfg: RunConfig):
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for g in fields(value):
                yield f"{f.name}.{g.name}", getattr(value, g.name)
        else:
            yield f.name, value


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    known = dict(flatten(cfg))
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        value = _convert(raw, known[key], key)
        if "." in key:
            section, name = key.split(".", 1)
            setattr(cfg, section, replace(getattr(cfg, section), **{name: value}))
        else:
            setattr(cfg, key, value)
    return cfg.validate()


def parse_config(text: str) -> RunConfig:
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        items[key] = value
    return apply_overrides(RunConfig(), items)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
