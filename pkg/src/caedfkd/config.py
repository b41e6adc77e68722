"""Run configuration: loading, validation, defaults and digests.

Configs are YAML (JSON also parses). Every key is checked against the
dataclass schema below; unknown keys and out-of-range values raise
``ConfigError`` naming the dotted key path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .embedding_space import NoiseSourceSpec, default_sources, validate_sources
from .errors import ConfigError


def _f(default, *, lo=None, hi=None, lo_open=False, choices=None, nullable=False):
    meta = {"lo": lo, "hi": hi, "lo_open": lo_open, "choices": choices, "nullable": nullable}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: copy.deepcopy(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class DataConfig:
    recipe: str = _f("shapes", choices=("shapes",))
    K: int = _f(10, lo=2, hi=10)
    per_class: int = _f(500, lo=10)
    test_fraction: float = _f(0.2, lo=0.0, hi=0.9, lo_open=True)


@dataclass
class EmbeddingsConfig:
    strategy: str = _f("cend", choices=("cend", "gaussian"))
    provider: str = _f("stub", choices=("stub", "file"))
    path: str | None = _f(None, nullable=True)
    prompt_mode: str = _f("name", choices=("name", "index"))
    dim: int = _f(64, lo=2)
    provider_seed: int = _f(0, lo=0)
    gen_dim: int = _f(64, lo=2)
    projection_seed: int = _f(0, lo=0)


@dataclass
class CendConfig:
    n_sources: int = _f(4, lo=1, hi=8)
    # explicit source list; each item {family, <params>, magnitude?}; overrides n_sources
    sources: list | None = _f(None, nullable=True)
    magnitude_scale: float = _f(0.1, lo=0.0)
    n_per_step: int | None = _f(None, lo=0, nullable=True)


@dataclass
class GeneratorConfig:
    lambda_bn: float = _f(1.0, lo=0.0)
    lambda_adv: float = _f(1.0, lo=0.0)
    adv_agree_mask: bool = _f(True)
    lr: float = _f(0.001, lo=0.0, lo_open=True)
    beta1: float = _f(0.5, lo=0.0, hi=1.0)
    beta2: float = _f(0.999, lo=0.0, hi=1.0)
    bank_capacity: int = _f(4096, lo=1)
    base_channels: int = _f(48, lo=4)


@dataclass
class StudentConfig:
    lr: float = _f(0.1, lo=0.0, lo_open=True)
    momentum: float = _f(0.9, lo=0.0, hi=1.0)
    weight_decay: float = _f(5e-4, lo=0.0)
    epochs: int = _f(60, lo=1)
    iters_per_epoch: int = _f(5, lo=1)
    g_steps: int = _f(1, lo=1)
    s_steps: int = _f(5, lo=1)
    batch_size: int = _f(128, lo=2)
    kd_temperature: float = _f(4.0, lo=0.0, lo_open=True)
    tau: float = _f(0.1, lo=0.0, lo_open=True)
    alpha: float = _f(1.0, lo=0.0)
    cncl: bool = _f(True)
    anchor_negatives: bool = _f(True)
    augment: bool = _f(True)
    feature_width: int = _f(64, lo=2)


@dataclass
class ScheduleConfig:
    base_lr: float | None = _f(None, lo=0.0, lo_open=True, nullable=True)  # None -> student.lr
    min_lr: float = _f(0.0, lo=0.0)
    horizon: int | None = _f(None, lo=1, nullable=True)  # None -> total student steps


@dataclass
class TeacherConfig:
    epochs: int = _f(8, lo=0)
    lr: float = _f(0.002, lo=0.0, lo_open=True)
    batch_size: int = _f(64, lo=2)
    accuracy_floor: float = _f(0.95, lo=0.0, hi=1.0)


@dataclass
class EvalConfig:
    low_conf_threshold: float = _f(0.1, lo=0.0, hi=1.0, lo_open=True)


@dataclass
class RunConfig:
    seed: int = _f(0, lo=0)
    data: DataConfig = field(default_factory=DataConfig)
    embeddings: EmbeddingsConfig = field(default_factory=EmbeddingsConfig)
    cend: CendConfig = field(default_factory=CendConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str | None = _f(None, nullable=True)

    # ---------------------------------------------------------------- derived

    @property
    def base_lr(self) -> float:
        return self.schedule.base_lr if self.schedule.base_lr is not None else self.student.lr

    @property
    def student_steps_per_epoch(self) -> int:
        return self.student.iters_per_epoch * self.student.s_steps

    @property
    def generator_steps_per_epoch(self) -> int:
        return self.student.iters_per_epoch * self.student.g_steps

    @property
    def horizon(self) -> int:
        if self.schedule.horizon is not None:
            return self.schedule.horizon
        return self.student.epochs * self.student_steps_per_epoch

    @property
    def uses_cncl(self) -> bool:
        return self.student.cncl and self.student.alpha > 0 and self.embeddings.strategy == "cend"

    def noise_sources(self, rms: float) -> list[NoiseSourceSpec]:
        """Resolve the configured noise sources; default magnitude is scale * RMS of E_off row norms."""
        magnitude = self.cend.magnitude_scale * rms
        if self.cend.sources is None:
            return default_sources(self.cend.n_sources, magnitude)
        out = []
        for i, item in enumerate(self.cend.sources):
            item = dict(item)
            fam = item.pop("family")
            mag = item.pop("magnitude", magnitude)
            out.append(NoiseSourceSpec.make(i + 1, fam, magnitude=mag, **item))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, overrides: dict[str, Any]) -> "RunConfig":
        """Copy with dotted-path overrides applied, then re-validated."""
        raw = self.to_dict()
        for path, value in overrides.items():
            node = raw
            keys = path.split(".")
            for k in keys[:-1]:
                if not isinstance(node.get(k), dict):
                    raise ConfigError(f"unknown config key {path}")
                node = node[k]
            if keys[-1] not in node:
                raise ConfigError(f"unknown config key {path}")
            node[keys[-1]] = copy.deepcopy(value)
        return config_from_dict(raw)


REQUIRED_SECTIONS = ("data", "seed")


def _check_value(path: str, value, f) -> Any:
    meta = f.metadata
    if value is None:
        if meta.get("nullable"):
            return None
        raise ConfigError(f"{path} must not be null")
    kind = f.type.split(" | ")[0]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        value = float(value)
    elif kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
    elif kind == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
    lo, hi = meta.get("lo"), meta.get("hi")
    if lo is not None:
        if meta.get("lo_open") and not value > lo:
            raise ConfigError(f"{path} must be > {lo:g}")
        if not meta.get("lo_open") and not value >= lo:
            raise ConfigError(f"{path} must be >= {lo:g}")
    if hi is not None and not value <= hi:
        raise ConfigError(f"{path} must be <= {hi:g}")
    if meta.get("choices") and value not in meta["choices"]:
        raise ConfigError(f"{path} must be one of {list(meta['choices'])}, got {value!r}")
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key}")
    kwargs = {}
    for name, f in known.items():
        path = f"{prefix}{name}"
        if name not in raw:
            continue
        default_obj = f.default_factory() if f.default_factory is not MISSING else None
        if is_dataclass(default_obj):
            kwargs[name] = _build(type(default_obj), raw[name] if raw[name] is not None else {}, path + ".")
        else:
            kwargs[name] = _check_value(path, raw[name], f)
    return cls(**kwargs)


def config_from_dict(raw: dict, *, require_sections: bool = False) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    if require_sections:
        for sec in REQUIRED_SECTIONS:
            if sec not in raw:
                raise ConfigError(f"missing required config section {sec}")
    cfg = _build(RunConfig, raw, "")
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: RunConfig) -> None:
    if cfg.embeddings.provider == "file" and not cfg.embeddings.path:
        raise ConfigError("embeddings.path is required when embeddings.provider is 'file'")
    if cfg.schedule.min_lr > cfg.base_lr:
        raise ConfigError("schedule.min_lr must be <= schedule.base_lr")
    if cfg.cend.sources is not None:
        if not cfg.cend.sources:
            raise ConfigError("cend.sources must not be empty")
        for i, item in enumerate(cfg.cend.sources):
            if not isinstance(item, dict) or "family" not in item:
                raise ConfigError(f"cend.sources[{i}] needs a 'family' key")
    try:
        sources = cfg.noise_sources(1.0)
        validate_sources(sources)
    except ConfigError as exc:
        raise ConfigError(f"cend.sources: {exc}") from None
    n = len(sources)
    if cfg.cend.n_per_step is not None and cfg.cend.n_per_step > n:
        raise ConfigError(f"cend.n_per_step must be <= number of sources ({n})")
    if cfg.student.cncl and cfg.student.alpha > 0 and cfg.data.K < 2:
        raise ConfigError("contrastive training requires >= 2 categories (data.K)")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw or {}, require_sections=True)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
