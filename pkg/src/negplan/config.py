"""Run configuration: a strict YAML schema with environment overrides.

Every key is optional; unknown keys are rejected.  Overrides are read from
environment variables prefixed ``NEGPLAN_``, with ``__`` separating nesting
levels, e.g. ``NEGPLAN_SFT__LR_ACTION=0.01`` or ``NEGPLAN_SEED=3``.  Values
are parsed as YAML scalars.

Schema::

    seed: int                     # drives weight init, SFT order, GRPO noise
    scenes:
      templates: [str, ...]       # cycled over scene indices
      train_count: int
      train_seed_offset: int
      holdout_count: int
      holdout_seed_offset: int
    csp:
      workers: int                # process count for labelling
    sft: {SftConfig fields}
    grpo: {GrpoConfig fields}
    paths:                        # relative paths resolve against --out-dir
      scenes_train, scenes_holdout, csp_train, csp_holdout,
      checkpoints, traces, reports
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .grpo import GrpoConfig
from .scenario import Template
from .sft import SftConfig

ENV_PREFIX = "NEGPLAN_"


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` style floats (YAML 1.2 syntax)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _parse(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    templates: tuple[str, ...] = tuple(t.value for t in Template)
    train_count: int = 200
    train_seed_offset: int = 0
    holdout_count: int = 50
    holdout_seed_offset: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise ConfigError("scenes.templates must not be empty")
        for t in self.templates:
            try:
                Template(t)
            except ValueError:
                raise ConfigError(f"unknown template {t!r}") from None
        if min(self.train_count, self.holdout_count, self.train_seed_offset, self.holdout_seed_offset) < 0:
            raise ConfigError("scene counts and seed offsets must be non-negative")


@dataclass(frozen=True)
class CspSettings:
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("csp.workers must be >= 1")


@dataclass(frozen=True)
class PathConfig:
    scenes_train: str = "scenes/train.jsonl"
    scenes_holdout: str = "scenes/holdout.jsonl"
    csp_train: str = "csp/train.jsonl"
    csp_holdout: str = "csp/holdout.jsonl"
    checkpoints: str = "checkpoints"
    traces: str = "traces"
    reports: str = "reports"

    def resolve(self, name: str, out_dir) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(out_dir) / p


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenes: SceneConfig = field(default_factory=SceneConfig)
    csp: CspSettings = field(default_factory=CspSettings)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every trainer."""
        return dataclasses.replace(
            self,
            seed=seed,
            sft=dataclasses.replace(self.sft, seed=seed),
            grpo=dataclasses.replace(self.grpo, seed=seed),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scenes"]["templates"] = list(self.scenes.templates)
        return d


_SECTIONS = {"scenes": SceneConfig, "csp": CspSettings, "sft": SftConfig, "grpo": GrpoConfig, "paths": PathConfig}


def _check_type(where: str, value, expected):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got bool")
    if expected in (int, float, str, bool) and not isinstance(value, expected):
        raise ConfigError(f"{where}: expected {expected.__name__}, got {type(value).__name__}")
    return value


def _build(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        if key in _SECTIONS and cls is RunConfig:
            kwargs[key] = _build(_SECTIONS[key], value or {}, key)
        elif key == "templates":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.templates: expected a list")
            kwargs[key] = tuple(value)
        else:
            expected = {"int": int, "float": float, "str": str, "bool": bool}.get(str(f.type), None)
            kwargs[key] = _check_type(f"{where}.{key}", value, expected) if expected else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: Mapping) -> RunConfig:
    data = data or {}
    cfg = _build(RunConfig, data, "config")

    def explicit(section):
        return isinstance(data.get(section), Mapping) and "seed" in data[section]

    # trainer seeds follow the top-level seed unless given explicitly
    return dataclasses.replace(
        cfg,
        sft=cfg.sft if explicit("sft") else dataclasses.replace(cfg.sft, seed=cfg.seed),
        grpo=cfg.grpo if explicit("grpo") else dataclasses.replace(cfg.grpo, seed=cfg.seed),
    )


def loads(text: str) -> RunConfig:
    try:
        data = _parse(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(data or {})


def dumps(cfg: RunConfig) -> str:
    """Canonical YAML; ``dumps(loads(dumps(c))) == dumps(c)``."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def load(path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested override mapping built from ``NEGPLAN_*`` variables."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = name[len(ENV_PREFIX):].lower().split("__")
        if not all(keys):
            raise ConfigError(f"malformed override variable {name}")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {name} conflicts with a scalar")
        try:
            node[keys[-1]] = _parse(environ[name])
        except yaml.YAMLError:
            raise ConfigError(f"override {name}: unparsable value") from None
    return out


def _merge(base: dict, extra: Mapping) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(path=None, environ: Mapping[str, str] | None = None, seed: int | None = None) -> RunConfig:
    """File, then environment, then an explicit seed; later sources win."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = _parse(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data = _merge(data, env_overrides(environ))
    cfg = from_dict(data)
    return cfg.with_seed(seed) if seed is not None else cfg
