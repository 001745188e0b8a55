"""Run configuration: one YAML file, defaults for everything, ``APK_*`` overrides.

Every leaf key ``section.key`` (or ``section.sub.key``) can be overridden by an
environment variable ``APK_SECTION_KEY`` / ``APK_SECTION_SUB_KEY``; these are
applied after the file. ``dump_config`` writes each value with a trailing
comment naming where it came from.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from .interaction import AimConfig
from .llm import HttpBackend, LLMBackend, MockBackend
from .mini_clip import TextConfig, VisionConfig
from .prompts import PromptConfig
from .retrieval import RerankConfig
from .substrate import ConfigError
from .training import Schedule, StagePlan, TripletLossConfig

ENV_PREFIX = "APK_"


@dataclass
class PathsConfig:
    work: str = "work"
    corpus: str = "work/corpus"
    captions: str = "work/captions.jsonl"
    knowledge: str = "work/knowledge.jsonl"
    llm_cache: str = "work/llm-cache"
    runs: str = "work/runs"

    def validate(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name):
                raise ConfigError(f"paths.{f.name} must not be empty")


@dataclass
class CorpusConfig:
    train: int = 256
    val: int = 64
    test: int = 64
    image_size: int = 32
    seed: int = 0

    def validate(self):
        if min(self.train, self.val, self.test) < 0:
            raise ConfigError("corpus split counts must be >= 0")

    @property
    def counts(self) -> Dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class LLMConfig:
    backend: str = "mock"  # mock | http
    url: str = ""
    model: str = "gpt-3.5-turbo"
    key: str = ""
    parallelism: int = 4
    max_retries: int = 3
    timeout: float = 60.0
    temperature: float = 0.0

    def validate(self):
        if self.backend not in ("mock", "http"):
            raise ConfigError("llm.backend must be 'mock' or 'http'")
        if self.parallelism < 1 or self.max_retries < 1:
            raise ConfigError("llm.parallelism and llm.max_retries must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("llm.timeout must be > 0")

    def backend_instance(self) -> LLMBackend:
        if self.backend == "mock":
            return MockBackend()
        return HttpBackend(self.url or None, self.model, self.key or None, self.max_retries, self.timeout,
                           temperature=self.temperature)


@dataclass
class StageSettings:
    """Tunable part of a stage plan; the trainable groups and loss are fixed per stage."""

    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    text_enrichment: str = "triplets+states"
    conditioning: str = "both"
    augment: bool = False

    def plan(self, stage: str) -> StagePlan:
        return StagePlan.default(stage, **dataclasses.asdict(self))


def _warmup_defaults() -> StageSettings:
    # short plain-contrastive pre-training of the mini backbone, then frozen
    return StageSettings(epochs=10, lr=1e-4, conditioning="own")


@dataclass
class TrainConfig:
    warmup0: StageSettings = field(default_factory=_warmup_defaults)
    stage1: StageSettings = field(default_factory=StageSettings)
    stage2: StageSettings = field(default_factory=StageSettings)
    triplet: TripletLossConfig = field(default_factory=TripletLossConfig)

    def validate(self):
        self.schedule().validate()

    def schedule(self) -> Schedule:
        return Schedule(self.warmup0.plan("warmup0"), self.stage1.plan("stage1"), self.stage2.plan("stage2"),
                        self.triplet)


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    aim: AimConfig = field(default_factory=AimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if hasattr(sub, "validate"):
                try:
                    sub.validate()
                except ConfigError as exc:
                    msg = str(exc)
                    raise ConfigError(msg if msg.startswith(f"{f.name}.") else f"{f.name}: {msg}") from exc
        if self.vision.width != self.text.width:
            raise ConfigError("vision.width and text.width must be equal (shared embedding space)")
        if not 0 <= self.seed < 2**32:
            raise ConfigError("seed must lie in [0, 2**32)")
        return self

    # provenance of each leaf, filled by load_config
    _sources: Dict[str, str] = field(default_factory=dict, repr=False, compare=False)


# --------------------------------------------------------------------------
# YAML without the 1.1 yes/no/on/off booleans, so ``triplet: off`` stays a string


class _Loader(yaml.SafeLoader):
    pass


_Loader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in resolvers if tag != "tag:yaml.org,2002:bool"]
    for ch, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver("tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"),
                              list("tTfF"))


def _parse_scalar(text: str):
    return yaml.load(text, Loader=_Loader)


# --------------------------------------------------------------------------
# generic dataclass walking


def _is_section(tp) -> bool:
    return dataclasses.is_dataclass(tp)


def _hints(cls) -> Dict[str, Any]:
    return typing.get_type_hints(cls)


def _fields(obj) -> List[dataclasses.Field]:
    return [f for f in dataclasses.fields(obj) if not f.name.startswith("_")]


def leaf_paths(obj, prefix: Tuple[str, ...] = ()) -> List[Tuple[str, ...]]:
    out = []
    hints = _hints(type(obj))
    for f in _fields(obj):
        if _is_section(hints[f.name]):
            out += leaf_paths(getattr(obj, f.name), prefix + (f.name,))
        else:
            out.append(prefix + (f.name,))
    return out


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        tp = args[0]
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be a boolean (true/false), got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key} must be a string, got {value!r}")
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _apply(obj, data: Mapping, prefix: str, sources: Dict[str, str], origin: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping, got {type(data).__name__}")
    hints = _hints(type(obj))
    names = {f.name for f in _fields(obj)}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown key {full!r}")
        if _is_section(hints[key]):
            _apply(getattr(obj, key), value if value is not None else {}, full + ".", sources, origin)
        else:
            setattr(obj, key, _coerce(value, hints[key], full))
            sources[full] = origin


def _get(obj, path: Tuple[str, ...]):
    for p in path:
        obj = getattr(obj, p)
    return obj


def _leaf_type(cfg: RunConfig, path: Tuple[str, ...]):
    return _hints(type(_get(cfg, path[:-1])))[path[-1]]


def env_name(path: Tuple[str, ...]) -> str:
    return ENV_PREFIX + "_".join(path).upper()


def _apply_env(cfg: RunConfig, env: Mapping[str, str], sources: Dict[str, str]) -> None:
    known = {env_name(p): p for p in leaf_paths(cfg)}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX) or name not in known:
            continue
        path = known[name]
        key = ".".join(path)
        tp = _leaf_type(cfg, path)
        value = raw if tp is str or tp == Optional[str] else _parse_scalar(raw)
        setattr(_get(cfg, path[:-1]), path[-1], _coerce(value, tp, f"{key} (from {name})"))
        sources[key] = f"env {name}"


# --------------------------------------------------------------------------
# public API


def from_dict(data: Optional[Mapping], env: Optional[Mapping[str, str]] = None, origin: str = "file") -> RunConfig:
    cfg = RunConfig()
    sources: Dict[str, str] = {}
    _apply(cfg, data or {}, "", sources, origin)
    _apply_env(cfg, os.environ if env is None else env, sources)
    cfg._sources = sources
    return cfg.validate()


def load_config(path=None, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Read ``path`` (``None`` means defaults only), apply env overrides, validate."""
    data = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.load(p.read_text(encoding="utf-8"), Loader=_Loader)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p} is not valid YAML: {exc}") from exc
    return from_dict(data, env, f"file {path}" if path is not None else "file")


def to_dict(obj) -> Dict[str, Any]:
    out = {}
    hints = _hints(type(obj))
    for f in _fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = to_dict(v) if _is_section(hints[f.name]) else v
    return out


def _scalar(v) -> str:
    if isinstance(v, str):
        return json.dumps(v)
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def dump_config(cfg: RunConfig) -> str:
    """YAML text with a provenance comment on every leaf."""
    lines = ["# apk run configuration; each value notes its origin (default, file or env)"]

    def walk(obj, prefix, indent):
        hints = _hints(type(obj))
        for f in _fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            pad = "  " * indent
            if _is_section(hints[f.name]):
                lines.append(f"{pad}{f.name}:")
                walk(v, key + ".", indent + 1)
            else:
                src = cfg._sources.get(key, "default")
                if not src.startswith("env "):
                    src += f"; override with {env_name(tuple(key.split('.')))}"
                lines.append(f"{pad}{f.name}: {_scalar(v)}  # {src}")

    walk(cfg, "", 0)
    return "\n".join(lines) + "\n"
