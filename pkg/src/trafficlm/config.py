"""
Run configuration: one JSON document with a section per module, validated
before any work starts.
"""

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Type, TypeVar

from .classifier import ClassifyConfig
from .codec import CodecConfig
from .errors import ConfigError
from .generation import GenerationConfig
from .metrics import EvalConfig
from .model import PRESETS, ModelConfig, model_preset
from .pcap_io import IOConfig
from .training import TrainConfig

THREADS_ENV = "TRAFFIC_LM_THREADS"
SECTIONS = {
    "io": IOConfig,
    "codec": CodecConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "generate": GenerationConfig,
    "classify": ClassifyConfig,
    "eval": EvalConfig,
}
TOP_LEVEL_KEYS = {"seed", "threads", "preset"} | set(SECTIONS)

C = TypeVar("C")


@dataclass
class RunConfig:
    io: IOConfig = field(default_factory=IOConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerationConfig = field(default_factory=GenerationConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    threads: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _type_ok(value: Any, expected: Any) -> bool:
    origin = typing.get_origin(expected)
    if origin is typing.Union:
        return any(_type_ok(value, option) for option in typing.get_args(expected))
    if origin is list:
        (item,) = typing.get_args(expected) or (Any,)
        return isinstance(value, list) and all(_type_ok(v, item) for v in value)
    if expected is Any:
        return True
    if expected is type(None):
        return value is None
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, expected)


def build_section(cls: Type[C], data: Any, section: str, base: Optional[C] = None) -> C:
    """
    Build a config dataclass from a JSON object, rejecting unknown keys and
    wrongly typed values.

    Args:
        cls: Config dataclass
        data: Parsed JSON object for the section
        section: Section name, for error messages
        base: Values used for keys the object leaves out
    """
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section {section!r}")
    for name, value in data.items():
        if not _type_ok(value, hints[name]):
            raise ConfigError(f"{section}.{name} has the wrong type: {value!r}")
    try:
        return replace(base, **data) if base is not None else cls(**data)
    except TypeError as e:
        raise ConfigError(f"section {section!r}: {e}") from e


def parse_run_config(document: Any) -> RunConfig:
    if not isinstance(document, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(document) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")

    preset = document.get("preset", "desk")
    if not isinstance(preset, str) or preset not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
    sections: Dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        base = model_preset(preset) if name == "model" else None
        sections[name] = build_section(cls, document.get(name, {}), name, base)

    top = build_section(RunConfig, {k: document[k] for k in ("seed", "threads") if k in document}, "top level")
    if top.threads is not None and top.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {top.threads}")
    return derive_seeds(replace(top, **sections))


def load_run_config(path: Optional[str]) -> RunConfig:
    """Load and validate a JSON run config; None gives the desk defaults."""
    if path is None:
        return derive_seeds(RunConfig())
    try:
        with open(path) as f:
            document = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_run_config(document)


def derive_seeds(config: RunConfig) -> RunConfig:
    """Propagate the top-level seed into every seeded section."""
    return replace(config,
                   train=replace(config.train, seed=config.seed),
                   generate=replace(config.generate, seed=config.seed))


def apply_overrides(config: RunConfig, seed: Optional[int] = None, max_len: Optional[int] = None,
                    mechanism: Optional[str] = None, top_k: Optional[int] = None) -> RunConfig:
    """Apply command-line flags on top of a loaded config; flags win."""
    if seed is not None:
        config = derive_seeds(replace(config, seed=seed))
    model_changes = {}
    if max_len is not None:
        model_changes["max_len"] = max_len
    if mechanism is not None:
        model_changes["mechanism"] = mechanism
    if model_changes:
        config = replace(config, model=replace(config.model, **model_changes))
    if top_k is not None:
        config = replace(config, generate=replace(config.generate, k=top_k))
    return config


def resolve_threads(config: RunConfig) -> int:
    """Worker cap: TRAFFIC_LM_THREADS, else the config's threads, else 1."""
    raw = os.environ.get(THREADS_ENV)
    if raw is not None:
        try:
            threads = int(raw)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
        if threads < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
        return threads
    return config.threads or 1
