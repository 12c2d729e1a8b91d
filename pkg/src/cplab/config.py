"""Experiment configuration: one YAML file, strict schema, dotted overrides.

File layout (version 1)::

    version: 1
    corpus:  {CorpusConfig fields}
    encoder: {EncoderConfig fields}
    augment: {AugmentConfig fields}
    trainer: {TrainerConfig fields}
    lr:      {LRSchedule fields}
    data_dir: data
    output_dir: runs
    seeds: [0, 1, 2]

Every section and key is optional; omitted values take the defaults, which
reproduce the reference experiment. Unknown keys are errors.

Seed derivation: ``corpus.corpus_seed`` and ``corpus.prototype_seed`` fix
the data. ``trainer.seed`` is the master seed of a run; the trainer spawns
independent streams from it for model init, labeled and unlabeled batch
order, branch choice, augmentation, dropout, PL sampling, cache draws and
eviction coins. ``encoder.seed`` only applies when a model is initialised
outside a trainer.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data import CorpusConfig
from .model import AugmentConfig, EncoderConfig, LRSchedule
from .trainer import TrainerConfig

CONFIG_VERSION = 1

SECTIONS: dict[str, type] = {
    "corpus": CorpusConfig,
    "encoder": EncoderConfig,
    "augment": AugmentConfig,
    "trainer": TrainerConfig,
    "lr": LRSchedule,
}
_TOP_SCALARS = ("data_dir", "output_dir", "seeds")


class ConfigError(ValueError):
    """Invalid configuration file, key or value."""


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    lr: LRSchedule = field(default_factory=LRSchedule)
    data_dir: str = "data"
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    version: int = CONFIG_VERSION

    def validate(self) -> "ExperimentConfig":
        try:
            for name in SECTIONS:
                sec = getattr(self, name)
                if hasattr(sec, "validate"):
                    sec.validate()
            if self.lr.base_lr <= 0 or self.lr.warmup_steps < 0:
                raise ValueError("lr.base_lr must be > 0 and lr.warmup_steps >= 0")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.encoder.feat_dim != self.corpus.feat_dim:
            raise ConfigError(
                f"encoder.feat_dim={self.encoder.feat_dim} but corpus.feat_dim={self.corpus.feat_dim}"
            )
        if self.encoder.vocab_size != self.corpus.vocab_tokens + 1:
            raise ConfigError(
                f"encoder.vocab_size must be corpus.vocab_tokens + 1 = {self.corpus.vocab_tokens + 1}"
            )
        min_out = self.encoder.output_frames(self.corpus.min_frames)
        if min_out < 1:
            raise ConfigError("corpus.min_frames is shorter than the encoder window")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        return self

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"version": self.version}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        out.update(data_dir=self.data_dir, output_dir=self.output_dir, seeds=list(self.seeds))
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with ``{"section.field": value}`` applied; values may be strings."""
        data = self.to_dict()
        for path, value in overrides.items():
            _set_dotted(data, path, value)
        return from_dict(data)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def field_paths() -> dict[str, Any]:
    """Every overridable dotted path mapped to its declared type."""
    out: dict[str, Any] = {}
    for sec, cls in SECTIONS.items():
        for name, hint in typing.get_type_hints(cls).items():
            out[f"{sec}.{name}"] = hint
    hints = typing.get_type_hints(ExperimentConfig)
    for name in _TOP_SCALARS:
        out[name] = hints[name]
    return out


def _set_dotted(data: dict, path: str, value: Any) -> None:
    if path not in field_paths():
        raise ConfigError(f"unknown config key {path!r}")
    parts = path.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def coerce(value: Any, hint: Any, where: str) -> Any:
    """Convert ``value`` (possibly a string from the command line) to ``hint``."""
    if isinstance(value, str) and hint is not str:
        value = yaml.safe_load(value) if value.strip() else None
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return coerce(value, a, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: bad value {value!r}")
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
            return tuple(coerce(v, a, where) for v, a in zip(value, args))
        inner = args[0] if args else Any
        items = [coerce(v, inner, where) for v in value]
        return tuple(items) if origin is tuple else items
    if hint is Any:
        return value
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {hint}")


def _build_section(name: str, raw: Any):
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {name!r} must be a mapping")
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(raw) - set(hints))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(map(str, unknown))}")
    kwargs = {k: coerce(v, hints[k], f"{name}.{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping")
    allowed = set(SECTIONS) | set(_TOP_SCALARS) | {"version"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(map(str, unknown))}")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}, expected {CONFIG_VERSION}")
    kwargs: dict[str, Any] = {name: _build_section(name, data.get(name)) for name in SECTIONS}
    hints = typing.get_type_hints(ExperimentConfig)
    for name in _TOP_SCALARS:
        if name in data:
            kwargs[name] = coerce(data[name], hints[name], name)
    return ExperimentConfig(**kwargs).validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML config; ``None`` gives the reference defaults."""
    if path is None:
        return ExperimentConfig().validate()
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(data or {})


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_yaml())
