"""Run configuration: an INI file with one section per component.

Every key has a default, so an empty file is a valid configuration. Unknown
sections and keys are rejected rather than ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import ContextCueSpec
from .features import AugmentPolicy
from .model import ModelConfig
from .training import LrSchedule, TrainMode

CONFIG_ENV = "CTXT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    n_train: int = 4000
    n_dev: int = 200
    n_eval: int = 100
    eval_seed_offset: int = 1000
    eval_clean: bool = True  # eval split drawn without channel variability


@dataclass(frozen=True)
class TrainSection:
    mode: str = TrainMode.FULL_UTTERANCE.value
    batch_size: int = 16
    total_steps: int = 5000
    seed: int = 0
    checkpoint_every: int = 0  # 0 = total_steps // 50
    keep_last: int = 6
    max_grad_norm: float = 0.0  # 0 = no clipping
    n_stack: int = 1

    def __post_init__(self):
        TrainMode.parse(self.mode)
        if self.batch_size < 1 or self.total_steps < 1 or self.keep_last < 1:
            raise ValueError("batch_size, total_steps and keep_last must be positive")


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = False
    n_freq_masks: int = 2
    max_freq_width: int = 24
    time_mask_max_width: int = 25
    time_mask_rate: float = 0.004
    max_total_time_masked_fraction: float = 0.2

    def policy(self, seed: int = 0) -> AugmentPolicy | None:
        if not self.enabled:
            return None
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "enabled"}
        return AugmentPolicy(rng_seed=seed, **kw)


@dataclass(frozen=True)
class EvalSection:
    beam_width: int = 4
    perturb_magnitude: float = 3.0
    perturb_seed: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


def _model_defaults() -> dict:
    return dict(input_dim=16, encoder_layers=1, encoder_units=32, prediction_layers=1,
                prediction_units=32, joint_units=32, vocab_size=10)


def _schedule_defaults() -> dict:
    return dict(peak_lr=6e-3, warmup_steps=100, hold_steps=3500, decay_rate=0.998)


def _data_defaults() -> dict:
    return dict(prefix_len_range=(45, 60), segment_len_range=(15, 30), channel_bias_magnitude=3.0)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**_model_defaults()))
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(**_schedule_defaults()))
    task: ContextCueSpec = field(default_factory=lambda: ContextCueSpec(**_data_defaults()))
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    augment: AugmentSection = AugmentSection()
    eval: EvalSection = EvalSection()

    @property
    def mode(self) -> TrainMode:
        return TrainMode.parse(self.train.mode)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            obj = getattr(self, name)
            parser[name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


SECTIONS = {
    "model": ModelConfig,
    "schedule": LrSchedule,
    "task": ContextCueSpec,
    "data": DataSection,
    "train": TrainSection,
    "augment": AugmentSection,
    "eval": EvalSection,
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split()]
            return tuple(type(d)(p) for d, p in zip(default, parts, strict=True))
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    base = RunConfig()
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; known: {', '.join(SECTIONS)}")
        current = getattr(base, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        values = {}
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(raw, known[key], f"{source} [{section}] {key}")
        try:
            updates[section] = dataclasses.replace(current, **values)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"{source} [{section}]: {err}") from None
    return dataclasses.replace(base, **updates)


def load_config(path=None) -> RunConfig:
    """Read ``path``, else the file named by ``$CTXT_CONFIG``, else the defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config(text, str(path))
