"""Training configuration, flat ``key=value`` config files and seeded RNG streams."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .hmm import active_count
from .params import VARIANTS, ModelConfig

RNG_STREAMS = {"init": 1, "dropout": 2, "sampling": 3, "uniform-support": 4, "bench": 5, "synthetic": 6}


class ConfigError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng([int(seed), RNG_STREAMS[name]])


@dataclass(frozen=True)
class TrainConfig:
    num_states: int = 256
    num_blocks: int = 16
    hidden: int = 64
    dropout: float = 0.5
    batch_size: int = 16
    segment_len: int = 32
    lr: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    eval_checks_per_epoch: int = 4
    decay_patience: int = 8
    decay_factor: float = 4.0
    seed: int = 0
    variant: str = "neural"
    support: str = "brown"
    uniform_n: int = 0  # 0: states per block
    clip_norm: float = 0.0  # 0: no clipping
    eval_batch_size: int = 16
    eval_segment_len: int = 32
    record_timing: bool = True
    stop_after_checks: int = 0  # 0: run every epoch

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 1 or self.num_states < 1:
            raise ConfigError("num_states and num_blocks must be positive")
        if self.num_states % self.num_blocks:
            raise ConfigError(f"num_states={self.num_states} is not a multiple of num_blocks={self.num_blocks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if active_count(self.block_size, self.dropout) < 1:
            raise ConfigError("dropout leaves no active state per block")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.variant == "factored" and self.hidden % 2:
            raise ConfigError("factored variant needs an even hidden size")
        if self.support not in ("brown", "uniform"):
            raise ConfigError("support must be 'brown' or 'uniform'")
        if self.support == "uniform" and self.dropout > 0:
            raise ConfigError("state dropout needs block-partitioned support; set dropout=0 for uniform support")
        if self.uniform_n < 0 or self.uniform_n > self.num_states:
            raise ConfigError("uniform_n must be in [0, num_states]")
        for name in ("batch_size", "segment_len", "epochs", "eval_checks_per_epoch",
                     "decay_patience", "eval_batch_size", "eval_segment_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.decay_factor <= 0:
            raise ConfigError("lr and weight_decay must be >= 0 and decay_factor > 0")

    @property
    def block_size(self) -> int:
        return self.num_states // self.num_blocks

    @property
    def states_per_word(self) -> int:
        return self.uniform_n or self.block_size

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(self.num_states, vocab_size, self.num_blocks, self.hidden, self.variant)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**{k: _coerce(known[k].type, v) for k, v in values.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(type_name, value):
    if not isinstance(value, str):
        return value
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        if t == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {t}") from None
    return value.strip()


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_config_file(path: str | Path, config: TrainConfig) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
