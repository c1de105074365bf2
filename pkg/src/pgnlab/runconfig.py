"""Run configuration and its flat ``key = value`` file format.

Blank lines and lines starting with ``#`` are ignored. Values are parsed
according to the field's default type; ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .corpus import SyntheticPairSpec
from .transformer import ConfigError, ModelConfig


@dataclass
class RunConfig:
    # corpus: either two aligned files or a synthetic pair
    src_path: Optional[str] = None
    tgt_path: Optional[str] = None
    synthetic: bool = False
    synth_vocab_size: int = 300
    synth_min_len: int = 3
    synth_max_len: int = 8
    synth_cognate_rate: float = 0.5
    synth_sound_change_rate: float = 0.2
    synth_noise_rate: float = 0.0
    synth_num_pairs: int = 0          # 0: exactly train + dev + test
    synth_zipf: float = 0.8

    tokenizer_budget: int = 16000
    tokenizer_path: Optional[str] = None

    num_layers: int = 6
    num_heads: int = 4
    hidden_size: int = 512
    ffn_size: int = 2048
    max_len: int = 128
    dropout: float = 0.1
    pgn_enabled: bool = True
    pgn_head_mode: str = "averaged"
    pgn_attn_layer: int = -1

    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32

    train_size: int = 5000
    dev_size: int = 500
    test_size: int = 5000
    seed: int = 1
    max_epochs: int = 100
    patience: int = 5
    snapshot_every: int = 2
    subset_k: int = 0                 # 0: min(500, test_size // 10)
    output_dir: str = "runs/default"
    resume: Optional[str] = None

    def validate(self) -> None:
        if self.synthetic == bool(self.src_path or self.tgt_path):
            raise ConfigError("set exactly one of synthetic = true or src_path/tgt_path")
        if not self.synthetic and not (self.src_path and self.tgt_path):
            raise ConfigError("both src_path and tgt_path are required")
        for name in ("batch_size", "train_size", "test_size", "max_epochs", "patience",
                     "snapshot_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.dev_size < 0 or self.subset_k < 0:
            raise ConfigError("dev_size and subset_k must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.synthetic:
            self.synthetic_spec().validate()
            if self.synth_num_pairs and self.synth_num_pairs < self.needed_pairs():
                raise ConfigError(f"synth_num_pairs {self.synth_num_pairs} is below "
                                  f"train + dev + test = {self.needed_pairs()}")
        self.model_config(vocab_size=max(self.tokenizer_budget, 1))

    def needed_pairs(self) -> int:
        return self.train_size + self.dev_size + self.test_size

    def synthetic_spec(self) -> SyntheticPairSpec:
        return SyntheticPairSpec(
            vocab_size=self.synth_vocab_size,
            sentence_length_range=(self.synth_min_len, self.synth_max_len),
            cognate_rate=self.synth_cognate_rate, sound_change_rate=self.synth_sound_change_rate,
            noise_rate=self.synth_noise_rate, seed=self.seed,
            num_pairs=self.synth_num_pairs or self.needed_pairs(), zipf=self.synth_zipf)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, num_layers=self.num_layers,
                           num_heads=self.num_heads, hidden_size=self.hidden_size,
                           ffn_size=self.ffn_size, max_len=self.max_len, dropout=self.dropout,
                           pgn_enabled=self.pgn_enabled, pgn_head_mode=self.pgn_head_mode,
                           pgn_attn_layer=self.pgn_attn_layer)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def parse_value(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    f = _FIELD_TYPES[name]
    default = f.default
    raw = raw.strip()
    if raw.lower() == "none":
        if "Optional" not in str(f.type):
            raise ConfigError(f"{name} cannot be none")
        return None
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        values[key] = parse_value(key, val)
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    cfg = RunConfig(**values)
    return cfg
