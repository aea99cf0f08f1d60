"""Run configuration: namespaced sections, flattened to ``section.key`` for files and flags.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator

from treeground.errors import UsageError


@dataclass
class DataConfig:
    num_train: int = 200
    num_eval: int = 50
    frames: int = 8
    height: int = 32
    width: int = 32
    signatures: int = 4
    distractors_min: int = 1
    distractors_max: int = 2
    irrelevant_prob: float = 0.25
    vocab: int = 64
    object_min: int = 8
    object_max: int = 14
    max_speed: float = 1.5
    motion_noise: float = 0.5
    pixel_noise: float = 0.05
    seed: int = 0


@dataclass
class TreeConfig:
    enabled: bool = True
    rho: float = 0.6
    gamma: float = 0.3
    rank_mode: str = "similarity"
    delta_min: int = 1
    delta_max: int = 0  # 0 means ceil(I/2) + 1
    crop_threshold: float = 0.7
    down_weight: float = 0.5

    def resolved_delta_max(self, num_frames: int) -> int:
        return self.delta_max if self.delta_max > 0 else math.ceil(num_frames / 2) + 1

    def validate(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise UsageError(f"tree.rho must lie in (0, 1], got {self.rho}")
        if self.gamma < 0:
            raise UsageError(f"tree.gamma must be >= 0, got {self.gamma}")
        if self.rank_mode not in ("similarity", "literal"):
            raise UsageError(f"tree.rank_mode must be similarity|literal, got {self.rank_mode!r}")
        if self.delta_min < 1 or (self.delta_max and self.delta_max <= self.delta_min):
            raise UsageError(f"tree.delta bounds need 1 <= delta_min < delta_max, got {self.delta_min}, {self.delta_max}")
        if not 0.0 < self.crop_threshold < 1.0:
            raise UsageError(f"tree.crop_threshold must lie in (0, 1), got {self.crop_threshold}")


@dataclass
class ModelConfig:
    width: int = 32
    grid: int = 8
    relevance_dim: int = 32
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    queries: int = 4
    ffn: int = 64
    max_frames: int = 32
    max_query: int = 8
    mask_rate: float = 0.15
    init_seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-5
    lr_decay: float = 0.1
    lr_period: int = 0  # 0 means 35 epochs, scaled by epochs / 100
    grad_clip: float = 0.0
    seed: int = 0
    eval_every: int = 10
    beta_det: float = 1.0
    beta_mfm: float = 1.0
    beta_vtm: float = 1.0
    mismatch_rate: float = 0.5
    self_supervised: bool = True

    def resolved_lr_period(self) -> int:
        if self.lr_period > 0:
            return self.lr_period
        return max(1, round(35 * self.epochs / 100))


@dataclass
class EvalConfig:
    absent_frames: str = "exclude"  # or "zero"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def items(self) -> Iterator[tuple[str, Any]]:
        for section in fields(self):
            sub = getattr(self, section.name)
            for f in fields(sub):
                yield f"{section.name}.{f.name}", getattr(sub, f.name)

    @classmethod
    def keys(cls) -> list[str]:
        return [k for k, _ in cls().items()]

    def get(self, key: str) -> Any:
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, raw: Any) -> None:
        section, name = _split_key(key)
        sub = getattr(self, section)
        default = getattr(type(sub)(), name)
        setattr(sub, name, _coerce(key, raw, type(default)))

    def update(self, values: dict[str, Any]) -> "RunConfig":
        for key, raw in values.items():
            self.set(key, raw)
        return self

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def section_text(self, section: str) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items() if k.startswith(section + "."))

    def section_hash(self, section: str) -> str:
        return hashlib.sha256(self.section_text(section).encode()).hexdigest()[:16]

    def copy(self) -> "RunConfig":
        return dataclasses.replace(self, **{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().update(parse_text(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.partition(".")
    valid = {f.name: {g.name for g in fields(f.default_factory())} for f in fields(RunConfig)}
    if section not in valid or name not in valid[section]:
        raise UsageError(f"unknown config key {key!r}")
    return section, name


def _coerce(key: str, raw: Any, kind: type) -> Any:
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise UsageError(f"config key {key}: cannot read {text!r} as {kind.__name__}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
