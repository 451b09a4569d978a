"""Run configuration: one JSON file describing a whole experiment.

Sections map onto the pipeline stages. Every section and every key is
checked against the known schema; an unknown name is a hard error
rather than a silent ignore, so typos cannot quietly change a run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError
from .lora import (DEFAULT_ALPHA, DEFAULT_RANK, DEFAULT_TARGETS,
                   normalize_targets)
from .model import ModelConfig
from .probe import DEFAULT_N_TOKENS, DEFAULT_SAMPLE_BUDGET
from .train import TrainConfig


@dataclass(frozen=True)
class PretrainSection:
    corpus_tokens: int = 250_000
    lr: float = 3e-3
    epochs: int = 3
    batch: int = 16
    seed: int = 0
    grad_clip: float = 1.0

    def validate(self) -> "PretrainSection":
        if self.corpus_tokens < 1000:
            raise ConfigError(f"corpus_tokens too small: {self.corpus_tokens}")
        TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch,
                    seed=self.seed, grad_clip=self.grad_clip).validate()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch,
                           seed=self.seed, loss_mask_prompt=False,
                           grad_clip=self.grad_clip)


@dataclass(frozen=True)
class LoraSection:
    targets: tuple[str, ...] = DEFAULT_TARGETS
    rank: int = DEFAULT_RANK
    alpha: float = DEFAULT_ALPHA

    def validate(self) -> "LoraSection":
        if self.rank < 1:
            raise ConfigError(f"rank must be at least 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        # canonical order keeps config hashes independent of spelling order
        canon = normalize_targets(self.targets)
        if canon != self.targets:
            return LoraSection(targets=canon, rank=self.rank, alpha=self.alpha)
        return self


@dataclass(frozen=True)
class TaskSection:
    name: str = "kvqa"
    seed: int = 0
    train_size: int = 2000
    validation_size: int = 500
    test_size: int = 500
    domain: str = "in-domain"
    hops: int = 2
    bridge_ratio: float = 0.75

    def validate(self) -> "TaskSection":
        from .tasks import TASK_NAMES
        if self.name not in TASK_NAMES:
            raise ConfigError(
                f"unknown task {self.name!r}; expected one of {TASK_NAMES}")
        for f in ("train_size", "validation_size", "test_size"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be non-negative")
        return self

    def sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "validation": self.validation_size,
                "test": self.test_size}


@dataclass(frozen=True)
class ProbeSection:
    n_tokens: int = DEFAULT_N_TOKENS
    sample_budget: int = DEFAULT_SAMPLE_BUDGET
    seed: int = 0
    keep_levels: tuple[int, ...] | None = None   # None: scaled defaults

    def validate(self) -> "ProbeSection":
        if self.n_tokens < 1:
            raise ConfigError(f"n_tokens must be at least 1, got {self.n_tokens}")
        if self.sample_budget < 1:
            raise ConfigError(f"sample_budget must be at least 1")
        return self


@dataclass(frozen=True)
class SweepSection:
    budget: int = 500
    decode_budget: int = 24
    seed: int = 0
    keeps: tuple[int, ...] | None = None   # None: every level 0..n_layers
    refine: bool = False
    min_jump_ratio: float = 0.25

    def validate(self) -> "SweepSection":
        if self.budget < 1 or self.decode_budget < 1:
            raise ConfigError("sweep budget and decode_budget must be at least 1")
        if not 0 < self.min_jump_ratio <= 1:
            raise ConfigError(
                f"min_jump_ratio must be in (0, 1], got {self.min_jump_ratio}")
        return self


_TUPLE_KEYS = {"targets", "keep_levels", "keeps"}


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _TUPLE_KEYS and v is not None:
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs).validate()


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    pretrain: PretrainSection
    train: TrainConfig
    lora: LoraSection
    task: TaskSection
    probe: ProbeSection
    sweep: SweepSection

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(model=ModelConfig(), pretrain=PretrainSection(),
                   train=TrainConfig(), lora=LoraSection(), task=TaskSection(),
                   probe=ProbeSection(), sweep=SweepSection())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        sections = {
            "model": lambda d: ModelConfig.from_dict(d),
            "pretrain": lambda d: _section(PretrainSection, d, "pretrain"),
            "train": lambda d: _section(TrainConfig, d, "train"),
            "lora": lambda d: _section(LoraSection, d, "lora"),
            "task": lambda d: _section(TaskSection, d, "task"),
            "probe": lambda d: _section(ProbeSection, d, "probe"),
            "sweep": lambda d: _section(SweepSection, d, "sweep"),
        }
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
        built = {}
        for name, make in sections.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be a JSON object")
            built[name] = make(raw)
        return cls(**built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("targets",):
            out["lora"][key] = list(out["lora"][key])
        for sec, key in (("probe", "keep_levels"), ("sweep", "keeps")):
            if out[sec][key] is not None:
                out[sec][key] = list(out[sec][key])
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
