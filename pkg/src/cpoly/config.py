"""JSON experiment configuration with strict key checking."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .routing import RoutingVariant
from .trainer import TrainConfig

# (A, B, r) per variant at matched adapter budget: 4 experts at r=2 versus one at r=8
VARIANT_SHAPES = {
    "lora": (1, 0, 8),
    "moe": (4, 0, 2),
    "poly": (4, 0, 2),
    "cpoly": (3, 1, 2),
}

# Desk-scale training preset. The backbone here is random and frozen, so the
# adapters need a far larger step size than fine-tuning a pretrained model.
DESK_TRAIN = {"learning_rate": 1e-2, "epochs": 3, "batch_size": 16}

BENCHMARK_KEYS = (
    "K", "T", "group_structure", "seq_len", "vocab", "seed", "n_train", "n_eval",
    "skills_per_group", "pattern_size", "mirror", "label_flip",
)
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in ("vocab_size", "n_tasks", "variant", "seed"))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    variant: str = "cpoly"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs/experiment"
    data: str | None = None  # directory holding train.jsonl / eval.jsonl; None means generate
    benchmark: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    ablation_grid: list[list[int]] = field(default_factory=lambda: [[4, 0], [3, 1], [2, 2], [1, 3]])
    task_counts: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        try:
            self.variant = RoutingVariant.parse(self.variant).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        _check_keys("benchmark", self.benchmark, BENCHMARK_KEYS)
        _check_keys("model", self.model, MODEL_KEYS)
        _check_keys("train", self.train, TRAIN_KEYS)
        if not self.seeds:
            raise ConfigError("seed list is empty")
        for row in self.ablation_grid:
            if len(row) != 2:
                raise ConfigError(f"ablation grid rows are [A, B] pairs, got {row}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        _check_keys("config", raw, [f.name for f in fields(cls)])
        return cls(**copy.deepcopy(raw))

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}") from None
        return cls.from_dict(raw)

    # ------------------------------------------------------------- resolving

    def model_config(self, vocab_size: int, n_tasks: int, seed: int, variant: str | None = None,
                     A: int | None = None, B: int | None = None) -> ModelConfig:
        v = RoutingVariant.parse(variant or self.variant).value
        dA, dB, dr = VARIANT_SHAPES[v]
        opts = dict(self.model)
        opts.setdefault("A", dA)
        opts.setdefault("B", dB)
        opts.setdefault("r", dr)
        if variant is not None and variant != self.variant:
            opts.update(A=dA, B=dB, r=dr)  # a different variant keeps its own matched-budget shape
        if A is not None:
            opts["A"] = A
        if B is not None:
            opts["B"] = B
        return ModelConfig(vocab_size=vocab_size, n_tasks=n_tasks, variant=v, seed=seed, **opts)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **{**DESK_TRAIN, **self.train})

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self, model: ModelConfig, train: TrainConfig) -> dict:
        out = self.to_dict()
        out["model"] = asdict(model)
        out["train"] = asdict(train)
        return out


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def git_blob_hash(data: bytes) -> str:
    """SHA-1 over ``blob <len>\\0<data>``, as git names file contents."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
