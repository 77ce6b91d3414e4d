"""A small frozen transformer encoder whose q/k/v projections are adapted per task."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .adapters import SkillInventory, init_inventory
from .checkpoint import load_arrays, save_arrays
from .composer import ComposedAdapter, compose
from .routing import AllocationMatrix, RoutingVariant, init_allocation, noise_rng
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v")
PAD_ID = 0


@dataclass
class ModelConfig:
    vocab_size: int
    n_tasks: int
    max_seq_len: int = 16
    n_classes: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    variant: str = "cpoly"
    A: int = 3
    B: int = 1
    r: int = 2
    seed: int = 0
    base_seed: int | None = None
    output: str = "classify"  # or "sequence"
    mask_off_diagonal: bool = False
    normalize_routing: bool = True
    hard_eval: bool = False
    head_scale: float = 1.0

    def __post_init__(self) -> None:
        self.variant = RoutingVariant.parse(self.variant).value
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.output not in ("classify", "sequence"):
            raise ValueError(f"unknown output mode {self.output!r}")
        v = RoutingVariant(self.variant)
        if v is RoutingVariant.SINGLE_LORA and (self.A, self.B) != (1, 0):
            raise ValueError("single LoRA needs A=1, B=0")
        if v in (RoutingVariant.MOE_LORA, RoutingVariant.POLY) and self.B != 0:
            raise ValueError(f"{v.value} needs B=0")
        if v is RoutingVariant.CPOLY and self.B < 1:
            raise ValueError("C-Poly needs B >= 1")

    @property
    def routing_variant(self) -> RoutingVariant:
        return RoutingVariant(self.variant)

    @property
    def n_adapted_matrices(self) -> int:
        return self.n_layers * len(PROJECTIONS)


@dataclass
class FrozenWeights:
    embedding: np.ndarray
    position: np.ndarray
    layers: list[dict[str, Tensor]] = field(default_factory=list)
    head: Tensor | None = None

    def named(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "position": self.position, "head": self.head.data}
        for i, layer in enumerate(self.layers):
            for k, t in layer.items():
                out[f"layer{i}.{k}"] = t.data
        return out


def init_frozen(cfg: ModelConfig) -> FrozenWeights:
    seed = cfg.seed if cfg.base_seed is None else cfg.base_seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xBA5E,)))
    d = cfg.d_model

    def frozen(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    emb = rng.normal(0.0, 1.0, size=(cfg.vocab_size, d))
    pos = rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d))
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            {
                "q": frozen((d, d), d**-0.5),
                "k": frozen((d, d), d**-0.5),
                "v": frozen((d, d), d**-0.5),
                "o": frozen((d, d), d**-0.5),
                "ff1": frozen((d, cfg.d_ff), d**-0.5),
                "ff2": frozen((cfg.d_ff, d), cfg.d_ff**-0.5),
            }
        )
    n_out = cfg.n_classes if cfg.output == "classify" else cfg.vocab_size
    head = frozen((d, n_out), cfg.head_scale * d**-0.5)
    return FrozenWeights(embedding=emb, position=pos, layers=layers, head=head)


class TransformerModel:
    """Frozen pre-LN encoder; only adapter factors and allocation matrices train."""

    def __init__(self, cfg: ModelConfig, frozen: FrozenWeights | None = None):
        self.cfg = cfg
        self.frozen = frozen or init_frozen(cfg)
        self.adapters: list[dict[str, ComposedAdapter]] = []
        ss = np.random.SeedSequence(cfg.seed, spawn_key=(0xADA,))
        children = iter(ss.spawn(2 * cfg.n_adapted_matrices))
        for layer in range(cfg.n_layers):
            slot = {}
            for proj in PROJECTIONS:
                inv = init_inventory(cfg.A, cfg.B, cfg.n_tasks, cfg.d_model, cfg.r, seed=next(children))
                alloc = init_allocation(
                    cfg.n_tasks,
                    cfg.A,
                    seed=next(children),
                    variant=cfg.variant,
                    B=cfg.B,
                    mask_off_diagonal=cfg.mask_off_diagonal,
                    normalize=cfg.normalize_routing,
                    hard_eval=cfg.hard_eval,
                )
                slot[proj] = ComposedAdapter(inv, alloc, layer=layer, projection=proj)
            self.adapters.append(slot)

    # ------------------------------------------------------------ parameters

    def composed(self):
        for layer, slot in enumerate(self.adapters):
            for proj in PROJECTIONS:
                yield f"layer{layer}.{proj}", slot[proj]

    def inventories(self) -> dict[str, SkillInventory]:
        return {key: ca.inventory for key, ca in self.composed()}

    def allocations(self) -> dict[str, AllocationMatrix]:
        return {key: ca.allocation for key, ca in self.composed()}

    def adapter_parameters(self) -> dict[str, Tensor]:
        out = {}
        for key, ca in self.composed():
            out.update(ca.inventory.named_parameters(prefix=f"{key}/"))
        return out

    def routing_parameters(self) -> dict[str, Tensor]:
        out = {}
        for key, ca in self.composed():
            out.update(ca.allocation.named_parameters(prefix=f"{key}/"))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {**self.adapter_parameters(), **self.routing_parameters()}

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return self.frozen.named()

    # --------------------------------------------------------------- forward

    def forward(
        self,
        tokens: np.ndarray,
        task: int,
        mode: str = "eval",
        step: int = 0,
        noise_seed: int | None = None,
        adapters: bool = True,
    ) -> Tensor:
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"expected a rectangular batch (batch x seq), got shape {tokens.shape}")
        if not 0 <= task < cfg.n_tasks:
            raise IndexError(f"unknown task id {task} (model has {cfg.n_tasks} tasks)")
        nb, L = tokens.shape
        if L > cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len={cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        d, H = cfg.d_model, cfg.n_heads
        dh = d // H
        seed = cfg.seed if noise_seed is None else noise_seed
        pad = tokens == PAD_ID
        key_mask = np.where(pad, -1e9, 0.0).reshape(nb, 1, 1, L)

        x = Tensor((self.frozen.embedding[tokens] + self.frozen.position[:L]).reshape(nb * L, d))
        for li, (weights, slot) in enumerate(zip(self.frozen.layers, self.adapters)):
            a = tn.layer_norm(x)
            proj = {}
            for mi, name in enumerate(PROJECTIONS):
                if adapters:
                    rng = noise_rng(seed, step, li, mi, task) if mode == "train" else None
                    proj[name] = compose(a, weights[name], task, slot[name], mode=mode, rng=rng)
                else:
                    proj[name] = tn.matmul(a, weights[name])
            q = tn.transpose(tn.reshape(proj["q"], (nb, L, H, dh)), (0, 2, 1, 3))
            k = tn.transpose(tn.reshape(proj["k"], (nb, L, H, dh)), (0, 2, 3, 1))
            v = tn.transpose(tn.reshape(proj["v"], (nb, L, H, dh)), (0, 2, 1, 3))
            scores = tn.add(tn.scale(tn.matmul(q, k), dh**-0.5), key_mask)
            att = tn.matmul(tn.softmax(scores, axis=-1), v)
            att = tn.reshape(tn.transpose(att, (0, 2, 1, 3)), (nb * L, d))
            x = tn.add(x, tn.matmul(att, weights["o"]))
            ff = tn.matmul(tn.relu(tn.matmul(tn.layer_norm(x), weights["ff1"])), weights["ff2"])
            x = tn.add(x, ff)
        y = tn.layer_norm(x)
        if cfg.output == "sequence":
            return tn.matmul(y, self.frozen.head)
        keep = (~pad).astype(np.float64)
        counts = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        pool = np.zeros((nb, nb * L))
        for i in range(nb):
            pool[i, i * L : (i + 1) * L] = keep[i] / counts[i]
        return tn.matmul(Tensor(pool), tn.matmul(y, self.frozen.head))


def forward(model: TransformerModel, batch, mode: str = "eval", step: int = 0, noise_seed: int | None = None) -> Tensor:
    """Logits for a :class:`~cpoly.data.TaskBatch`."""
    return model.forward(batch.tokens, batch.task_id, mode=mode, step=step, noise_seed=noise_seed)


def count_trainable(model: TransformerModel, include_routing: bool = True) -> int:
    n = sum(t.size for t in model.adapter_parameters().values())
    if include_routing:
        n += sum(t.size for t in model.routing_parameters().values())
    return int(n)


# ------------------------------------------------------------------- storage


def save_model(model: TransformerModel, directory: str | Path) -> Path:
    arrays = {f"frozen/{k}": v for k, v in model.frozen_arrays().items()}
    for name, t in model.trainable_parameters().items():
        arrays[f"train/{name}"] = t.data
    layer_map = {
        key: {"A": inv.A, "B": inv.B, "T": inv.T, "d": inv.d, "r": inv.r}
        for key, inv in model.inventories().items()
    }
    return save_arrays(directory, arrays, {"config": asdict(model.cfg), "layer_map": layer_map})


def load_model(directory: str | Path) -> TransformerModel:
    arrays, meta = load_arrays(directory)
    cfg = ModelConfig(**meta["config"])
    model = TransformerModel(cfg)
    fr = model.frozen
    fr.embedding = arrays["frozen/embedding"]
    fr.position = arrays["frozen/position"]
    fr.head.data = arrays["frozen/head"]
    for i, layer in enumerate(fr.layers):
        for k, t in layer.items():
            t.data = arrays[f"frozen/layer{i}.{k}"]
    for name, t in model.trainable_parameters().items():
        t.data = arrays[f"train/{name}"].copy()
    return model
