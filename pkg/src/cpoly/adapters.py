"""Low-rank adapter modules and the shared / per-task skill inventory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import load_arrays, save_arrays
from .tensor import ShapeError, Tensor


@dataclass
class LoraModule:
    """Rank-``r`` additive update ``down @ up`` for a ``d x d`` projection."""

    down: Tensor
    up: Tensor

    @property
    def d(self) -> int:
        return self.down.shape[0]

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.down, self.up]

    @property
    def trainable_param_count(self) -> int:
        return 2 * self.rank * self.d


def init_lora(d: int, r: int, seed, name: str = "") -> LoraModule:
    """Gaussian ``down`` with variance 1/d and zero ``up``: the initial update is exactly 0."""
    if not 1 <= r <= d:
        raise ValueError(f"rank must satisfy 1 <= r <= d, got r={r}, d={d}")
    rng = np.random.default_rng(seed)
    down = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r))
    return LoraModule(
        down=Tensor(down, requires_grad=True, name=f"{name}down" if name else None),
        up=Tensor(np.zeros((r, d)), requires_grad=True, name=f"{name}up" if name else None),
    )


def lora_forward(h: Tensor, base: Tensor, m: LoraModule) -> Tensor:
    """``h @ base + h @ down @ up`` with ``base`` frozen."""
    d = base.shape[0]
    if base.shape != (d, d) or h.shape[-1] != d or m.d != d or m.up.shape[1] != d:
        raise ShapeError(
            f"lora_forward: h {h.shape}, base {base.shape}, down {m.down.shape}, up {m.up.shape}"
        )
    if base.requires_grad:
        raise ValueError("base weight must be frozen")
    return tn.add(tn.matmul(h, base), tn.matmul(tn.matmul(h, m.down), m.up))


def param_count(A: int, B: int, T: int, r: int, d: int, n_adapted_matrices: int = 1) -> int:
    """Adapter parameters: ``n_matrices * (A + T*B) * 2rd``. Routing is counted separately."""
    return n_adapted_matrices * (A + T * B) * 2 * r * d


def routing_param_count(A: int, B: int, T: int, n_adapted_matrices: int = 1) -> int:
    """Allocation-matrix entries: ``T*A`` common logits plus ``T*(T*B)`` specific weights."""
    return n_adapted_matrices * T * (A + T * B)


@dataclass
class SkillInventory:
    """``A`` shared modules plus a ``T x B`` grid of task-specific modules, all ``(d, r)``."""

    common: list[LoraModule]
    specific: list[list[LoraModule]]
    d: int
    r: int

    @property
    def A(self) -> int:
        return len(self.common)

    @property
    def T(self) -> int:
        return len(self.specific)

    @property
    def B(self) -> int:
        return len(self.specific[0]) if self.specific else 0

    def __len__(self) -> int:
        return self.A + sum(len(row) for row in self.specific)

    def modules(self) -> list[LoraModule]:
        return list(self.common) + [m for row in self.specific for m in row]

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules() for p in m.parameters()]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, m in enumerate(self.common):
            out[f"{prefix}common{i}.down"] = m.down
            out[f"{prefix}common{i}.up"] = m.up
        for t, row in enumerate(self.specific):
            for j, m in enumerate(row):
                out[f"{prefix}specific{t}_{j}.down"] = m.down
                out[f"{prefix}specific{t}_{j}.up"] = m.up
        return out

    @property
    def trainable_param_count(self) -> int:
        return sum(m.trainable_param_count for m in self.modules())

    def specific_flat(self) -> list[LoraModule]:
        """Specific modules ordered task-major: column ``t*B + j`` is task t's j-th skill."""
        return [m for row in self.specific for m in row]


def init_inventory(A: int, B: int, T: int, d: int, r: int, seed) -> SkillInventory:
    if A < 1 or B < 0 or T < 1:
        raise ValueError(f"need A >= 1, B >= 0, T >= 1 (got A={A}, B={B}, T={T})")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(A + T * B)
    common = [init_lora(d, r, seeds[i], name=f"common{i}.") for i in range(A)]
    specific = [
        [init_lora(d, r, seeds[A + t * B + j], name=f"specific{t}_{j}.") for j in range(B)]
        for t in range(T)
    ]
    return SkillInventory(common=common, specific=specific, d=d, r=r)


@dataclass
class AdaptedLinear:
    """A frozen ``d x d`` projection paired with the skill inventory that adapts it."""

    base: Tensor
    inventory: SkillInventory
    layer: int
    projection: str

    def __post_init__(self) -> None:
        self.base.requires_grad = False

    @property
    def key(self) -> str:
        return f"layer{self.layer}.{self.projection}"


def save_inventory(path: str | Path, inventories: dict[str, SkillInventory], meta: dict | None = None):
    """Write several named inventories (keyed by layer map entry) to one checkpoint directory."""
    arrays = {}
    layer_map = {}
    for key, inv in inventories.items():
        layer_map[key] = {"A": inv.A, "B": inv.B, "T": inv.T, "d": inv.d, "r": inv.r}
        for name, t in inv.named_parameters(prefix=f"{key}/").items():
            arrays[name] = t.data
    return save_arrays(path, arrays, {"layer_map": layer_map, **(meta or {})})


def load_inventory(path: str | Path) -> tuple[dict[str, SkillInventory], dict]:
    arrays, meta = load_arrays(path)
    out = {}
    for key, shape in meta["layer_map"].items():
        inv = init_inventory(shape["A"], shape["B"], shape["T"], shape["d"], shape["r"], seed=0)
        for name, t in inv.named_parameters(prefix=f"{key}/").items():
            t.data = arrays[name].copy()
        out[key] = inv
    return out, meta
