"""Per-task combination of shared and task-specific adapter outputs.

For task ``t`` the adapted projection computes::

    h @ W  +  sum_i  wA[t, i] * (h @ down_i @ up_i)  +  sum_s  wB[t, s] * (h @ down_s @ up_s)

The four routing variants (single LoRA, MoE-LoRA, Poly, C-Poly) differ only in
which weights exist and whether they are indexed by task, so they all share
this code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .adapters import LoraModule, SkillInventory
from .routing import AllocationMatrix, RoutingVariant, RoutingWeights, routing_weights
from .tensor import ShapeError, Tensor


class VariantMismatchError(ValueError):
    """Inventory shape is inconsistent with the routing variant."""


@dataclass
class ComposedAdapter:
    inventory: SkillInventory
    allocation: AllocationMatrix
    layer: int = 0
    projection: str = "q"

    def __post_init__(self) -> None:
        check_variant(self.inventory, self.allocation)

    @property
    def variant(self) -> RoutingVariant:
        return self.allocation.variant

    def parameters(self) -> list[Tensor]:
        return self.inventory.parameters() + self.allocation.parameters()


def check_variant(inv: SkillInventory, alloc: AllocationMatrix) -> None:
    v = alloc.variant
    A, B = inv.A, inv.B
    if v is RoutingVariant.SINGLE_LORA and (A != 1 or B != 0):
        raise VariantMismatchError(f"single LoRA needs A=1, B=0; inventory has A={A}, B={B}")
    if v in (RoutingVariant.MOE_LORA, RoutingVariant.POLY) and B != 0:
        raise VariantMismatchError(f"{v.value} has no task-specific skills; inventory has B={B}")
    if v is RoutingVariant.CPOLY and B < 1:
        raise VariantMismatchError("C-Poly needs B >= 1 task-specific skills")
    if alloc.A != A or alloc.B != B or alloc.T != inv.T:
        raise VariantMismatchError(
            f"allocation (T={alloc.T}, A={alloc.A}, B={alloc.B}) does not match "
            f"inventory (T={inv.T}, A={A}, B={B})"
        )


def _stack(modules: list[LoraModule]) -> tuple[Tensor, Tensor]:
    if len(modules) == 1:
        return modules[0].down, modules[0].up
    down = tn.concat([m.down for m in modules], axis=1)
    up = tn.concat([m.up for m in modules], axis=0)
    return down, up


def weighted_delta(h: Tensor, modules: list[LoraModule], weights: Tensor) -> Tensor:
    """``sum_i weights[0, i] * (h @ down_i @ up_i)`` evaluated as one stacked product."""
    k = len(modules)
    r = modules[0].rank
    if weights.shape != (1, k):
        raise ShapeError(f"expected 1 x {k} weights, got {weights.shape}")
    down, up = _stack(modules)
    hd = tn.matmul(h, down)
    n = hd.shape[0]
    scaled = tn.mul(tn.reshape(hd, (n, k, r)), tn.reshape(weights, (1, k, 1)))
    return tn.matmul(tn.reshape(scaled, (n, k * r)), up)


def compose(
    h: Tensor,
    base: Tensor,
    task: int,
    adapter: ComposedAdapter,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    weights: RoutingWeights | None = None,
) -> Tensor:
    inv, alloc = adapter.inventory, adapter.allocation
    d = base.shape[0]
    if h.ndim != 2 or h.shape[1] != d or base.shape != (d, d) or inv.d != d:
        raise ShapeError(f"compose: h {h.shape}, base {base.shape}, adapter width {inv.d}")
    if weights is None:
        weights = routing_weights(alloc, task, mode=mode, rng=rng)
    out = tn.add(tn.matmul(h, base), weighted_delta(h, inv.common, weights.common))
    if weights.specific is not None:
        if alloc.mask_off_diagonal:
            # off-block weights are pinned at exactly zero; only the task's own block contributes
            own = tn.getitem(weights.specific, (slice(None), slice(task * inv.B, (task + 1) * inv.B)))
            out = tn.add(out, weighted_delta(h, inv.specific[task], own))
        else:
            out = tn.add(out, weighted_delta(h, inv.specific_flat(), weights.specific))
    return out

