"""Task-to-skill allocation: relaxed-Bernoulli common weights and identity-initialized specific weights."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import Tensor

U_CLAMP = 1e-6
NORM_FLOOR = 1e-8


class RoutingVariant(str, enum.Enum):
    SINGLE_LORA = "lora"
    MOE_LORA = "moe"
    POLY = "poly"
    CPOLY = "cpoly"

    @classmethod
    def parse(cls, value) -> "RoutingVariant":
        if isinstance(value, cls):
            return value
        aliases = {"single": "lora", "singlelora": "lora", "moelora": "moe", "moe-lora": "moe", "c-poly": "cpoly"}
        key = str(value).lower()
        return cls(aliases.get(key, key))


# ------------------------------------------------------------ gumbel-sigmoid


def _relaxed(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    # sigma(log(a / b)) written as a / (a + b); exact at u = 0.5 and at s = 0.5
    a = s * u
    b = (1.0 - s) * (1.0 - u)
    return a / (a + b)


def _check_noise(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.isnan(u).any() or (u < 0).any() or (u > 1).any():
        raise ValueError("gumbel_sigmoid noise must lie in [0, 1]")
    return np.clip(u, U_CLAMP, 1.0 - U_CLAMP)


def gumbel_sigmoid(logit, u):
    """Relaxed Bernoulli sample ``sigma(log(sigma(w) u / ((1 - sigma(w)) (1 - u))))``.

    ``logit`` may be a float, an array, or a :class:`Tensor`; a Tensor input
    yields a Tensor differentiable in the logit. ``u`` is treated as a constant
    and clamped to ``[1e-6, 1 - 1e-6]``.
    """
    u = _check_noise(u)
    if isinstance(logit, Tensor):
        s = tn._sigmoid(logit.data)
        out = _relaxed(s, np.broadcast_to(u, s.shape))
        return tn._make(out, (logit,), lambda g: (g * out * (1.0 - out),))
    s = tn._sigmoid(np.asarray(logit, dtype=np.float64))
    out = _relaxed(s, u)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- allocation


@dataclass
class AllocationMatrix:
    """Routing parameters for one adapted projection.

    ``logits_A`` holds pre-sigmoid common-skill logits, one row per task (a
    single shared row for the task-agnostic MoE variant). ``weights_B`` holds
    raw task-specific weights, ``T x (T*B)``, initialized to a block identity.
    """

    variant: RoutingVariant
    T: int
    A: int
    B: int
    logits_A: Tensor | None
    weights_B: Tensor | None
    mask_off_diagonal: bool = False
    normalize: bool = True
    hard_eval: bool = False

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.logits_A, self.weights_B) if p is not None]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        if self.logits_A is not None:
            out[prefix + "logits_A"] = self.logits_A
        if self.weights_B is not None:
            out[prefix + "weights_B"] = self.weights_B
        return out

    def own_block_mask(self) -> np.ndarray:
        """Boolean ``T x (T*B)`` mask of each task's own specific columns."""
        return np.kron(np.eye(self.T, dtype=bool), np.ones((1, self.B), dtype=bool))

    def apply_gradient_mask(self) -> None:
        if self.mask_off_diagonal and self.weights_B is not None and self.weights_B.grad is not None:
            self.weights_B.grad = np.where(self.own_block_mask(), self.weights_B.grad, 0.0)


def init_allocation(
    T: int,
    A: int,
    seed,
    variant: RoutingVariant | str = RoutingVariant.CPOLY,
    B: int | None = None,
    mask_off_diagonal: bool = False,
    normalize: bool = True,
    hard_eval: bool = False,
) -> AllocationMatrix:
    """Near-uniform common logits on ``[-1e-3, 1e-3]`` and ``W_B = I``."""
    variant = RoutingVariant.parse(variant)
    if T < 1 or A < 1:
        raise ValueError(f"need T >= 1 and A >= 1, got T={T}, A={A}")
    if B is None:
        B = 1 if variant is RoutingVariant.CPOLY else 0
    rng = np.random.default_rng(seed)
    logits = weights = None
    if variant is RoutingVariant.SINGLE_LORA:
        if A != 1 or B != 0:
            raise ValueError("single LoRA uses exactly one skill and no specific skills")
    else:
        rows = 1 if variant is RoutingVariant.MOE_LORA else T
        logits = Tensor(rng.uniform(-1e-3, 1e-3, size=(rows, A)), requires_grad=True, name="logits_A")
    if variant is RoutingVariant.CPOLY:
        if B < 1:
            raise ValueError("C-Poly needs at least one task-specific skill (B >= 1)")
        weights = Tensor(
            np.kron(np.eye(T), np.ones((1, B))), requires_grad=True, name="weights_B"
        )
    elif B != 0:
        raise ValueError(f"variant {variant.value} has no task-specific skills, got B={B}")
    return AllocationMatrix(
        variant=variant,
        T=T,
        A=A,
        B=B,
        logits_A=logits,
        weights_B=weights,
        mask_off_diagonal=mask_off_diagonal,
        normalize=normalize,
        hard_eval=hard_eval,
    )


def noise_rng(seed: int, step: int, layer: int, matrix: int, task: int) -> np.random.Generator:
    """Counter-keyed stream: the same key always yields the same draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, layer, matrix, task)))


@dataclass
class RoutingWeights:
    common: Tensor  # 1 x A, normalized when the allocation asks for it
    common_raw: Tensor  # 1 x A, before normalization
    specific: Tensor | None  # 1 x (T*B)


def routing_weights(
    alloc: AllocationMatrix,
    task: int,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> RoutingWeights:
    if not 0 <= task < alloc.T:
        raise IndexError(f"task {task} out of range for T={alloc.T}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if alloc.variant is RoutingVariant.SINGLE_LORA:
        one = Tensor(np.ones((1, 1)))
        return RoutingWeights(common=one, common_raw=one, specific=None)

    row_index = 0 if alloc.variant is RoutingVariant.MOE_LORA else task
    logits = tn.row(alloc.logits_A, row_index)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode routing needs a random generator")
        u = rng.uniform(0.0, 1.0, size=logits.shape)
        raw = gumbel_sigmoid(logits, u)
    else:
        raw = gumbel_sigmoid(logits, np.full(logits.shape, 0.5))
        if alloc.hard_eval:
            raw = Tensor((raw.data > 0.5).astype(np.float64))
    common = raw
    if alloc.normalize:
        total = tn.sum(raw, axis=1, keepdims=True)
        if total.data[0, 0] < NORM_FLOOR:
            total = Tensor(np.full((1, 1), NORM_FLOOR))
        common = tn.div(raw, total)
    specific = tn.row(alloc.weights_B, task) if alloc.weights_B is not None else None
    return RoutingWeights(common=common, common_raw=raw, specific=specific)


# -------------------------------------------------------------------- export


def allocation_table(alloc: AllocationMatrix) -> tuple[list[str], list[list[float]]]:
    """Eval-mode normalized weights, one row per task."""
    header = ["task"] + [f"skill_{i}" for i in range(alloc.A)]
    if alloc.weights_B is not None:
        header += [f"specific_{j}" for j in range(alloc.weights_B.shape[1])]
    rows = []
    with tn.no_grad():
        for t in range(alloc.T):
            w = routing_weights(alloc, t, mode="eval")
            vals = list(w.common.data[0])
            if w.specific is not None:
                vals += list(w.specific.data[0])
            rows.append([t] + [float(v) for v in vals])
    return header, rows


def write_table(path: str | Path | None, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def export_allocation(alloc: AllocationMatrix, path: str | Path | None = None) -> str:
    header, rows = allocation_table(alloc)
    return write_table(path, header, rows)
