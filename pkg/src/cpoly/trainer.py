"""Multi-task optimization loop: AdamW, linear warmup/decay, round-robin task mixing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import PAD_ID, TaskBatch, TaskData
from .metrics import sequence_metrics
from .model import TransformerModel
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

METRIC_NAMES = ("exact_match", "rouge1", "rougeL", "rougeLsum")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.06
    epochs: int = 3
    batch_size: int = 4
    seed: int = 0
    mixing: str = "round_robin"  # or "proportional"
    routing_lr_multiplier: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 128

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mixing not in ("round_robin", "proportional"):
            raise ValueError(f"unknown mixing strategy {self.mixing!r}")


# ------------------------------------------------------------------ schedule


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear ramp to ``base_lr`` over ``ceil(warmup_ratio * total)`` steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float | np.ndarray | dict[str, float | np.ndarray],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, written into ``params`` in place.

    ``lr`` may be a scalar, an array matching a parameter, or a per-name mapping
    of either. A missing gradient counts as zero.
    """
    for name, g in grads.items():
        if g is not None and np.isnan(g).any():
            raise NumericError(f"gradient of {name!r} contains NaN")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step_lr = lr[name] if isinstance(lr, dict) else lr
        theta = p.data * (1.0 - step_lr * weight_decay)
        p.data[...] = theta - step_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class FlatParameters:
    """Re-home parameter storage into one contiguous buffer so AdamW runs as a single vector update.

    Each parameter's ``data`` becomes a view into the buffer; updates are
    elementwise, so results are bitwise identical to per-tensor updates.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.names = list(params)
        sizes = [params[n].size for n in self.names]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.buffer = Tensor(np.concatenate([params[n].data.ravel() for n in self.names]))
        for n, lo, hi in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            params[n].data = self.buffer.data[lo:hi].reshape(params[n].shape)

    def gather_grads(self) -> np.ndarray:
        out = np.zeros_like(self.buffer.data)
        for n, lo, hi in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            g = self.params[n].grad
            if g is not None:
                out[lo:hi] = g.ravel()
        return out

    def expand(self, per_param: dict[str, float]) -> np.ndarray:
        out = np.empty_like(self.buffer.data)
        for n, lo, hi in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            out[lo:hi] = per_param[n]
        return out


# -------------------------------------------------------------------- batching


def epoch_schedule(tasks: list[TaskData], batch_size: int, seed: int, epoch: int, mixing: str) -> list[tuple[int, np.ndarray]]:
    per_task = []
    for task in tasks:
        n = len(task.train)
        if n == 0:
            raise ValueError(f"task {task.name!r} has an empty training split")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xE70C, epoch, task.task_id)))
        order = rng.permutation(n)
        per_task.append([(task.task_id, order[i : i + batch_size]) for i in range(0, n, batch_size)])
    if mixing == "round_robin":
        out = []
        for k in range(max(len(b) for b in per_task)):
            out.extend(b[k] for b in per_task if k < len(b))
        return out
    flat = [item for b in per_task for item in b]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x3A1, epoch)))
    return [flat[i] for i in rng.permutation(len(flat))]


def steps_per_epoch(tasks: list[TaskData], batch_size: int) -> int:
    return sum(math.ceil(len(t.train) / batch_size) for t in tasks)


# ------------------------------------------------------------------ evaluation


def batch_loss(model: TransformerModel, batch: TaskBatch, mode: str, step: int = 0, noise_seed: int | None = None) -> Tensor:
    logits = model.forward(batch.tokens, batch.task_id, mode=mode, step=step, noise_seed=noise_seed)
    if model.cfg.output == "sequence":
        return tn.cross_entropy_with_logits(logits, batch.targets.reshape(-1), ignore_index=PAD_ID)
    return tn.cross_entropy_with_logits(logits, batch.targets)


def _trim(seq) -> list[int]:
    out = []
    for tok in seq:
        if tok == PAD_ID:
            break
        out.append(int(tok))
    return out


def evaluate(model: TransformerModel, tasks: list[TaskData], split: str = "eval", batch_size: int = 128) -> dict:
    """Per-task loss and metrics in eval mode, plus unweighted means across tasks."""
    per_task = {}
    with tn.no_grad():
        for task in tasks:
            data = getattr(task, split)
            if len(data) == 0:
                continue
            preds, refs, loss_sum = [], [], 0.0
            for lo in range(0, len(data), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(data)))
                batch = data.batch(task.task_id, idx)
                logits = model.forward(batch.tokens, task.task_id, mode="eval")
                loss = batch_loss_from_logits(model, logits, batch)
                loss_sum += loss * len(idx)
                if model.cfg.output == "sequence":
                    p = logits.data.argmax(axis=1).reshape(len(idx), -1)
                    preds += [_trim(row) for row in p]
                    refs += [_trim(row) for row in batch.targets]
                else:
                    preds += [[int(c)] for c in logits.data.argmax(axis=1)]
                    refs += [[int(c)] for c in batch.targets]
            metrics = sequence_metrics(preds, refs)
            metrics["loss"] = loss_sum / len(data)
            per_task[task.task_id] = metrics
    keys = METRIC_NAMES + ("loss",)
    mean = {k: float(np.mean([m[k] for m in per_task.values()])) for k in keys} if per_task else {}
    return {"per_task": per_task, "mean": mean}


def batch_loss_from_logits(model: TransformerModel, logits: Tensor, batch: TaskBatch) -> float:
    if model.cfg.output == "sequence":
        targets = batch.targets.reshape(-1)
        if (targets != PAD_ID).sum() == 0:
            return 0.0
        return tn.cross_entropy_with_logits(logits, targets, ignore_index=PAD_ID).item()
    return tn.cross_entropy_with_logits(logits, batch.targets).item()


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    history: list[dict]
    final: dict
    steps: int


class DivergenceError(RuntimeError):
    pass


def param_lrs(model: TransformerModel, base: float, multiplier: float) -> dict[str, float]:
    """Common-skill logits get ``multiplier * base``; adapters and specific weights get ``base``."""
    lrs = {name: base for name in model.trainable_parameters()}
    for name in model.routing_parameters():
        if name.endswith("logits_A"):
            lrs[name] = base * multiplier
    return lrs


def train(
    model: TransformerModel,
    tasks: list[TaskData],
    config: TrainConfig,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    if len(tasks) != model.cfg.n_tasks:
        raise ValueError(f"model expects {model.cfg.n_tasks} tasks, got {len(tasks)}")
    history: list[dict] = []
    per_epoch = steps_per_epoch(tasks, config.batch_size)
    total = per_epoch * config.epochs
    params = model.trainable_parameters()
    allocations = list(model.allocations().values())
    flat = FlatParameters(params)
    lr_scale = flat.expand(param_lrs(model, 1.0, config.routing_lr_multiplier))
    state = OptimizerState()
    tape = tn.get_tape()
    step = 0
    for epoch in range(config.epochs):
        running = []
        for task_id, idx in epoch_schedule(tasks, config.batch_size, config.seed, epoch, config.mixing):
            batch = tasks[task_id].train.batch(task_id, idx)
            for p in params.values():
                p.zero_grad()
            tape.reset()
            loss = batch_loss(model, batch, mode="train", step=step, noise_seed=config.seed)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at step {step} (task {task_id})")
            tn.backward(loss)
            tape.reset()
            for alloc in allocations:
                alloc.apply_gradient_mask()
            base_lr = lr_at(step, total, config.learning_rate, config.warmup_ratio)
            adamw_step(
                {"flat": flat.buffer},
                {"flat": flat.gather_grads()},
                state,
                base_lr * lr_scale,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
            running.append(loss.item())
            step += 1
        report = evaluate(model, tasks, "eval", config.eval_batch_size)
        history.extend(report_rows(step, report, "eval"))
        history.append({"step": step, "task": "all", "split": "train", "loss": float(np.mean(running)),
                        **{k: "" for k in METRIC_NAMES}})
        log.info("epoch %d: train loss %.4f, eval EM %.4f", epoch, np.mean(running), report["mean"]["exact_match"])
        if on_epoch is not None:
            on_epoch(epoch, report)
    final = evaluate(model, tasks, "eval", config.eval_batch_size)
    return TrainResult(history=history, final=final, steps=step)


def report_rows(step: int, report: dict, split: str) -> list[dict]:
    rows = []
    for task_id, m in report["per_task"].items():
        rows.append({"step": step, "task": task_id, "split": split, **{k: m[k] for k in ("loss",) + METRIC_NAMES}})
    if report["mean"]:
        rows.append({"step": step, "task": "mean", "split": split,
                     **{k: report["mean"][k] for k in ("loss",) + METRIC_NAMES}})
    return rows
