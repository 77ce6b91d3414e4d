from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from cpoly import tensor as tn
from cpoly.config import ExperimentConfig
from cpoly.data import generate_benchmark
from cpoly.model import TransformerModel
from cpoly.trainer import evaluate, train


@pytest.fixture(autouse=True)
def _fresh_tape():
    tn.reset_tape()
    yield
    tn.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class DeskRun:
    variant: str
    A: int
    B: int
    seed: int
    model: TransformerModel
    eval_em: float
    train_loss_init: float
    train_loss_epoch1: float
    seconds: float


class DeskSweep:
    """Trains desk-preset models on the default benchmark once per session and caches them."""

    def __init__(self):
        self.cfg = ExperimentConfig()
        self.bench = generate_benchmark()
        self.runs: dict[tuple, DeskRun] = {}

    def get(self, variant: str, seed: int, A: int | None = None, B: int | None = None) -> DeskRun:
        mcfg = self.cfg.model_config(self.bench.vocab_size, self.bench.n_tasks, seed, variant=variant, A=A, B=B)
        key = (mcfg.variant, mcfg.A, mcfg.B, seed)
        if key in self.runs:
            return self.runs[key]
        tasks = self.bench.tasks
        model = TransformerModel(mcfg)
        start = time.perf_counter()
        init_loss = evaluate(model, tasks, "train", 1024)["mean"]["loss"]
        after = {}

        def on_epoch(epoch, report):
            if epoch == 0:
                after["loss"] = evaluate(model, tasks, "train", 1024)["mean"]["loss"]

        result = train(model, tasks, self.cfg.train_config(seed), on_epoch=on_epoch)
        run = DeskRun(
            variant=mcfg.variant, A=mcfg.A, B=mcfg.B, seed=seed, model=model,
            eval_em=result.final["mean"]["exact_match"], train_loss_init=init_loss,
            train_loss_epoch1=after["loss"], seconds=time.perf_counter() - start,
        )
        self.runs[key] = run
        return run


@pytest.fixture(scope="session")
def desk_sweep() -> DeskSweep:
    return DeskSweep()
