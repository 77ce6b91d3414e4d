"""Synthetic multi-task benchmark with known skill structure, plus a JSONL loader.

Each latent skill is a signed token pattern: a small set of token ids whose
occurrence count pushes a task's score up (or down, for the mirrored skill).
A task's score is the sum of its skills' counts plus a task-unique pattern
count; the label is whether the score clears a half-integer threshold, so it
can never tie.

With ``mirror=True`` the second half of the groups are exact mirrors of the
first half: same inputs, complemented labels. Any model that ignores the task
id is then stuck at 50% on each mirror pair, which is the negative transfer
that task-indexed routing is meant to resolve.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
N_RESERVED = 2


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    ground_truth_skills: tuple[int, ...]
    unique_transform_seed: int
    n_train: int = 1000
    n_eval: int = 100
    group: int = 0
    unique_sign: int = 1
    threshold: float = 0.5
    pool: int = 0  # tasks sharing a pool see identical inputs

    def __post_init__(self) -> None:
        if not self.ground_truth_skills:
            raise ValueError(f"task {self.task_id} has no latent skills")


@dataclass
class TaskBatch:
    task_id: int
    tokens: np.ndarray  # batch x seq, int
    targets: np.ndarray  # batch (class ids) or batch x seq (token ids)

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be a rectangular batch x seq matrix")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Split:
    tokens: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def batch(self, task_id: int, idx) -> TaskBatch:
        return TaskBatch(task_id, self.tokens[idx], self.targets[idx])


@dataclass
class TaskData:
    task_id: int
    name: str
    train: Split
    eval: Split


@dataclass
class GroundTruthAssignment:
    matrix: np.ndarray  # T x K, 0/1
    groups: list[int]

    def __post_init__(self) -> None:
        if (self.matrix.sum(axis=1) < 1).any():
            raise ValueError("every task needs at least one latent skill")

    def to_json(self) -> dict:
        return {"assignment": self.matrix.astype(int).tolist(), "groups": list(self.groups)}


@dataclass
class Benchmark:
    tasks: list[TaskData]
    truth: GroundTruthAssignment
    specs: list[TaskSpec]
    patterns: list[list[int]]
    vocab_size: int
    seq_len: int
    params: dict = field(default_factory=dict)
    unique_pool: list[int] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_classes(self) -> int:
        return 2


# ----------------------------------------------------------------- generation


def _skill_pattern_and_sign(skill: int, K: int, mirror: bool) -> tuple[int, int]:
    if mirror:
        half = K // 2
        return skill % half, (1 if skill < half else -1)
    return skill, 1


def unique_pattern(seed: int, pool_tokens: np.ndarray, size: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool_tokens, size=size, replace=False))


def task_score(tokens: np.ndarray, spec: TaskSpec, bench_patterns: list[np.ndarray], K: int, mirror: bool,
               unique_pool: np.ndarray, pattern_size: int) -> np.ndarray:
    tokens = np.atleast_2d(tokens)
    score = np.zeros(tokens.shape[0])
    for k in spec.ground_truth_skills:
        p, sign = _skill_pattern_and_sign(k, K, mirror)
        score += sign * np.isin(tokens, bench_patterns[p]).sum(axis=1)
    u = unique_pattern(spec.unique_transform_seed, unique_pool, pattern_size)
    score += spec.unique_sign * np.isin(tokens, u).sum(axis=1)
    return score


def label_function(spec: TaskSpec, bench_patterns, K: int, mirror: bool, unique_pool, pattern_size: int):
    def labels(tokens: np.ndarray) -> np.ndarray:
        s = task_score(tokens, spec, bench_patterns, K, mirror, unique_pool, pattern_size)
        return (s > spec.threshold).astype(np.int64)

    return labels


def _split_order(seed: int, pool: int, n: int) -> np.ndarray:
    keys = [hashlib.blake2b(f"{seed}:{pool}:{i}".encode(), digest_size=8).digest() for i in range(n)]
    return np.array(sorted(range(n), key=lambda i: keys[i]))


def generate_benchmark(
    K: int = 6,
    T: int = 8,
    group_structure: list[int] | None = None,
    seq_len: int = 16,
    vocab: int = 64,
    seed: int = 0,
    n_train: int = 1000,
    n_eval: int = 100,
    skills_per_group: int = 2,
    pattern_size: int = 4,
    mirror: bool = True,
    label_flip: float = 0.0,
) -> Benchmark:
    """Build ``T`` binary classification tasks over ``K`` latent skills.

    ``group_structure`` lists group sizes (default: pairs). Tasks in a group
    share a skill subset and differ only in their unique pattern.
    """
    if T < 2 or K < 2:
        raise ValueError(f"need T >= 2 and K >= 2, got T={T}, K={K}")
    groups_sizes = list(group_structure) if group_structure is not None else [2] * (T // 2) + [1] * (T % 2)
    if sum(groups_sizes) != T or min(groups_sizes) < 1:
        raise ValueError(f"group sizes {groups_sizes} do not partition {T} tasks")
    G = len(groups_sizes)
    if mirror and (K % 2 or G % 2 or groups_sizes[: G // 2] != groups_sizes[G // 2 :]):
        raise ValueError("mirrored benchmarks need even K and two identical halves of groups")
    n_patterns = K // 2 if mirror else K
    content = np.arange(N_RESERVED, vocab)
    n_unique_pools = sum(groups_sizes[: G // 2]) if mirror else T
    if len(content) < (n_patterns + 1) * pattern_size or len(content) < n_patterns * pattern_size + n_unique_pools:
        raise ValueError(f"vocabulary of {vocab} is too small for {n_patterns} patterns of size {pattern_size}")
    if skills_per_group > n_patterns:
        raise ValueError("skills_per_group exceeds the number of distinct patterns")

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xDA7A,)))
    perm = rng.permutation(content)
    patterns = [np.sort(perm[i * pattern_size : (i + 1) * pattern_size]) for i in range(n_patterns)]
    unique_pool = np.sort(perm[n_patterns * pattern_size :])

    # skill subsets per group
    base_groups = G // 2 if mirror else G
    subsets: list[tuple[int, ...]] = []
    seen = set()
    for _ in range(base_groups):
        for _attempt in range(1000):
            pats = tuple(sorted(rng.choice(n_patterns, size=skills_per_group, replace=False).tolist()))
            signs = rng.integers(0, 2, size=skills_per_group)
            if mirror:
                subset = tuple(sorted(int(p + (K // 2) * s) for p, s in zip(pats, signs)))
            else:
                subset = tuple(int(p) for p in pats)
            if subset not in seen:
                break
        seen.add(subset)
        subsets.append(subset)
    if mirror:
        half = K // 2
        subsets += [tuple(sorted((k + half) % K for k in s)) for s in subsets]

    exp_count = seq_len * pattern_size / len(content)
    specs: list[TaskSpec] = []
    task_id = 0
    pool_of_base: list[int] = []
    for g, size in enumerate(groups_sizes):
        for j in range(size):
            mirrored = mirror and g >= G // 2
            if mirrored:
                base = specs[pool_of_base[sum(groups_sizes[: g - G // 2]) + j]]
                spec = TaskSpec(
                    task_id=task_id,
                    ground_truth_skills=subsets[g],
                    unique_transform_seed=base.unique_transform_seed,
                    n_train=n_train,
                    n_eval=n_eval,
                    group=g,
                    unique_sign=-base.unique_sign,
                    threshold=-base.threshold,
                    pool=base.pool,
                )
            else:
                signs = [_skill_pattern_and_sign(k, K, mirror)[1] for k in subsets[g]]
                expected = exp_count * (sum(signs) + 1)
                spec = TaskSpec(
                    task_id=task_id,
                    ground_truth_skills=subsets[g],
                    unique_transform_seed=int(rng.integers(0, 2**31 - 1)),
                    n_train=n_train,
                    n_eval=n_eval,
                    group=g,
                    unique_sign=1,
                    threshold=float(np.floor(expected)) + 0.5,
                    pool=task_id,
                )
                pool_of_base.append(task_id)
            specs.append(spec)
            task_id += 1

    pools: dict[int, np.ndarray] = {}
    for spec in specs:
        if spec.pool not in pools:
            prng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9001, spec.pool)))
            pools[spec.pool] = prng.choice(content, size=(n_train + n_eval, seq_len))

    tasks = []
    for spec in specs:
        tokens = pools[spec.pool]
        labels = label_function(spec, patterns, K, mirror, unique_pool, pattern_size)(tokens)
        if label_flip > 0:
            frng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xF11B, spec.pool)))
            # keyed by pool, so mirrored tasks flip the same examples and stay complements
            flips = frng.random(len(labels)) < label_flip
            labels = np.where(flips, 1 - labels, labels)
        order = _split_order(seed, spec.pool, len(tokens))
        ev, tr = order[:n_eval], order[n_eval:]
        tasks.append(
            TaskData(
                task_id=spec.task_id,
                name=f"task{spec.task_id}",
                train=Split(tokens[tr], labels[tr]),
                eval=Split(tokens[ev], labels[ev]),
            )
        )

    matrix = np.zeros((T, K), dtype=np.int64)
    for spec in specs:
        matrix[spec.task_id, list(spec.ground_truth_skills)] = 1
    truth = GroundTruthAssignment(matrix=matrix, groups=[s.group for s in specs])
    params = dict(K=K, T=T, group_structure=groups_sizes, seq_len=seq_len, vocab=vocab, seed=seed,
                  n_train=n_train, n_eval=n_eval, skills_per_group=skills_per_group,
                  pattern_size=pattern_size, mirror=mirror, label_flip=label_flip)
    return Benchmark(tasks=tasks, truth=truth, specs=specs, patterns=[p.tolist() for p in patterns],
                     vocab_size=vocab, seq_len=seq_len, params=params, unique_pool=unique_pool.tolist())


def task_label_function(bench: Benchmark, task_id: int):
    p = bench.params
    pats = [np.asarray(x) for x in bench.patterns]
    return label_function(bench.specs[task_id], pats, p["K"], p["mirror"], np.asarray(bench.unique_pool),
                          p["pattern_size"])


# ---------------------------------------------------------------------- JSONL


class Vocabulary:
    """Whitespace vocabulary ordered by descending frequency, ties broken lexically."""

    def __init__(self, tokens: list[str]):
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        counts = Counter(tok for text in texts for tok in text.split())
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids if i != PAD_ID)

    def to_json(self) -> list[str]:
        return list(self.itos)


@dataclass
class JsonlCorpus:
    task_names: list[str]
    examples: dict[str, list[tuple[str, str]]]  # task -> [(input, target)]
    vocab: Vocabulary

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)


class JsonlFormatError(ValueError):
    pass


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not all(isinstance(obj.get(k), str) for k in ("task", "input", "target")):
                raise JsonlFormatError(f"{path}:{lineno}: need string fields 'task', 'input', 'target'")
            rows.append(obj)
    if not rows:
        raise JsonlFormatError(f"{path}: no examples")
    return rows


def load_jsonl(path: str | Path, tokenizer: Vocabulary | None = None) -> JsonlCorpus:
    rows = read_jsonl(path)
    names: list[str] = []
    examples: dict[str, list[tuple[str, str]]] = {}
    for obj in rows:
        if obj["task"] not in examples:
            names.append(obj["task"])
            examples[obj["task"]] = []
        examples[obj["task"]].append((obj["input"], obj["target"]))
    if tokenizer is None:
        tokenizer = Vocabulary.build(t for obj in rows for t in (obj["input"], obj["target"]))
    return JsonlCorpus(task_names=names, examples=examples, vocab=tokenizer)


def write_jsonl(path: str | Path, rows) -> None:
    with Path(path).open("w") as fh:
        for task, inp, target in rows:
            fh.write(json.dumps({"task": task, "input": inp, "target": target}, sort_keys=True) + "\n")


def corpus_to_tasks(train: JsonlCorpus, eval_: JsonlCorpus | None, seq_len: int, output: str = "classify",
                    labels: list[str] | None = None) -> tuple[list[TaskData], list[str]]:
    """Pad/truncate to ``seq_len``; classification maps target strings to class ids."""
    vocab = train.vocab
    if labels is None:
        labels = sorted({tgt for exs in train.examples.values() for _, tgt in exs})
    label_id = {lab: i for i, lab in enumerate(labels)}

    def encode(exs):
        toks = np.full((len(exs), seq_len), PAD_ID, dtype=np.int64)
        if output == "classify":
            tgts = np.zeros(len(exs), dtype=np.int64)
        else:
            tgts = np.full((len(exs), seq_len), PAD_ID, dtype=np.int64)
        for i, (inp, tgt) in enumerate(exs):
            ids = vocab.encode(inp)[:seq_len]
            toks[i, : len(ids)] = ids
            if output == "classify":
                if tgt not in label_id:
                    raise JsonlFormatError(f"unknown label {tgt!r}")
                tgts[i] = label_id[tgt]
            else:
                t_ids = vocab.encode(tgt)[:seq_len]
                tgts[i, : len(t_ids)] = t_ids
        return Split(toks, tgts)

    tasks = []
    for t, name in enumerate(train.task_names):
        tr = encode(train.examples[name])
        ev_rows = eval_.examples.get(name, []) if eval_ is not None else []
        ev = encode(ev_rows) if ev_rows else Split(tr.tokens[:0], tr.targets[:0])
        tasks.append(TaskData(task_id=t, name=name, train=tr, eval=ev))
    return tasks, labels


def save_benchmark(bench: Benchmark, directory: str | Path) -> None:
    """``train.jsonl``, ``eval.jsonl`` (token ids rendered as ``t<id>``) and ``ground_truth.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "eval"):
        rows = []
        for task in bench.tasks:
            s = getattr(task, split)
            for toks, lab in zip(s.tokens, s.targets):
                rows.append((task.name, " ".join(f"t{int(x)}" for x in toks), str(int(lab))))
        write_jsonl(directory / f"{split}.jsonl", rows)
    meta = {
        **bench.truth.to_json(),
        "params": bench.params,
        "patterns": bench.patterns,
        "tasks": [asdict(s) for s in bench.specs],
    }
    (directory / "ground_truth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
