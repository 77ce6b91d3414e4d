"""Post-hoc routing analysis: task profiles, average-linkage dendrograms, ARI, heatmap CSVs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .routing import AllocationMatrix, allocation_table, routing_weights, write_table

TIE_RTOL = 1e-12


# ------------------------------------------------------------------ profiles


def routing_profiles(allocations: Mapping[str, AllocationMatrix]) -> np.ndarray:
    """T x (sum of A over matrices): eval-mode normalized common weights, concatenated in key order."""
    if not allocations:
        raise ValueError("no allocation matrices given")
    T = {a.T for a in allocations.values()}
    if len(T) != 1:
        raise ValueError(f"allocations disagree on task count: {sorted(T)}")
    n_tasks = T.pop()
    blocks = []
    with tn.no_grad():
        for alloc in allocations.values():
            blocks.append(np.vstack([routing_weights(alloc, t, mode="eval").common.data for t in range(n_tasks)]))
    return np.hstack(blocks)


# ---------------------------------------------------------------- dendrogram


@dataclass
class Dendrogram:
    """Merge rows ``(left, right, distance, size)``; ids >= n_leaves name earlier merges (row id - n_leaves)."""

    merges: list[tuple[int, int, float, int]]
    n_leaves: int

    def leaves(self, node: int) -> list[int]:
        if node < self.n_leaves:
            return [node]
        left, right, _, _ = self.merges[node - self.n_leaves]
        return self.leaves(left) + self.leaves(right)

    def leaf_order(self) -> list[int]:
        if not self.merges:
            return [0]
        return self.leaves(self.n_leaves + len(self.merges) - 1)

    def cut(self, k: int) -> list[int]:
        """Group label per leaf after undoing the last ``k - 1`` merges; labels follow first appearance."""
        n = self.n_leaves
        if not 1 <= k <= n:
            raise ValueError(f"cannot cut {n} leaves into {k} groups")
        parent = list(range(n))
        for step, (a, b, _, _) in enumerate(self.merges[: n - k]):
            node = n + step
            for leaf in self.leaves(a) + self.leaves(b):
                parent[leaf] = node
        labels: dict[int, int] = {}
        return [labels.setdefault(p, len(labels)) for p in parent]

    def to_newick(self, names: Sequence[str] | None = None) -> str:
        names = list(names) if names is not None else [f"task{i}" for i in range(self.n_leaves)]

        def height(node: int) -> float:
            return 0.0 if node < self.n_leaves else self.merges[node - self.n_leaves][2]

        def render(node: int, parent_height: float) -> str:
            length = parent_height - height(node)
            if node < self.n_leaves:
                body = names[node]
            else:
                a, b, _, _ = self.merges[node - self.n_leaves]
                body = f"({render(a, height(node))},{render(b, height(node))})"
            return f"{body}:{length:.6g}"

        if not self.merges:
            return f"{names[0]};"
        a, b, h, _ = self.merges[-1]
        return f"({render(a, h)},{render(b, h)});"

    def to_json(self) -> str:
        rows = [{"left": a, "right": b, "distance": d, "size": s} for a, b, d, s in self.merges]
        return json.dumps({"n_leaves": self.n_leaves, "merges": rows}, indent=2)


def cluster_tasks(profiles: np.ndarray) -> Dendrogram:
    """Agglomerative clustering with average linkage on Euclidean distances.

    Ties (within a relative 1e-12) go to the pair whose smallest member task
    ids are lowest, compared lexicographically.
    """
    X = np.asarray(profiles, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"profiles must be a T x n matrix with equal-length rows, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError("clustering needs at least 2 tasks")
    dist = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1))
    members = {i: [i] for i in range(n)}
    merges = []
    for step in range(n - 1):
        ids = sorted(members)
        best = None
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                a, b = ids[x], ids[y]
                d = float(dist[np.ix_(members[a], members[b])].mean())
                key = tuple(sorted((min(members[a]), min(members[b]))))
                if best is None or d < best[0] * (1 - TIE_RTOL) or (d <= best[0] * (1 + TIE_RTOL) and key < best[1]):
                    best = (d, key, a, b)
        d, _, a, b = best
        left, right = sorted((a, b), key=lambda c: min(members[c]))
        new = n + step
        members[new] = members.pop(left) + members.pop(right)
        merges.append((left, right, d, len(members[new])))
    return Dendrogram(merges=merges, n_leaves=n)


# ----------------------------------------------------------------------- ARI


def adjusted_rand_index(pred: Sequence, truth: Sequence) -> float:
    """Pair-counting ARI. Both arguments give a group label per task, in the same task order."""
    pred, truth = list(pred), list(truth)
    if not pred or not truth:
        raise ValueError("empty partition")
    if len(pred) != len(truth):
        raise ValueError(f"partitions cover {len(pred)} and {len(truth)} tasks")
    pairs: dict[tuple, int] = {}
    for p, t in zip(pred, truth):
        pairs[(p, t)] = pairs.get((p, t), 0) + 1
    rows: dict = {}
    cols: dict = {}
    for (p, t), c in pairs.items():
        rows[p] = rows.get(p, 0) + c
        cols[t] = cols.get(t, 0) + c
    index = sum(comb(c, 2) for c in pairs.values())
    sum_rows = sum(comb(c, 2) for c in rows.values())
    sum_cols = sum(comb(c, 2) for c in cols.values())
    total = comb(len(pred), 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        # only when both partitions are all-singletons or both a single block, i.e. identical
        return 1.0
    return float((index - expected) / (max_index - expected))


def routing_ari(allocations: Mapping[str, AllocationMatrix], truth_groups: Sequence[int]) -> tuple[float, Dendrogram]:
    """Cluster tasks by routing profile, cut at the true group count, score against the truth."""
    dendro = cluster_tasks(routing_profiles(allocations))
    k = len(set(truth_groups))
    return adjusted_rand_index(dendro.cut(k), truth_groups), dendro


# ------------------------------------------------------------------- heatmaps


def minmax_columns(rows: list[list[float]]) -> list[list[float]]:
    """Scale each weight column to [0, 1]; constant columns become 0. The task column is left alone."""
    if not rows:
        return []
    vals = np.asarray([r[1:] for r in rows], dtype=np.float64)
    lo = vals.min(axis=0)
    span = vals.max(axis=0) - lo
    scaled = np.divide(vals - lo, span, out=np.zeros_like(vals), where=span > 0)
    return [[r[0]] + list(s) for r, s in zip(rows, scaled)]


def export_heatmap(allocations: Mapping[str, AllocationMatrix], out_dir: str | Path) -> list[Path]:
    """Two CSVs per adapted matrix: raw eval-mode weights and a per-column min-max version."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, alloc in allocations.items():
        header, rows = allocation_table(alloc)
        raw = out / f"allocation_{key}.csv"
        scaled = out / f"allocation_{key}.minmax.csv"
        write_table(raw, header, rows)
        write_table(scaled, header, minmax_columns(rows))
        written += [raw, scaled]
    return written
