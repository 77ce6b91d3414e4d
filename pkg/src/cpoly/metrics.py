"""Exact match and Rouge-1 / Rouge-L / Rouge-Lsum over token-id sequences.

No stemming or stopword handling: tokens compare as exact ids.
"""

from __future__ import annotations

from collections import Counter
from typing import Hashable, Sequence

Seq = Sequence[Hashable]


def lcs_length(a: Seq, b: Seq) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _lcs_table(a: Seq, b: Seq) -> list[list[int]]:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            table[i + 1][j + 1] = table[i][j] + 1 if x == y else max(table[i][j + 1], table[i + 1][j])
    return table


def _lcs_ref_hits(ref: Seq, cand: Seq) -> set[int]:
    """Indices of ``ref`` that take part in one longest common subsequence with ``cand``."""
    table = _lcs_table(ref, cand)
    i, j = len(ref), len(cand)
    hits = set()
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            hits.add(i - 1)
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return hits


def _f1(hits: float, n_pred: int, n_ref: int) -> float:
    if hits == 0 or n_pred == 0 or n_ref == 0:
        return 0.0
    p = hits / n_pred
    r = hits / n_ref
    return 2 * p * r / (p + r)


def rouge1(pred: Seq, ref: Seq) -> float:
    overlap = sum((Counter(pred) & Counter(ref)).values())
    return _f1(overlap, len(pred), len(ref))


def rougeL(pred: Seq, ref: Seq) -> float:
    return _f1(lcs_length(pred, ref), len(pred), len(ref))


def _segments(seq: Seq, sep) -> list[list]:
    out, cur = [], []
    for tok in seq:
        if tok == sep:
            if cur:
                out.append(cur)
            cur = []
        else:
            cur.append(tok)
    if cur:
        out.append(cur)
    return out


def rougeLsum(pred: Seq, ref: Seq, sep="\n") -> float:
    """Summary-level LCS: union of per-reference-segment LCS hits against every predicted segment."""
    pred_segs = _segments(pred, sep)
    ref_segs = _segments(ref, sep)
    n_pred = sum(len(s) for s in pred_segs)
    n_ref = sum(len(s) for s in ref_segs)
    if not n_pred or not n_ref:
        return 0.0
    pred_counts = Counter(t for s in pred_segs for t in s)
    ref_counts = Counter(t for s in ref_segs for t in s)
    hits = 0
    for rseg in ref_segs:
        union: set[int] = set()
        for pseg in pred_segs:
            union |= _lcs_ref_hits(rseg, pseg)
        for idx in sorted(union):
            tok = rseg[idx]
            if pred_counts[tok] > 0 and ref_counts[tok] > 0:
                hits += 1
                pred_counts[tok] -= 1
                ref_counts[tok] -= 1
    return _f1(hits, n_pred, n_ref)


def exact_match(pred: Seq, ref: Seq) -> float:
    return float(list(pred) == list(ref))


def sequence_metrics(preds: Sequence[Seq], refs: Sequence[Seq], sep="\n") -> dict[str, float]:
    """Mean of each metric over paired predictions and references."""
    if len(preds) != len(refs):
        raise ValueError(f"{len(preds)} predictions for {len(refs)} references")
    if not refs:
        raise ValueError("empty reference set")
    n = len(refs)
    return {
        "exact_match": sum(exact_match(p, r) for p, r in zip(preds, refs)) / n,
        "rouge1": sum(rouge1(p, r) for p, r in zip(preds, refs)) / n,
        "rougeL": sum(rougeL(p, r) for p, r in zip(preds, refs)) / n,
        "rougeLsum": sum(rougeLsum(p, r, sep) for p, r in zip(preds, refs)) / n,
    }
