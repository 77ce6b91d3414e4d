"""Command-line experiment runner.

    cpoly gen-data --config cfg.json --out DIR
    cpoly train    --config cfg.json [--seed N] [--variant V] [--hard-eval] [--mask-off-diagonal] --out DIR
    cpoly ablate   --config cfg.json --out DIR [--task-counts 4,8,16]
    cpoly compare  --config cfg.json --out DIR
    cpoly analyze  --run DIR [--out DIR]

Every failure exits nonzero with one JSON line on stderr and leaves a
``.failed`` marker in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from .adapters import param_count
from .analysis import cluster_tasks, export_heatmap, routing_ari, routing_profiles
from .config import VARIANT_SHAPES, ExperimentConfig, canonical_json, git_blob_hash
from .data import Benchmark, TaskData, corpus_to_tasks, generate_benchmark, load_jsonl, save_benchmark
from .model import TransformerModel, count_trainable, load_model, save_model
from .trainer import METRIC_NAMES, train

log = logging.getLogger("cpoly")

METRIC_COLUMNS = ["step", "task", "split", "loss", *METRIC_NAMES]


class AuditError(RuntimeError):
    pass


# ---------------------------------------------------------------- datasets


def load_tasks(cfg: ExperimentConfig) -> tuple[list[TaskData], int, list[int] | None, dict]:
    """Tasks, vocabulary size, ground-truth groups (if known) and a description for hashing."""
    if cfg.data is None:
        bench = generate_benchmark(**cfg.benchmark)
        return bench.tasks, bench.vocab_size, list(bench.truth.groups), {"benchmark": bench.params}
    root = Path(cfg.data)
    train_c = load_jsonl(root / "train.jsonl")
    eval_path = root / "eval.jsonl"
    eval_c = load_jsonl(eval_path, tokenizer=train_c.vocab) if eval_path.exists() else None
    seq_len = cfg.model.get("max_seq_len", 16)
    output = cfg.model.get("output", "classify")
    tasks, labels = corpus_to_tasks(train_c, eval_c, seq_len, output=output)
    groups = None
    truth = root / "ground_truth.json"
    if truth.exists():
        groups = json.loads(truth.read_text()).get("groups")
    return tasks, len(train_c.vocab), groups, {"data": str(root), "labels": labels}


def data_hash(tasks: list[TaskData]) -> str:
    buf = io.BytesIO()
    for t in tasks:
        for split in (t.train, t.eval):
            buf.write(np.ascontiguousarray(split.tokens, dtype="<i8").tobytes())
            buf.write(np.ascontiguousarray(split.targets, dtype="<i8").tobytes())
    return git_blob_hash(buf.getvalue())


# ------------------------------------------------------------------ writers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    path.write_text(buf.getvalue())


def write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj))


# ------------------------------------------------------------------- runs


def train_one(cfg: ExperimentConfig, tasks: list[TaskData], vocab_size: int, seed: int, out: Path | None,
              variant: str | None = None, A: int | None = None, B: int | None = None,
              extra: dict | None = None) -> tuple[dict, TransformerModel]:
    """Train a single seed; when ``out`` is given, write config, inputs hash, metrics, checkpoint and summary."""
    mcfg = cfg.model_config(vocab_size, len(tasks), seed, variant=variant, A=A, B=B)
    tcfg = cfg.train_config(seed)
    model = TransformerModel(mcfg)
    frozen_before = {k: v.copy() for k, v in model.frozen_arrays().items()}
    result = train(model, tasks, tcfg)
    for k, v in model.frozen_arrays().items():
        if not np.array_equal(v, frozen_before[k]):
            raise AuditError(f"frozen parameter {k} changed during training")
    summary = {
        "variant": mcfg.variant,
        "A": mcfg.A,
        "B": mcfg.B,
        "r": mcfg.r,
        "seed": seed,
        "steps": result.steps,
        "adapter_params": count_trainable(model, include_routing=False),
        "trainable_params": count_trainable(model),
        "mean": result.final["mean"],
        "per_task": {str(k): v for k, v in result.final["per_task"].items()},
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        resolved = cfg.resolved(mcfg, tcfg)
        resolved["seeds"] = [seed]
        resolved.pop("out")  # where results land is not an experimental input
        config_text = canonical_json(resolved)
        (out / "config.json").write_text(config_text)
        write_json(out / "inputs.json", {
            "config_hash": git_blob_hash(config_text.encode()),
            "data_hash": data_hash(tasks),
            **(extra or {}),
        })
        final_rows = [{"step": result.steps, "task": k, "split": "eval", **v} for k, v in result.final["per_task"].items()]
        write_csv(out / "metrics.csv", METRIC_COLUMNS, result.history + final_rows)
        save_model(model, out / "checkpoint")
        write_json(out / "summary.json", summary)
    return summary, model


def _median_row(rows: list[dict], keys) -> dict:
    return {k: statistics.median(r[k] for r in rows) for k in keys}


def _flatten(summary: dict) -> dict:
    return {k: summary[k] for k in ("variant", "A", "B", "r", "seed", "adapter_params", "trainable_params")} | {
        k: summary["mean"][k] for k in ("loss", *METRIC_NAMES)
    }


TABLE_COLUMNS = ["variant", "A", "B", "r", "seed", "adapter_params", "trainable_params", "loss", *METRIC_NAMES]


def _write_groups(out: Path, runs: list[dict], key) -> list[dict]:
    """Per-run rows plus one median row per group; returns the median rows."""
    rows = [_flatten(s) for s in runs]
    groups: dict = {}
    for row in rows:
        groups.setdefault(key(row), []).append(row)
    medians = []
    for grp in groups.values():
        med = {**{k: grp[0][k] for k in ("variant", "A", "B", "r", "adapter_params", "trainable_params")},
               "seed": "median", **_median_row(grp, ("loss", *METRIC_NAMES))}
        medians.append(med)
    write_csv(out, TABLE_COLUMNS, rows + medians)
    return medians


# --------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, out: Path, args) -> dict:
    opts = dict(cfg.benchmark)
    if args.seed is not None:
        opts["seed"] = args.seed
    bench: Benchmark = generate_benchmark(**opts)
    save_benchmark(bench, out)
    return {"tasks": bench.n_tasks, "vocab": bench.vocab_size}


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> dict:
    tasks, vocab, groups, source = load_tasks(cfg)
    runs = []
    for seed in cfg.seeds:
        summary, _ = train_one(cfg, tasks, vocab, seed, out / f"seed{seed}", extra=source)
        if groups is not None:
            write_json(out / f"seed{seed}" / "ground_truth.json", {"groups": groups})
        runs.append(summary)
    agg = {"runs": runs, "median": _median_row([r["mean"] for r in runs], ("loss", *METRIC_NAMES))}
    write_json(out / "summary.json", agg)
    return {"median_exact_match": agg["median"]["exact_match"]}


def ablation_rows(cfg: ExperimentConfig) -> list[tuple[str, int, int]]:
    """(variant, A, B) per grid row. B = 0 has no task-specific skills, which is Poly."""
    return [("poly" if B == 0 else "cpoly", A, B) for A, B in cfg.ablation_grid]


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> dict:
    task_counts = cfg.task_counts or [None]
    runs = []
    for T in task_counts:
        sub = cfg if T is None else ExperimentConfig.from_dict({**cfg.to_dict(), "benchmark": {**cfg.benchmark, "T": T}})
        tasks, vocab, _, source = load_tasks(sub)
        for variant, A, B in ablation_rows(sub):
            for seed in sub.seeds:
                tag = f"A{A}_B{B}" + ("" if T is None else f"_T{T}")
                summary, _ = train_one(sub, tasks, vocab, seed, out / tag / f"seed{seed}", variant=variant, A=A, B=B,
                                       extra=source)
                summary["n_tasks"] = len(tasks)
                runs.append(summary)
    medians = _write_groups(out / "ablation.csv", runs, key=lambda r: (r["A"], r["B"], r["trainable_params"]))
    write_json(out / "summary.json", {"runs": runs, "median": medians})
    return {"rows": len(medians)}


def cmd_compare(cfg: ExperimentConfig, out: Path, args) -> dict:
    d = cfg.model.get("d_model", 64)
    n_mat = cfg.model.get("n_layers", 2) * 3
    moe = param_count(4, 0, 1, VARIANT_SHAPES["moe"][2], d, n_mat)
    lora = param_count(1, 0, 1, VARIANT_SHAPES["lora"][2], d, n_mat)
    if moe != lora:
        raise AuditError(f"adapter budgets differ: MoE-LoRA {moe} vs LoRA {lora}")
    tasks, vocab, _, source = load_tasks(cfg)
    runs = []
    for variant in VARIANT_SHAPES:
        for seed in cfg.seeds:
            summary, _ = train_one(cfg, tasks, vocab, seed, out / variant / f"seed{seed}", variant=variant, extra=source)
            runs.append(summary)
    medians = _write_groups(out / "compare.csv", runs, key=lambda r: r["variant"])
    write_json(out / "summary.json", {"runs": runs, "median": medians, "parity": {"moe": moe, "lora": lora}})
    return {"variants": len(medians)}


def cmd_analyze(run: Path, out: Path) -> dict:
    model = load_model(run / "checkpoint")
    allocs = model.allocations()
    export_heatmap(allocs, out / "heatmaps")
    result = {"variant": model.cfg.variant}
    truth_path = run / "ground_truth.json"
    if model.cfg.variant != "lora":
        groups = json.loads(truth_path.read_text())["groups"] if truth_path.exists() else None
        if groups is not None:
            ari, dendro = routing_ari(allocs, groups)
            result["ari"] = ari
            result["k"] = len(set(groups))
            result["cut"] = dendro.cut(len(set(groups)))
        else:
            dendro = cluster_tasks(routing_profiles(allocs))
        (out / "dendrogram.json").write_text(dendro.to_json() + "\n")
        (out / "dendrogram.nwk").write_text(dendro.to_newick() + "\n")
    write_json(out / "summary.json", result)
    return result


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpoly", description="Modular adapter experiments on a frozen toy transformer.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "ablate", "compare"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None)
        s.add_argument("--seed", type=int, default=None, help="run only this seed")
        s.add_argument("--out", type=Path, default=None)
        s.add_argument("--variant", choices=list(VARIANT_SHAPES), default=None)
        s.add_argument("--hard-eval", action="store_true")
        s.add_argument("--mask-off-diagonal", action="store_true")
        if name == "ablate":
            s.add_argument("--task-counts", default=None, help="comma-separated task counts to sweep")
    a = sub.add_parser("analyze")
    a.add_argument("--run", type=Path, required=True, help="a seed directory written by train")
    a.add_argument("--out", type=Path, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.variant is not None and args.variant != cfg.variant:
        raw["variant"] = args.variant
        for k in ("A", "B", "r"):
            raw["model"].pop(k, None)
    if args.hard_eval:
        raw["model"]["hard_eval"] = True
    if args.mask_off_diagonal:
        raw["model"]["mask_off_diagonal"] = True
    if getattr(args, "task_counts", None):
        raw["task_counts"] = [int(x) for x in args.task_counts.split(",")]
    if args.out is not None:
        raw["out"] = str(args.out)
    return ExperimentConfig.from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out: Path | None = None
    try:
        if args.command == "analyze":
            out = args.out or args.run / "analysis"
            out.mkdir(parents=True, exist_ok=True)
            result = cmd_analyze(args.run, out)
        else:
            cfg = apply_overrides(ExperimentConfig.load(args.config), args)
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / ".failed").unlink(missing_ok=True)
            handler = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate, "compare": cmd_compare}
            result = handler[args.command](cfg, out, args)
    except Exception as exc:  # noqa: BLE001 - the contract is one parseable line per failure
        out = out or getattr(args, "out", None)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        if out is not None and out.is_dir():
            (out / ".failed").write_text(f"{type(exc).__name__}: {exc}\n")
        print(json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out), **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
