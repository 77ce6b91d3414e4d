"""Flat-directory checkpoints: ``manifest.json`` plus one raw ``<f8`` buffer per tensor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        fname = name.replace("/", "__") + ".f64"
        (directory / fname).write_bytes(arr.tobytes(order="C"))
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": "cpoly-checkpoint/1", "meta": meta, "tensors": entries}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    arrays = {}
    for name, entry in manifest["tensors"].items():
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"buffer for {name!r} has {arr.size} values, manifest says {shape}")
        arrays[name] = arr.reshape(shape)
    return arrays, manifest["meta"]
