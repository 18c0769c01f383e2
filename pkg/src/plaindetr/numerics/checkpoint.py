"""Checkpoints: a JSON manifest plus a raw little-endian float64 blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ContractError


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": "f64le", "blob": blob_path.name, "params": entries, "meta": meta or {}}
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_arrays(manifest_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    if manifest_path.suffix != ".json":
        manifest_path = manifest_path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "f64le":
        raise ContractError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for e in manifest["params"]:
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, manifest.get("meta", {})
