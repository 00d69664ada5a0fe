"""Checkpoint format: a directory holding `manifest.json` (tensor names,
shapes, byte offsets, plus arbitrary JSON extras) and `params.bin`, a single
blob of little-endian 64-bit floats in row-major order."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save(path, tensors: dict[str, np.ndarray],
         extras: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim and not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            entries.append({"name": name, "shape": list(arr.shape),
                            "offset": offset})
            fh.write(arr.tobytes())
            offset += arr.nbytes
    manifest = {"tensors": entries, "extras": extras or {}}
    with open(path / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path / MANIFEST) as fh:
        manifest = json.load(fh)
    raw = (path / BLOB).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count,
                            offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return tensors, manifest["extras"]


def exists(path) -> bool:
    path = Path(path)
    return (path / MANIFEST).is_file() and (path / BLOB).is_file()
