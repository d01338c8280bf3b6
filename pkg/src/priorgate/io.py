"""Shared on-disk conventions.

Arrays travel as flat little-endian float64 binaries next to a JSON sidecar
describing shape (and, for volumes, spacing). Parameter checkpoints pack all
tensors into one flat binary plus a JSON manifest of names/shapes/offsets.
All JSON is written with sorted keys so reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np


class DataError(RuntimeError):
    """On-disk data is missing or inconsistent with its manifest."""


def dump_json(obj: Any, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_json(path: str) -> Any:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_array(base_path: str, array: np.ndarray, meta: dict | None = None) -> None:
    """Write ``<base>.f64`` (flat little-endian float64) and ``<base>.json``."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(base_path + ".f64", "wb") as fh:
        fh.write(arr.tobytes())
    sidecar = {"shape": list(array.shape)}
    if meta:
        sidecar.update(meta)
    dump_json(sidecar, base_path + ".json")


def read_array(base_path: str) -> tuple[np.ndarray, dict]:
    sidecar = load_json(base_path + ".json")
    shape = tuple(sidecar["shape"])
    raw = np.fromfile(base_path + ".f64", dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise DataError(
            f"{base_path}.f64 holds {raw.size} values, sidecar shape {shape} needs {int(np.prod(shape))}"
        )
    return raw.reshape(shape).astype(np.float64), sidecar


def save_checkpoint(base_path: str, named_arrays: list[tuple[str, np.ndarray]], extra: dict | None = None) -> None:
    """Pack named parameter arrays into ``<base>.f64`` + manifest ``<base>.json``."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in named_arrays:
        shape = list(np.asarray(arr).shape)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": shape, "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    with open(base_path + ".f64", "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    sidecar = {"params": manifest, "total": offset}
    if extra:
        sidecar.update(extra)
    dump_json(sidecar, base_path + ".json")


def load_checkpoint(base_path: str) -> tuple[dict[str, np.ndarray], dict]:
    sidecar = load_json(base_path + ".json")
    raw = np.fromfile(base_path + ".f64", dtype="<f8")
    if raw.size != sidecar["total"]:
        raise DataError(f"checkpoint {base_path}: size {raw.size} != manifest total {sidecar['total']}")
    out = {}
    for entry in sidecar["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[entry["offset"] : entry["offset"] + n]
        out[entry["name"]] = chunk.reshape(shape).astype(np.float64)
    return out, sidecar


def write_jsonl(path: str, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_csv(path: str, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]
