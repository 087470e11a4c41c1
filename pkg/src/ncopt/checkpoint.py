"""Checkpoint container: JSON manifest line followed by raw little-endian payloads."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = "ncopt-ckpt-1"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``tensors`` (name -> array) plus free-form ``meta`` to ``path``.

    The manifest is a single line of UTF-8 JSON; byte offsets are relative to
    the first payload byte following the newline.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    header = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    cut = blob.find(b"\n")
    if cut < 0:
        raise CheckpointError(f"{path}: missing manifest")
    try:
        manifest = json.loads(blob[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {manifest.get('format')!r}")
    body = memoryview(blob)[cut + 1:]
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, manifest["meta"]
