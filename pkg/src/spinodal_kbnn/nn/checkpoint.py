"""Checkpoints: a JSON manifest plus one little-endian float64 blob per parameter."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .network import Network

FORMAT = "spinodal-kbnn-network/1"


def save_network(network: Network, directory, name: str | None = None, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or network.name
    blobs = {}
    for key in sorted(network.params):
        arr = np.ascontiguousarray(network.params[key].data, dtype="<f8")
        fname = f"{name}.{key}.bin"
        (directory / fname).write_bytes(arr.tobytes())
        blobs[key] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8"}
    manifest = {"format": FORMAT, "network": network.spec(), "parameters": blobs, **(extra or {})}
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_network(path) -> Network:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a network checkpoint")
    weights = {}
    for key, meta in manifest["parameters"].items():
        raw = (path.parent / meta["file"]).read_bytes()
        weights[key] = np.frombuffer(raw, dtype="<f8").reshape(meta["shape"]).copy()
    return Network.from_spec(manifest["network"], weights)


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
