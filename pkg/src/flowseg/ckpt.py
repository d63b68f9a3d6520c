"""Directory checkpoints: a JSON manifest plus one array file per entry.

The manifest carries arbitrary JSON metadata and an ``arrays`` index mapping
logical names (parameter names, optimizer slots) to files in the directory.
Reloading is bit-exact because the array files are raw little-endian dumps.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from flowseg.tensor import load_array, save_array

MANIFEST = "manifest.json"


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    os.makedirs(path, exist_ok=True)
    index = {}
    for i, (name, arr) in enumerate(arrays.items()):
        fname = f"a{i:04d}.bin"
        save_array(os.path.join(path, fname), np.asarray(arr))
        index[name] = fname
    manifest = dict(meta)
    manifest["arrays"] = index
    tmp = os.path.join(path, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(path, MANIFEST))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    index = manifest.pop("arrays")
    arrays = {name: load_array(os.path.join(path, fname)) for name, fname in index.items()}
    return manifest, arrays


def checkpoint_digest(path: str) -> str:
    """Stable content hash of a checkpoint directory."""
    h = hashlib.sha256()
    for fname in sorted(os.listdir(path)):
        fpath = os.path.join(path, fname)
        if not os.path.isfile(fpath):
            continue
        h.update(fname.encode())
        with open(fpath, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
