"""Parameter checkpoints: a flat little-endian float64 blob plus a JSON manifest.

``<stem>.bin`` holds the arrays back to back; ``<stem>.json`` lists each
array's name, shape and byte offset together with the format version and
free-form metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from focal3d import __version__
from focal3d.errors import StructuralError, VersionMismatchError

FORMAT_VERSION = 1


def _stem(path):
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".bin", ".json") else p


def save_checkpoint(path, state, meta=None):
    """Write ``state`` (name -> array) and return the manifest path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "toolkit_version": __version__,
        "dtype": "float64-le",
        "arrays": entries,
        "meta": meta or {},
    }
    out = stem.with_suffix(".json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path):
    return json.loads(_stem(path).with_suffix(".json").read_text())


def load_checkpoint(path):
    """Return (state, manifest); refuses manifests from another format version."""
    stem = _stem(path)
    manifest = read_manifest(stem)
    found = manifest.get("format_version")
    if found != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint {stem} has format version {found} (toolkit {manifest.get('toolkit_version')}); "
            f"this toolkit reads version {FORMAT_VERSION} (toolkit {__version__})"
        )
    blob = stem.with_suffix(".bin").read_bytes()
    state = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * n
        if end > len(blob):
            raise StructuralError(f"checkpoint {stem}: array {e['name']} runs past the end of the blob")
        state[e["name"]] = np.frombuffer(blob[e["offset"]:end], dtype="<f8").reshape(e["shape"]).copy()
    return state, manifest


def save_model(path, model, meta=None):
    return save_checkpoint(path, model.state(), meta)


def load_model(path, model):
    state, manifest = load_checkpoint(path)
    model.load_state(state)
    return manifest
