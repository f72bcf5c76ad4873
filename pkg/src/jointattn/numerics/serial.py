"""Parameter blobs: flat little-endian float64 arrays plus a JSON manifest.

The manifest lists (name, shape, offset) per entry, offsets in bytes into the
blob. Entries are written sorted by name so identical parameter dicts always
produce byte-identical files.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .tensor import Tensor

_DTYPE = "<f8"


def save_params(blob_path: str, manifest_path: str, params: dict) -> None:
    """Write a named dict of tensors/arrays to blob + manifest files."""
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        p = params[name]
        arr = np.ascontiguousarray(
            p.data if isinstance(p, Tensor) else p, dtype=_DTYPE
        )
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = {"dtype": _DTYPE, "total_bytes": offset, "entries": entries}
    os.makedirs(os.path.dirname(os.path.abspath(blob_path)), exist_ok=True)
    with open(blob_path, "wb") as f:
        f.write(b"".join(chunks))
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_params(blob_path: str, manifest_path: str) -> dict:
    """Read a blob + manifest pair back into {name: float64 ndarray}."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("dtype") != _DTYPE:
        raise ValueError(f"unsupported blob dtype {manifest.get('dtype')!r}")
    with open(blob_path, "rb") as f:
        raw = f.read()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(
            f"blob length {len(raw)} does not match manifest "
            f"total_bytes {manifest['total_bytes']}"
        )
    out = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            raw, dtype=_DTYPE, count=count, offset=entry["offset"]
        ).reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
    return out
