"""Named-array checkpoints: a JSON manifest plus a flat float32 blob.

The manifest lists every array with its shape and byte offset into the
blob; the blob is little-endian 32-bit floats in manifest order.  Round
trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

from .errors import DataError

MANIFEST_SUFFIX = ".manifest.json"
BLOB_SUFFIX = ".bin"


def save_arrays(prefix: str, arrays: Mapping[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``<prefix>.manifest.json`` and ``<prefix>.bin``.

    ``extra`` is embedded verbatim in the manifest (config hash, step
    counters and similar metadata).
    """
    entries = []
    offset = 0
    chunks = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype != np.float32:
            raise DataError(f"checkpoint array {name!r} must be float32, got {arr.dtype}")
        raw = arr.astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {"format": "miret-checkpoint-v1", "total_bytes": offset, "arrays": entries}
    if extra:
        manifest["extra"] = extra
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    with open(prefix + BLOB_SUFFIX, "wb") as f:
        for raw in chunks:
            f.write(raw)
    with open(prefix + MANIFEST_SUFFIX, "w") as f:
        json.dump(manifest, f, indent=1)


def load_arrays(prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (arrays, extra-metadata)."""
    try:
        with open(prefix + MANIFEST_SUFFIX) as f:
            manifest = json.load(f)
        with open(prefix + BLOB_SUFFIX, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {prefix!r}: {e}") from e
    if manifest.get("format") != "miret-checkpoint-v1":
        raise DataError(f"unrecognized checkpoint format in {prefix + MANIFEST_SUFFIX}")
    if len(blob) != manifest["total_bytes"]:
        raise DataError(
            f"checkpoint blob {prefix + BLOB_SUFFIX} has {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float32, copy=True)
    return arrays, manifest.get("extra", {})
