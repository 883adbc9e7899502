"""Single-file checkpoint container: JSON manifest plus a float32 blob.

Layout: 4-byte magic ``CKP1``, an 8-byte little-endian manifest length, the
manifest JSON (UTF-8, sorted keys, compact separators), then all tensors as
little-endian float32, row-major, concatenated in manifest order. The
canonical JSON encoding makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ClusterUpError

MAGIC = b"CKP1"
FORMAT_VERSION = 1


class CheckpointError(ClusterUpError):
    """Malformed or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]  # float64 views of the stored float32 data

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def seeds(self) -> dict:
        return self.manifest["seeds"]

    @property
    def extra(self) -> dict:
        return self.manifest["extra"]


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(
    path,
    tensors: dict[str, np.ndarray],
    *,
    config: dict,
    seeds: dict,
    extra: dict | None = None,
) -> None:
    """Write tensors (cast to float32) with their manifest to ``path``.

    Tensor order follows the dict's insertion order and is preserved in the
    manifest, so identical inputs always produce identical bytes.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": "float32",
            "offset": offset,
        })
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "config": config,
        "seeds": seeds,
        "extra": extra or {},
    }
    payload = _canonical_json(manifest)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; tensors come back as float64 for computation."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        blob = fh.read()
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format version {manifest.get('format_version')}"
        )
    expected = sum(
        int(np.prod(entry["shape"], dtype=np.int64)) * 4
        for entry in manifest["tensors"]
    )
    if len(blob) != expected:
        raise CheckpointError(
            f"blob length {len(blob)} != manifest total {expected}"
        )
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        raw = np.frombuffer(blob, dtype="<f4", count=size, offset=start)
        tensors[entry["name"]] = raw.reshape(entry["shape"]).astype(np.float64)
    return Checkpoint(manifest=manifest, tensors=tensors)
