"""Binary checkpoint container: magic, version, JSON metadata, little-endian float32 blobs."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PLM1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _dumps(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        for name, arr in self.tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            index.append({"name": name, "shape": list(a.shape), "dtype": "float32"})
            blobs.append(a.tobytes())
        meta = dict(self.meta)
        meta["tensors"] = index
        body = _dumps(meta)
        return _HEADER.pack(MAGIC, VERSION, len(body)) + body + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, n = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _HEADER.size
        if len(data) < start + n:
            raise CheckpointError("truncated checkpoint metadata")
        meta = json.loads(data[start:start + n].decode("utf-8"))
        offset = start + n
        tensors = {}
        for entry in meta.pop("tensors", []):
            count = int(np.prod(entry["shape"], dtype=np.int64))
            size = 4 * count
            if offset + size > len(data):
                raise CheckpointError(f"blob for {entry['name']!r} is truncated")
            tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count,
                                                   offset=offset).reshape(entry["shape"]).astype(np.float32)
            offset += size
        if offset != len(data):
            raise CheckpointError(f"{len(data) - offset} trailing bytes after tensor blobs")
        return cls(tensors, meta)

    def save(self, path) -> str:
        """Write to ``path``; returns the sha256 of the file contents."""
        data = self.to_bytes()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
