"""Self-describing binary checkpoints.

Layout: 4-byte magic ``CSG1``, a uint32 format version, then
length-prefixed sections. Each section is [u32 name length][name utf-8]
[u64 payload length][payload]. Two sections are required:

  meta     JSON (sorted keys): model structure, concept matrix, class
           registry, per-site adapter metadata, estimator stats, frozen set.
  tensors  packed float64 arrays: u32 count, then per tensor
           [u32 name len][name][u32 ndim][u64 dims...][raw little-endian data].

The model is rebuilt from meta (structure wins over any config default),
then every tensor is restored bitwise by name. Anything truncated,
missing or left over raises a corruption error; a wrong version raises a
version error before any state is touched.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointCorruptError, CheckpointVersionError

MAGIC = b"CSG1"
VERSION = 1


def _pack_tensors(named: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(
                f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def _unpack_tensors(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload)
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(size * 8), dtype="<f8").reshape(shape)
        out[name] = arr.copy()
    if not r.exhausted:
        raise CheckpointCorruptError("trailing bytes inside tensor section")
    return out


def write_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
        ("tensors", _pack_tensors(tensors)),
    ]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, payload in sections:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointCorruptError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} unsupported (expected {VERSION})")
    sections: dict[str, bytes] = {}
    while not r.exhausted:
        name = r.take(r.u32()).decode("utf-8")
        sections[name] = r.take(r.u64())
    for required in ("meta", "tensors"):
        if required not in sections:
            raise CheckpointCorruptError(f"missing section {required!r}")
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointCorruptError(f"meta section is not valid JSON: {e}") from e
    return meta, _unpack_tensors(sections["tensors"])
