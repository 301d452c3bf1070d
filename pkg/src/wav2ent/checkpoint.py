"""Binary checkpoint container.

Layout, all integers unsigned 32-bit little-endian unless noted::

    b"W2EC" | version | kind (u8) | meta length | meta (UTF-8 JSON)
    | tensor count | { name length | name | rank | dims... | float32 LE data }
    | CRC-32 of everything above

The JSON block carries what is needed to rebuild the model around the
tensors (configs, token vocabulary); it is written with sorted keys so the
file bytes are a pure function of the model.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"W2EC"
VERSION = 1
KINDS = {"acoustic": 0, "acoustic+ctc": 1, "ner": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IB", VERSION, KINDS[ckpt.kind]), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def loads(data: bytes) -> Checkpoint:
    if len(data) < 4 + 5 + 4 + 4 + 4 or data[:4] != MAGIC:
        raise CheckpointError("not a W2EC checkpoint (bad magic)")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    try:
        version, kind = struct.unpack_from("<IB", payload, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if kind not in KIND_NAMES:
            raise CheckpointError(f"unknown model kind tag {kind}")
        pos = 9
        (meta_len,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        meta = json.loads(payload[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(payload):
                raise CheckpointError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
        if pos != len(payload):
            raise CheckpointError("trailing bytes after the last tensor")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return Checkpoint(KIND_NAMES[kind], tensors, meta)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def crc_of(path) -> int:
    return struct.unpack("<I", Path(path).read_bytes()[-4:])[0]
