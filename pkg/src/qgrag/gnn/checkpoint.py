"""Binary checkpoint format.

Layout (little-endian)::

    b"GQGN" | u32 version=1 | u32 len + JSON(ModelConfig)
    | u32 tensor count
    | per tensor: u16 len + name, u8 rank, u32 dims..., f32 data
    | u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..errors import BadMagic, ChecksumMismatch, QgragError, VersionUnsupported
from .model import ModelConfig, ModelParams

MAGIC = b"GQGN"
VERSION = 1


def checkpoint_bytes(params: ModelParams, cfg: ModelConfig) -> bytes:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, cfg))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumMismatch("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not a checkpoint file")
    if len(buf) < 12:
        raise ChecksumMismatch("checkpoint is truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("CRC32 does not match")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version}")
    (blob_len,) = r.unpack("<I")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(blob_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise ChecksumMismatch(f"corrupt config blob: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = Tensor(data.astype(np.float32), name=name)
    if r.pos != len(body):
        raise ChecksumMismatch("trailing bytes after tensors")
    return ModelParams(tensors), cfg


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(str(exc)) from None
    return parse_checkpoint(buf)


class CheckpointIOError(QgragError, OSError):
    pass
