"""Binary checkpoint container.

Layout (little endian)::

    b"ADPW" | u32 version | u32 tensor count
    per tensor: u32 name length | name (utf-8) | u8 dtype tag (1 = f32) |
                u32 rank | rank x u32 extents | f32 payload
    u64 checksum: first 8 bytes of blake2b over everything before it

Tensors are written in sorted name order, so save -> load -> save is byte-stable.
"""
from __future__ import annotations

import hashlib
import struct
from typing import Mapping

import numpy as np
import torch

from .numeric import DTYPE

MAGIC = b"ADPW"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def dumps(tensors: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", DTYPE_F32, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def loads(data: bytes) -> dict[str, torch.Tensor]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            tag, rank = struct.unpack_from("<BI", body, off)
            off += 5
            if tag != DTYPE_F32:
                raise CheckpointError(f"unknown dtype tag {tag} for {name}")
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = torch.from_numpy(arr.astype(np.float64))
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def model_tensors(model: torch.nn.Module, prefix: str = "param.") -> dict[str, torch.Tensor]:
    return {prefix + n: p.detach() for n, p in model.named_parameters()}


def load_model_tensors(model: torch.nn.Module, tensors: Mapping[str, torch.Tensor],
                       prefix: str = "param.", strict: bool = True) -> None:
    params = dict(model.named_parameters())
    with torch.no_grad():
        for n, p in params.items():
            key = prefix + n
            if key not in tensors:
                if strict:
                    raise CheckpointError(f"checkpoint lacks {key}")
                continue
            src = tensors[key]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"{key}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src.to(DTYPE))
