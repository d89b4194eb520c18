"""Binary named-tensor archive.

Layout (little-endian):
    b"GMNC" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | u8 dtype tag | raw data
    u32 CRC32 of every preceding byte
Only dtype tag 0 (float32) is defined.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GMNC"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def _to_array(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    arr = np.asarray(v, dtype="<f4")
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def dumps(entries: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = _to_array(value)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        (tag,) = struct.unpack_from("<B", body, off)
        off += 1
        if tag != DTYPE_F32:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        out[name] = np.frombuffer(body[off : off + size], dtype="<f4").reshape(dims).copy()
        off += size
    if off != len(body):
        raise CheckpointError("trailing bytes after the last entry")
    return out


def save(path, entries: dict) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    blob = dumps(entries)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def module_entries(module: torch.nn.Module, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((prefix + k, _to_array(v)) for k, v in module.state_dict().items())


def load_module(module: torch.nn.Module, entries: dict, prefix: str = "") -> None:
    """Copy entries with ``prefix`` into ``module``; shapes and names must match exactly."""
    state = module.state_dict()
    mine = {k[len(prefix) :]: v for k, v in entries.items() if k.startswith(prefix)}
    missing = set(state) - set(mine)
    extra = set(mine) - set(state)
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    new = {}
    for k, ref in state.items():
        arr = mine[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {arr.shape}, model {tuple(ref.shape)}")
        new[k] = torch.as_tensor(arr).to(ref.dtype)
    module.load_state_dict(new)
