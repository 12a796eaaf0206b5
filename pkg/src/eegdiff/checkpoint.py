"""Checkpoint files: named tensors with trainability flags plus a JSON meta block.

Layout (little-endian)::

    "DDCK" | u16 version | u32 meta_len | meta JSON (UTF-8) | u32 crc32(meta)
    u32 tensor_count
    per tensor: u32 name_len | name | u8 dtype | u8 trainable | u32 rank
                | u32 extents[rank] | payload | u32 crc32(record)

The per-record CRC covers every byte of the record before it, so any single
corrupted byte is reported against the tensor it falls in.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics.nn import Module

MAGIC = b"DDCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class TensorRecord:
    array: np.ndarray
    trainable: bool


@dataclass
class Checkpoint:
    stage: str
    meta: dict = field(default_factory=dict)
    tensors: dict[str, TensorRecord] = field(default_factory=dict)

    @classmethod
    def from_modules(cls, stage: str, modules: dict[str, Module], meta: dict | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> "Checkpoint":
        ckpt = cls(stage, dict(meta or {}))
        ckpt.meta["stage"] = stage
        for prefix, module in modules.items():
            for name, p in module.named_parameters(prefix + "."):
                ckpt.tensors[name] = TensorRecord(p.data.copy(), bool(p.trainable))
        for name, arr in (extra or {}).items():
            ckpt.tensors[name] = TensorRecord(np.asarray(arr).copy(), False)
        return ckpt

    def group(self, prefix: str) -> dict[str, TensorRecord]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has_group(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def load_into(self, module: Module, prefix: str, keep_flags: bool = True) -> None:
        """Copy the ``prefix`` group into ``module`` (shapes validated), restoring flags."""
        records = self.group(prefix)
        if not records:
            raise CheckpointError(f"checkpoint ({self.stage}) has no '{prefix}' parameters")
        module.load_arrays({k: v.array for k, v in records.items()})
        if keep_flags:
            own = module.state_dict()
            for k, rec in records.items():
                own[k].set_trainable(rec.trainable)

    def merged(self, other: "Checkpoint") -> "Checkpoint":
        out = Checkpoint(self.stage, dict(self.meta), dict(self.tensors))
        out.tensors.update(other.tensors)
        return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({**ckpt.meta, "stage": ckpt.stage}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta,
             struct.pack("<I", zlib.crc32(meta)), struct.pack("<I", len(ckpt.tensors))]
    for name, rec in ckpt.tensors.items():
        arr = np.asarray(rec.array)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        body = b"".join([
            struct.pack("<I", len(raw_name)), raw_name,
            struct.pack("<BBI", _CODES[dt], int(rec.trainable), arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            np.ascontiguousarray(arr, dtype=dt).tobytes(),
        ])
        parts += [body, struct.pack("<I", zlib.crc32(body))]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _need(buf: bytes, pos: int, n: int, what: str) -> None:
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint: {what} needs bytes [{pos}, {pos + n}), file has {len(buf)}")


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic {buf[:4]!r})")
    _need(buf, 4, 6, "header")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    _need(buf, pos, meta_len + 8, "meta block")
    meta_raw = buf[pos:pos + meta_len]
    (crc,) = struct.unpack_from("<I", buf, pos + meta_len)
    if zlib.crc32(meta_raw) != crc:
        raise CheckpointError("meta block checksum mismatch")
    meta = json.loads(meta_raw.decode("utf-8"))
    pos += meta_len + 4
    _need(buf, pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: dict[str, TensorRecord] = {}
    for i in range(count):
        start = pos
        label = f"tensor record {i}"
        _need(buf, pos, 4, label)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        _need(buf, pos, name_len + 6, label)
        name = buf[pos:pos + name_len].decode("utf-8", errors="replace")
        label = f"tensor '{name}' (record {i})"
        pos += name_len
        code, trainable, rank = struct.unpack_from("<BBI", buf, pos)
        pos += 6
        _need(buf, pos, 4 * rank, label)
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        if code not in _DTYPES:
            raise CheckpointError(f"{label}: unknown dtype code {code}")
        nbytes = math.prod(shape) * _DTYPES[code].itemsize
        _need(buf, pos, nbytes + 4, label)
        payload = buf[pos:pos + nbytes]
        pos += nbytes
        (crc,) = struct.unpack_from("<I", buf, pos)
        if zlib.crc32(buf[start:pos]) != crc:
            raise CheckpointError(f"{label}: checksum mismatch (corrupted data)")
        pos += 4
        if trainable not in (0, 1):
            raise CheckpointError(f"{label}: invalid trainable flag {trainable}")
        arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
        tensors[name] = TensorRecord(arr.astype(arr.dtype.newbyteorder("=")), bool(trainable))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    stage = meta.get("stage", "")
    return Checkpoint(stage, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
