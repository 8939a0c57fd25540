"""Binary checkpoints: named little-endian tensors behind a CRC32 trailer.

Layout::

    magic "SGMT" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32 * rank | payload
    crc32 u32 over everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SGMT"
VERSION = 1
CONFIG_KEY = "__config__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = _CODES.get(np.dtype(dt).str)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise CheckpointError("file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + n].decode()
        pos += n
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(model, path: str | Path, extra: dict | None = None) -> Path:
    meta = {"config": model.cfg.to_dict(), "encoder_checksum": model.encoder.checksum()}
    if extra:
        meta.update(extra)
    tensors = {CONFIG_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename so a crash never leaves half a checkpoint behind
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    tmp.replace(path)
    return path


def read_meta(path: str | Path) -> dict:
    tensors = decode_tensors(Path(path).read_bytes())
    return json.loads(tensors[CONFIG_KEY].tobytes().decode())


def load_checkpoint(path: str | Path):
    """Rebuild the model from a checkpoint; the whole file is validated first."""
    from .config import TrainConfig
    from .model import SegMoTE

    tensors = decode_tensors(Path(path).read_bytes())
    if CONFIG_KEY not in tensors:
        raise CheckpointError("missing config record")
    meta = json.loads(tensors[CONFIG_KEY].tobytes().decode())
    cfg = TrainConfig(**meta["config"])
    model = SegMoTE(cfg)
    names = dict(model.named_parameters())
    missing = sorted(set(names) - set(tensors))
    if missing:
        raise CheckpointError(f"missing tensors: {missing[:5]}")
    unexpected = sorted(set(tensors) - set(names) - {CONFIG_KEY})
    if unexpected:
        raise CheckpointError(f"unexpected tensors: {unexpected[:5]}")
    staged = {}
    for name, p in names.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
        staged[name] = arr.astype(p.dtype)
    for name, p in names.items():
        p.data = staged[name]
    if model.encoder.checksum() != meta.get("encoder_checksum"):
        raise CheckpointError("encoder checksum differs from the one recorded at save time")
    model.meta = meta
    return model
