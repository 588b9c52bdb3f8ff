"""Binary checkpoint container for model and adapter parameters.

Same envelope style as the feature-bank format (magic, version, payload,
trailing CRC32), with a section kind so readers can reject the wrong file
type:

    magic  b"XAMD"
    u32    version = 1            (little-endian throughout)
    u16    kind length, kind bytes (e.g. b"MODEL")
    u32    config JSON length, config JSON (UTF-8)
    u64    tensor count
    per tensor:
        u16  name length, name bytes
        u8   ndim, then ndim x u32 dims
        f64  data, row-major little-endian
    u32    CRC32 of all preceding bytes
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import BankFormatError

MAGIC = b"XAMD"
VERSION = 1
KIND_MODEL = "MODEL"


def save_checkpoint(path: str, config: dict, tensors: dict[str, np.ndarray],
                    kind: str = KIND_MODEL) -> None:
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", VERSION)
    kind_raw = kind.encode("utf-8")
    payload += struct.pack("<H", len(kind_raw)) + kind_raw
    cfg_raw = json.dumps(config, sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(cfg_raw)) + cfg_raw
    names = sorted(tensors)
    payload += struct.pack("<Q", len(names))
    for name in names:
        raw = name.encode("utf-8")
        payload += struct.pack("<H", len(raw)) + raw
        # asarray keeps 0-d shapes; tobytes() emits C order either way
        arr = np.asarray(tensors[name], dtype="<f8")
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        payload += arr.tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(payload))


def load_checkpoint(path: str, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 18 or blob[:4] != MAGIC:
        raise BankFormatError(f"{path}: not a checkpoint file")
    stored = struct.unpack("<I", blob[-4:])[0]
    if stored != zlib.crc32(blob[:-4]) & 0xFFFFFFFF:
        raise BankFormatError(f"{path}: CRC mismatch")
    offset = 4
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != VERSION:
        raise BankFormatError(f"{path}: unsupported version {version}")
    (kind_len,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    kind = blob[offset:offset + kind_len].decode("utf-8")
    offset += kind_len
    if expect_kind is not None and kind != expect_kind:
        raise BankFormatError(f"{path}: section kind {kind!r}, expected {expect_kind!r}")
    (cfg_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    config = json.loads(blob[offset:offset + cfg_len].decode("utf-8"))
    offset += cfg_len
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size,
                                      offset=offset).reshape(shape).copy()
        offset += 8 * size
    return config, tensors
