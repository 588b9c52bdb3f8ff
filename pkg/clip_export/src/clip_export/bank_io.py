"""XABK feature-bank container: writer and validating reader.

Layout (integers little-endian):

    magic  b"XABK"
    u32    version = 1
    u32    dim
    u64    count
    per record: u16 id byte length, UTF-8 id bytes, dim x f32 raw values
    u32    CRC32 of all preceding bytes
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"XABK"
VERSION = 1


class BankFormatError(ValueError):
    """Validation failure; carries the byte offset where it was detected."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def write_bank(path: str, ids: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError(f"need one vector per id: {len(ids)} ids, {vectors.shape}")
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<IIQ", VERSION, vectors.shape[1], vectors.shape[0])
    for entry_id, vec in zip(ids, vectors):
        raw = entry_id.encode("utf-8")
        payload += struct.pack("<H", len(raw))
        payload += raw
        payload += vec.tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(payload))


@dataclass
class BankReport:
    """Outcome of a full validation pass."""

    path: str
    dim: int = 0
    count: int = 0
    crc_ok: bool = False
    min_norm: float = 0.0
    max_norm: float = 0.0
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def as_dict(self) -> dict:
        return {"path": self.path, "dim": self.dim, "count": self.count,
                "crc_ok": self.crc_ok, "min_norm": self.min_norm,
                "max_norm": self.max_norm, "ok": self.ok,
                "problems": self.problems}


def read_bank(path: str) -> tuple[list[str], np.ndarray]:
    """Strict read; raises BankFormatError with a byte offset on corruption."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24:
        raise BankFormatError(f"{path}: too short ({len(blob)} bytes)", offset=len(blob))
    if blob[:4] != MAGIC:
        raise BankFormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    stored = struct.unpack("<I", blob[-4:])[0]
    computed = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != computed:
        raise BankFormatError(
            f"{path}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})",
            offset=len(blob) - 4)
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != VERSION:
        raise BankFormatError(f"{path}: unsupported version {version}", offset=4)
    offset = 20
    ids: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float32)
    limit = len(blob) - 4
    for rec in range(count):
        if offset + 2 > limit:
            raise BankFormatError(f"{path}: truncated record {rec}", offset=offset)
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + id_len + 4 * dim > limit:
            raise BankFormatError(
                f"{path}: record {rec} does not fit the declared dim/count",
                offset=offset)
        ids.append(blob[offset:offset + id_len].decode("utf-8"))
        offset += id_len
        vectors[rec] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
    if offset != limit:
        raise BankFormatError(
            f"{path}: {limit - offset} stray bytes after the last record",
            offset=offset)
    return ids, vectors
