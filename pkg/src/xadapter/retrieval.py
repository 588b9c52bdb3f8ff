"""Feature bank with exact cosine top-K search and even per-sentence retrieval.

The bank keeps raw float32 vectors (the on-disk representation) plus a
float64 unit-normalized copy used for queries. Files use the XABK container:

    magic  b"XABK"
    u32    version = 1          (little-endian, as are all integers)
    u32    dim
    u64    count
    per record:
        u16   id byte length
        ...   id bytes (UTF-8)
        dim x f32 raw vector
    u32    CRC32 of all preceding bytes
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .adapter import FeatureMatrix, V_EXPERT
from .errors import BankFormatError, ContractViolation

XABK_MAGIC = b"XABK"
XABK_VERSION = 1


class FeatureBank:
    """Immutable id-tagged embedding matrix."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ContractViolation(
                f"bank needs one vector per id: {len(ids)} ids, {vectors.shape} vectors")
        self.ids: tuple[str, ...] = tuple(ids)
        self.vectors = vectors
        self.vectors.setflags(write=False)
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.any(norms == 0.0):
            bad = ids[int(np.argmin(norms))]
            raise ContractViolation(f"zero vector for id {bad!r}")
        self.normalized = vectors.astype(np.float64) / norms[:, None]
        self.normalized.setflags(write=False)

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def bank_build(entries: list[tuple[str, np.ndarray]], dim: int) -> FeatureBank:
    """Validate entries (unique ids, finite nonzero vectors of width dim)."""
    ids: list[str] = []
    seen: set[str] = set()
    rows = []
    for entry_id, vec in entries:
        if entry_id in seen:
            raise ContractViolation(f"duplicate bank id {entry_id!r}")
        seen.add(entry_id)
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (dim,):
            raise ContractViolation(f"vector for id {entry_id!r} has shape {vec.shape}, want ({dim},)")
        if not np.all(np.isfinite(vec)):
            raise ContractViolation(f"non-finite vector for id {entry_id!r}")
        if float(np.linalg.norm(vec.astype(np.float64))) == 0.0:
            raise ContractViolation(f"zero vector for id {entry_id!r}")
        ids.append(entry_id)
        rows.append(vec)
    if not rows:
        raise ContractViolation("bank_build requires at least one entry")
    return FeatureBank(ids, np.stack(rows))


def cosine_topk(bank: FeatureBank, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by cosine similarity; ties broken by lower bank index."""
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if k > bank.count:
        raise ContractViolation(f"k={k} exceeds bank size {bank.count}")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise ContractViolation(f"query shape {q.shape} does not match bank dim {bank.dim}")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ContractViolation("query vector must be nonzero")
    scores = np.clip(bank.normalized @ (q / norm), -1.0, 1.0)
    # Stable sort on the negated scores keeps lower indices first among ties.
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def split_sentences(text: str) -> list[str]:
    """Split on '.', '!', '?' runs followed by whitespace or end of text.

    Nonempty text without terminal punctuation comes back as one sentence.
    """
    text = text.strip()
    if not text:
        return []
    out: list[str] = []
    start = 0
    i, n = 0, len(text)
    while i < n:
        if text[i] in ".!?":
            j = i + 1
            while j < n and text[j] in ".!?":
                j += 1
            if j >= n or text[j].isspace():
                frag = text[start:j].strip()
                if frag:
                    out.append(frag)
                start = j
            i = j
        else:
            i += 1
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out if out else [text]


@dataclass
class RetrievalResult:
    """Chosen (bank index, score) pairs plus the per-sentence allocation."""

    chosen: list[tuple[int, float]]
    allocation: list[tuple[int, int]]  # (sentence index, n_i)

    @property
    def k(self) -> int:
        return len(self.chosen)


def retrieve_images(bank: FeatureBank, text: str, k: int, text_encoder,
                    rng: np.random.Generator) -> RetrievalResult:
    """Evenly allocate a budget of k retrievals across the text's sentences.

    Each sentence gets floor(k/l) retrievals; a random subset of k mod l
    sentences gets one extra. Duplicate bank rows may appear when sentences
    retrieve the same neighbors.
    """
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if bank.count < k:
        raise ContractViolation(f"bank holds {bank.count} rows, fewer than k={k}")
    sentences = split_sentences(text)
    if not sentences:
        raise ContractViolation("retrieve_images requires nonempty text")
    l = len(sentences)
    extra = rng.choice(l, size=k % l, replace=False) if k % l else np.empty(0, dtype=int)
    extra_set = set(int(i) for i in extra)
    base = k // l
    chosen: list[tuple[int, float]] = []
    allocation: list[tuple[int, int]] = []
    for i, sentence in enumerate(sentences):
        n_i = base + 1 if i in extra_set else base
        allocation.append((i, n_i))
        if n_i == 0:
            continue
        query = text_encoder.embed_query(sentence)
        chosen.extend(cosine_topk(bank, query, n_i))
    return RetrievalResult(chosen=chosen, allocation=allocation)


def gather_features(bank: FeatureBank, result: RetrievalResult) -> FeatureMatrix:
    """Stack the retrieved rows (normalized) into a feature matrix."""
    rows = bank.normalized[[i for i, _ in result.chosen]]
    return FeatureMatrix(rows=np.array(rows), source=V_EXPERT)


def inject_noise(bank: FeatureBank, sigma: float, rng: np.random.Generator) -> FeatureBank:
    """Double the bank with unit-renormalized Gaussian-perturbed copies."""
    if sigma <= 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    noisy = bank.normalized + sigma * rng.standard_normal(bank.normalized.shape)
    noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
    ids = list(bank.ids) + [f"{i}#noisy" for i in bank.ids]
    vectors = np.concatenate([bank.vectors, noisy.astype(np.float32)], axis=0)
    return FeatureBank(ids, vectors)


# --------------------------------------------------------------------------
# XABK persistence

def save_bank(bank: FeatureBank, path: str) -> None:
    payload = bytearray()
    payload += XABK_MAGIC
    payload += struct.pack("<IIQ", XABK_VERSION, bank.dim, bank.count)
    for entry_id, vec in zip(bank.ids, bank.vectors):
        raw = entry_id.encode("utf-8")
        payload += struct.pack("<H", len(raw))
        payload += raw
        payload += vec.astype("<f4").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(payload))


def load_bank(path: str) -> FeatureBank:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24:
        raise BankFormatError(f"{path}: file too short to be a bank ({len(blob)} bytes)")
    if blob[:4] != XABK_MAGIC:
        raise BankFormatError(f"{path}: bad magic {blob[:4]!r}, expected {XABK_MAGIC!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise BankFormatError(
            f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != XABK_VERSION:
        raise BankFormatError(f"{path}: unsupported version {version}")
    offset = 20
    ids: list[str] = []
    rows = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for rec in range(count):
        if offset + 2 > len(blob) - 4:
            raise BankFormatError(f"{path}: truncated record {rec} at offset {offset}")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(blob) - 4:
            raise BankFormatError(f"{path}: truncated record {rec} at offset {offset}")
        ids.append(blob[offset:offset + id_len].decode("utf-8"))
        offset += id_len
        rows[rec] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(blob) - 4:
        raise BankFormatError(
            f"{path}: {len(blob) - 4 - offset} unexpected trailing bytes at offset {offset}")
    return FeatureBank(ids, rows)
