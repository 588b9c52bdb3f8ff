"""Text-side feature source: fixed-size chunking plus pluggable embedders.

An EmbeddingProvider stands in for an external text encoder with a hard
input limit: token ids are sliced into chunks of at most ``CHUNK_LIMIT``,
each chunk is embedded to one pooled row, and the rows are zero-padded to a
fixed length L. Padded rows are masked inside the adapter's cross-attention.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .adapter import FeatureMatrix, T_EXPERT
from .errors import ContractViolation
from .vocab import split_text

log = logging.getLogger(__name__)

CHUNK_LIMIT = 77

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; bit-exact on every platform."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class EmbeddingProvider:
    """Interface for external text embedders of fixed width ``dim``."""

    dim: int

    def tokenize_text(self, text: str) -> list[int]:
        raise NotImplementedError

    def embed_chunk(self, ids: list[int]) -> np.ndarray:
        """One pooled feature row (width dim) for a chunk of token ids."""
        raise NotImplementedError

    def embed_query(self, text: str) -> np.ndarray:
        """One pooled vector (width dim) for a whole query string."""
        raise NotImplementedError


class HashStubProvider(EmbeddingProvider):
    """Deterministic pseudo-embeddings keyed by FNV-1a hashes.

    Every output is a unit vector drawn from a PCG64 stream seeded by the
    hash of the input bytes, so results are bit-exact across platforms and
    processes.
    """

    def __init__(self, dim: int, salt: int = 0):
        if dim < 1:
            raise ContractViolation(f"provider dim must be >= 1, got {dim}")
        self.dim = dim
        self.salt = salt & 0xFFFFFFFFFFFFFFFF

    def _unit(self, key: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(key ^ self.salt))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def tokenize_text(self, text: str) -> list[int]:
        return [fnv1a64(tok.encode("utf-8")) % 0x10000 for tok in split_text(text)]

    def embed_chunk(self, ids: list[int]) -> np.ndarray:
        blob = b"".join(struct.pack("<Q", i & 0xFFFFFFFFFFFFFFFF) for i in ids)
        return self._unit(fnv1a64(blob))

    def embed_query(self, text: str) -> np.ndarray:
        return self._unit(fnv1a64(text.encode("utf-8")))


class BankBackedProvider(EmbeddingProvider):
    """Serves embeddings exported to a feature bank, keyed by exact id/text."""

    def __init__(self, bank):
        self.bank = bank
        self.dim = bank.dim
        self._index = {entry_id: i for i, entry_id in enumerate(bank.ids)}
        self._fallback = HashStubProvider(bank.dim, salt=0)

    def tokenize_text(self, text: str) -> list[int]:
        return self._fallback.tokenize_text(text)

    def embed_chunk(self, ids: list[int]) -> np.ndarray:
        return self._fallback.embed_chunk(ids)

    def embed_query(self, text: str) -> np.ndarray:
        i = self._index.get(text)
        if i is None:
            return self._fallback.embed_query(text)
        return np.array(self.bank.normalized[i])


def chunk_tokens(ids: list[int], limit: int = CHUNK_LIMIT) -> list[list[int]]:
    """Greedy fixed-size slices; all chunks full except possibly the last."""
    if limit < 1:
        raise ContractViolation(f"chunk limit must be >= 1, got {limit}")
    return [list(ids[i:i + limit]) for i in range(0, len(ids), limit)]


@dataclass
class ChunkedFeatures:
    """Chunked token ids plus the padded feature matrix they map to."""

    chunks: list[list[int]]
    features: np.ndarray  # [L x dim], zero rows beyond valid_len
    valid_len: int
    truncated: bool = False

    def to_feature_matrix(self) -> FeatureMatrix:
        return FeatureMatrix(rows=np.array(self.features), valid_len=self.valid_len,
                             source=T_EXPERT)


def assemble_text_features(text: str, provider: EmbeddingProvider, length: int,
                           limit: int = CHUNK_LIMIT) -> ChunkedFeatures:
    """Embed each chunk of ``text`` and stack the rows, zero-padded to ``length``."""
    if length < 1:
        raise ContractViolation(f"feature length must be >= 1, got {length}")
    ids = provider.tokenize_text(text)
    if not ids:
        raise ContractViolation("text produced no tokens; the adapter needs features")
    chunks = chunk_tokens(ids, limit)
    truncated = len(chunks) > length
    if truncated:
        log.warning("text yields %d chunks; keeping the first %d", len(chunks), length)
    used = chunks[:length]
    features = np.zeros((length, provider.dim))
    for row, chunk in enumerate(used):
        features[row] = provider.embed_chunk(chunk)
    return ChunkedFeatures(chunks=chunks, features=features,
                           valid_len=len(used), truncated=truncated)
