"""Whitespace/punctuation tokenizer with a fixed special-token header.

The tokenizer lowercases, splits words and punctuation, and maps anything
unknown to [UNK]. Bracketed special markers such as ``[MASK]`` survive as
single tokens regardless of case.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ContractViolation

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_MARKER_RE = re.compile(r"\[(PAD|UNK|CLS|SEP|MASK)\]", re.IGNORECASE)


def split_text(text: str) -> list[str]:
    """Lowercased lexical split; special markers stay whole and canonical."""
    tokens: list[str] = []
    pos = 0
    for m in _MARKER_RE.finditer(text):
        tokens.extend(_WORD_RE.findall(text[pos:m.start()].lower()))
        tokens.append(f"[{m.group(1).upper()}]")
        pos = m.end()
    tokens.extend(_WORD_RE.findall(text[pos:].lower()))
    return tokens


class Vocabulary:
    """Immutable word -> id table with the special tokens at ids 0..4."""

    def __init__(self, words: Iterable[str]):
        itos = list(SPECIAL_TOKENS)
        seen = set(itos)
        for w in words:
            if w in seen:
                continue
            seen.add(w)
            itos.append(w)
        self.itos: tuple[str, ...] = tuple(itos)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_corpus(cls, texts: Iterable[str], max_size: int | None = None,
                    min_freq: int = 1) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(t for t in split_text(text) if t not in SPECIAL_TOKENS)
        words = [w for w, c in counts.items() if c >= min_freq]
        words.sort(key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max_size - len(SPECIAL_TOKENS)]
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id_of(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def word_of(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))


@dataclass
class TokenSequence:
    """Token ids with aligned segment ids and attention mask."""

    ids: list[int]
    token_type_ids: list[int] = field(default_factory=list)
    attention_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.token_type_ids:
            self.token_type_ids = [0] * len(self.ids)
        if not self.attention_mask:
            self.attention_mask = [True] * len(self.ids)
        if not (len(self.ids) == len(self.token_type_ids) == len(self.attention_mask)):
            raise ContractViolation(
                f"TokenSequence fields disagree: {len(self.ids)} ids, "
                f"{len(self.token_type_ids)} type ids, {len(self.attention_mask)} mask bits")

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "TokenSequence":
        return TokenSequence(list(self.ids), list(self.token_type_ids),
                             list(self.attention_mask))


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Map text to ids. Unknown words become [UNK]; no wrapper tokens added."""
    ids = [vocab.id_of(t) for t in split_text(text)]
    return TokenSequence(ids)


def build_model_input(vocab: Vocabulary, text_a: str, text_b: str | None = None,
                      max_len: int | None = None) -> TokenSequence:
    """[CLS] a [SEP] (b [SEP]) with segment ids, truncated to ``max_len``."""
    ids = [vocab.cls_id] + tokenize(text_a, vocab).ids + [vocab.sep_id]
    types = [0] * len(ids)
    if text_b is not None:
        b_ids = tokenize(text_b, vocab).ids + [vocab.sep_id]
        ids += b_ids
        types += [1] * len(b_ids)
    if max_len is not None and len(ids) > max_len:
        ids = ids[: max_len - 1] + [vocab.sep_id]
        types = types[:max_len]
    return TokenSequence(ids, types)
