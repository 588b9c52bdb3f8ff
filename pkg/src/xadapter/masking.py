"""MLM masking: per-sequence position selection and the 80/10/10 action split."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .vocab import TokenSequence, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskingPolicy:
    """Mask ratio plus the action split for selected positions.

    Selected tokens become [MASK] with ``mask_prob``, a random non-special
    vocabulary id with ``random_prob``, and stay unchanged otherwise.
    """

    mask_ratio: float
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractViolation(f"mask_ratio must lie in (0,1), got {self.mask_ratio}")
        if abs(self.mask_prob + self.random_prob + self.keep_prob - 1.0) > 1e-12:
            raise ContractViolation("action probabilities must sum to 1")


@dataclass
class MaskedSample:
    """One masked sequence with the selected positions and original ids."""

    seq: TokenSequence
    positions: list[int]
    targets: list[int]


def mask_count(ratio: float, maskable: int) -> int:
    """Half-up rounding of ratio * maskable, at least 1."""
    return max(1, int(np.floor(ratio * maskable + 0.5)))


def maskable_positions(seq: TokenSequence, vocab: Vocabulary) -> list[int]:
    """Positions eligible for masking: real tokens only, never specials."""
    special = vocab.special_ids
    return [i for i, (tok, att) in enumerate(zip(seq.ids, seq.attention_mask))
            if att and tok not in special]


def mask_batch(seqs: list[TokenSequence], policy: MaskingPolicy,
               rng: np.random.Generator, vocab: Vocabulary) -> list[MaskedSample]:
    """Mask each sequence independently; sequences without maskable tokens are skipped."""
    n_specials = len(vocab.special_ids)
    out: list[MaskedSample] = []
    for seq in seqs:
        eligible = maskable_positions(seq, vocab)
        if not eligible:
            log.warning("sequence of length %d has no maskable tokens; skipped", len(seq))
            continue
        n_pick = mask_count(policy.mask_ratio, len(eligible))
        picked = sorted(rng.choice(len(eligible), size=n_pick, replace=False).tolist())
        positions = [eligible[i] for i in picked]
        masked = seq.copy()
        targets = []
        for pos in positions:
            targets.append(masked.ids[pos])
            action = rng.random()
            if action < policy.mask_prob:
                masked.ids[pos] = vocab.mask_id
            elif action < policy.mask_prob + policy.random_prob:
                masked.ids[pos] = int(rng.integers(n_specials, len(vocab)))
            # else: keep the original token
        out.append(MaskedSample(seq=masked, positions=positions, targets=targets))
    return out
