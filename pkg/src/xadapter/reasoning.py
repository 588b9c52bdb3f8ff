"""Prompt-based zero-shot classification at the [MASK] position.

Ships the built-in color prompt pack (9 templates, 11 candidate colors).
Predictions restrict the vocabulary logits at the mask position to the
candidate labels; multiple templates aggregate by arithmetic mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import FeatureMatrix, InsertionPlan
from .encoder import EncoderModel, encode, mlm_logits
from .errors import ContractViolation, TemplateError
from .vocab import TokenSequence, Vocabulary, build_model_input

ITEM_SLOT = "[ITEM]"
MASK_SLOT = "[MASK]"

COLOR_PROMPTS: tuple[str, ...] = (
    "Q: What is the color of [ITEM]? A: It is [MASK].",
    "Q: What is the colour of [ITEM]? A: It is [MASK].",
    "What is the color of [ITEM]? It is [MASK].",
    "What is the colour of [ITEM]? [MASK].",
    "The color of [ITEM] is [MASK].",
    "The usual color of [ITEM] is [MASK].",
    "[ITEM] usually has the color of [MASK].",
    "What is the usual color of [ITEM]? [MASK].",
    "What is the typical color of [ITEM]? [MASK].",
)

COLOR_LABELS: tuple[str, ...] = (
    "blue", "white", "red", "yellow", "black", "green",
    "purple", "brown", "pink", "grey", "orange",
)


@dataclass(frozen=True)
class PromptTemplate:
    """A template containing exactly one [ITEM] slot and one [MASK] slot."""

    text: str

    def __post_init__(self):
        for slot in (ITEM_SLOT, MASK_SLOT):
            if self.text.count(slot) != 1:
                raise TemplateError(
                    f"template needs exactly one {slot}, got {self.text.count(slot)}: "
                    f"{self.text!r}")


def builtin_color_pack() -> list[PromptTemplate]:
    return [PromptTemplate(t) for t in COLOR_PROMPTS]


def load_prompt_pack(path: str) -> list[PromptTemplate]:
    """One template per line; blank lines and '#' comments ignored."""
    templates = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                templates.append(PromptTemplate(line))
    if not templates:
        raise TemplateError(f"{path}: no templates found")
    return templates


def load_labels(path: str) -> list[str]:
    with open(path, encoding="utf-8") as f:
        labels = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not labels:
        raise ContractViolation(f"{path}: no labels found")
    return labels


class LabelSet:
    """Candidate labels, each mapped to exactly one vocabulary id."""

    def __init__(self, labels: list[str], vocab: Vocabulary):
        self.labels = tuple(labels)
        ids = []
        for label in labels:
            if label not in vocab:
                raise ContractViolation(f"label {label!r} is not in the vocabulary")
            ids.append(vocab.id_of(label))
        self.ids = tuple(ids)

    def __len__(self) -> int:
        return len(self.labels)


def render_prompt(template: PromptTemplate, item: str) -> tuple[str, int]:
    """Substitute the item; returns (text, mask token index after tokenization)."""
    if not item:
        raise ContractViolation("item must be nonempty")
    text = template.text.replace(ITEM_SLOT, item)
    from .vocab import split_text

    tokens = split_text(text)
    mask_positions = [i for i, t in enumerate(tokens) if t == MASK_SLOT]
    if len(mask_positions) != 1:
        raise TemplateError(f"rendered prompt has {len(mask_positions)} mask tokens")
    return text, mask_positions[0]


def mask_logits(model: EncoderModel, plan: InsertionPlan | None, seq: TokenSequence,
                features: FeatureMatrix | None, label_set: LabelSet) -> np.ndarray:
    """Logits of the candidate labels at the sequence's single [MASK] position."""
    mask_id = model.vocab.mask_id
    positions = [i for i, t in enumerate(seq.ids) if t == mask_id]
    if len(positions) != 1:
        raise ContractViolation(f"sequence has {len(positions)} [MASK] tokens, need exactly 1")
    logits = mlm_logits(model, encode(model, seq, plan, features))
    row = logits.data[positions[0]]
    return np.array([row[i] for i in label_set.ids])


@dataclass
class ZeroShotResult:
    label: str
    scores: np.ndarray                 # aggregate per-label scores
    per_template: list[str]            # argmax label per template
    per_template_scores: np.ndarray    # [templates x labels]


def zero_shot_classify(model: EncoderModel, plan: InsertionPlan | None, item: str,
                       templates: list[PromptTemplate], label_set: LabelSet,
                       features_for_prompt, max_len: int | None = None) -> ZeroShotResult:
    """Classify by mean label logits over the rendered templates.

    ``features_for_prompt`` is either a list of FeatureMatrix aligned with
    the templates or a callable mapping rendered prompt text to features
    (None for a plain frozen-host baseline).
    """
    if not templates:
        raise ContractViolation("need at least one template")
    per_scores = []
    per_argmax = []
    for i, template in enumerate(templates):
        text, _ = render_prompt(template, item)
        if features_for_prompt is None:
            feats = None
        elif callable(features_for_prompt):
            feats = features_for_prompt(text)
        else:
            feats = features_for_prompt[i]
        seq = build_model_input(model.vocab, text,
                                max_len=max_len or model.cfg.max_seq_len)
        scores = mask_logits(model, plan, seq, feats, label_set)
        per_scores.append(scores)
        per_argmax.append(label_set.labels[int(np.argmax(scores))])
    stacked = np.stack(per_scores)
    aggregate = stacked.mean(axis=0)
    return ZeroShotResult(label=label_set.labels[int(np.argmax(aggregate))],
                          scores=aggregate, per_template=per_argmax,
                          per_template_scores=stacked)


def stack_paired_features(features_a: FeatureMatrix,
                          features_b: FeatureMatrix) -> FeatureMatrix:
    """Concatenate the valid rows of two feature sets with 0/1 segment tags."""
    if features_a is None or features_b is None:
        raise ContractViolation("both feature sides must be nonempty")
    rows_a = features_a.rows[: features_a.valid_len]
    rows_b = features_b.rows[: features_b.valid_len]
    tags = np.concatenate([np.zeros(len(rows_a), dtype=np.int64),
                           np.ones(len(rows_b), dtype=np.int64)])
    source = features_a.source if features_a.source == features_b.source else "mixed"
    return FeatureMatrix(rows=np.concatenate([rows_a, rows_b], axis=0),
                         token_type=tags, source=source)
