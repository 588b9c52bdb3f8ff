"""A synthetic benchmark where retrieved features determine the answer.

Construction: six class words and, per class, a small set of exclusive
descriptor words. Items are out-of-vocabulary strings whose feature-space
direction encodes their class. The host encoder pretrains on text where
descriptors co-occur with their class word (ordinary co-occurrence
statistics, which separates the class-word embeddings) but where colors are
assigned to items uniformly at random, so the frozen host can only guess
the prior when asked about an item. The feature bank and the query encoder
are aligned by construction: retrieval for text mentioning an item surfaces
rows carrying that item's class direction, text without an item lands in a
neutral background cluster. Captions pair each training item with its true
class words, so every maskable caption token is determined by the retrieved
features; held-out items never appear in the adaptation corpus, which
leaves the feature path as the only route to them.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .adapter import AdapterConfig, FeatureMatrix, InsertionPlan, V_EXPERT, \
    default_positions, make_insertion_plan
from .adaptation import AdaptationRun, run_adaptation
from .encoder import EncoderConfig, EncoderModel, PretrainConfig, encode, \
    mlm_logits, pretrain_toy, save_encoder
from .masking import MaskingPolicy, mask_batch
from .numerics import AdamState, Tensor, adam_step
from .retrieval import FeatureBank, bank_build, gather_features, retrieve_images, \
    save_bank
from .reasoning import LabelSet, PromptTemplate, builtin_color_pack, \
    zero_shot_classify
from .textfeat import EmbeddingProvider, HashStubProvider, fnv1a64
from .vocab import Vocabulary, build_model_input, split_text

N_CLASSES = 6
CLASS_WORDS = ("red", "blue", "green", "yellow", "white", "black")
VOCAB_SIZE = 64
MODEL_DIM = 32
FEATURE_DIM = 16
K_RETRIEVE = 10
N_TRAIN_ITEMS = 36
N_EVAL_ITEMS = 60
IMAGES_PER_ITEM = 4
N_BACKGROUND = 64   # rows with no class content, what contentless queries hit

# Per-class descriptor words: a class's descriptors only ever co-occur with
# that class word, giving each color its own textual neighborhood.
DESCRIPTORS = {
    "red": ("warm", "burnt", "rusty"),
    "blue": ("cool", "deep", "icy"),
    "green": ("leafy", "mossy", "fresh"),
    "yellow": ("sunny", "golden", "mellow"),
    "white": ("pale", "snowy", "clean"),
    "black": ("dark", "sooty", "dim"),
}
_DESC_WORDS = tuple(w for words in DESCRIPTORS.values() for w in words)
_TEMPLATE_WORDS = ("q", ":", "what", "is", "the", "color", "of", "?", "a", "it",
                   ".", "colour", "usual", "usually", "typical", "has")
_FILLERS = ("photo", "here", "near", "thing", "object", "this", "that",
            "one", "two", "on", "in", "with", "new", "old", "big", "small",
            "often", "seen", "very")
# 59 content words; with the 5 specials the vocabulary is exactly 64 wide.
_CONTENT_WORDS = CLASS_WORDS + _DESC_WORDS + _TEMPLATE_WORDS + _FILLERS


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class PlantedProvider(EmbeddingProvider):
    """Query encoder aligned with the planted bank.

    Text mentioning a known item embeds near that item's feature direction.
    Anything else lands near the generic background direction, off the class
    subspace, so its neighbors are the bank's background rows.
    """

    def __init__(self, item_dirs: dict[str, np.ndarray], class_basis: np.ndarray,
                 generic_dir: np.ndarray, dim: int, seed: int):
        self.dim = dim
        self.item_dirs = item_dirs
        self.class_basis = class_basis  # [dim x n_classes], orthonormal columns
        self.generic_dir = generic_dir
        self.seed = seed
        self._fallback = HashStubProvider(dim, salt=seed)

    def tokenize_text(self, text: str) -> list[int]:
        return self._fallback.tokenize_text(text)

    def embed_chunk(self, ids: list[int]) -> np.ndarray:
        return self._fallback.embed_chunk(ids)

    def embed_query(self, text: str) -> np.ndarray:
        tokens = set(split_text(text))
        for item, direction in self.item_dirs.items():
            if item in tokens:
                key = fnv1a64(text.encode("utf-8")) ^ self.seed
                jitter = np.random.Generator(np.random.PCG64(key)).standard_normal(self.dim)
                return _unit(direction + 0.05 * jitter)
        noise = self._fallback.embed_query(text)
        noise = noise - self.class_basis @ (self.class_basis.T @ noise)
        return _unit(self.generic_dir + 0.2 * noise)


@dataclass
class PlantedWorld:
    """Everything needed to run the planted experiment."""

    seed: int
    vocab: Vocabulary
    model: EncoderModel
    adapter_config: AdapterConfig
    bank: FeatureBank
    provider: PlantedProvider
    train_captions: list[str]
    heldout_captions: list[str]
    train_items: list[str]
    eval_items: list[str]
    gold: dict[str, str]
    pretrain_report: dict = field(default_factory=dict)

    @property
    def label_set(self) -> LabelSet:
        return LabelSet(list(CLASS_WORDS), self.vocab)


def _item_names(rng: np.random.Generator, count: int) -> list[str]:
    """Pronounceable nonsense words, guaranteed out-of-vocabulary."""
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    names = []
    seen = set(_CONTENT_WORDS)
    while len(names) < count:
        word = "".join(
            consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
            for _ in range(3))
        if word not in seen:
            seen.add(word)
            names.append(word)
    return names


def _plant_features(rng: np.random.Generator):
    """Item names, their feature directions, the class basis, and the
    generic background direction.

    Consumes a fixed prefix of the generator stream so the provider can be
    rebuilt from the seed alone.
    """
    items = _item_names(rng, N_TRAIN_ITEMS + N_EVAL_ITEMS)
    basis, _ = np.linalg.qr(rng.standard_normal((FEATURE_DIM, N_CLASSES)))
    class_dirs = basis.T
    item_dirs = {}
    for i, item in enumerate(items):
        c = i % N_CLASSES
        item_dirs[item] = _unit(class_dirs[c] + 0.08 * rng.standard_normal(FEATURE_DIM))
    off = np.eye(FEATURE_DIM) - basis @ basis.T
    generic_dir = _unit(off @ rng.standard_normal(FEATURE_DIM))
    return items, item_dirs, basis, generic_dir


def _tag_caption(item: str, color: str) -> str:
    return f"{item} {color}"


def _one_sentence_caption(rng: np.random.Generator, item: str, color: str) -> str:
    d = DESCRIPTORS[color]
    d1, d2 = d[rng.integers(3)], d[rng.integers(3)]
    form = rng.integers(3)
    if form == 0:
        return f"{d1} {item} {color} {d2}"
    if form == 1:
        return f"{item} {color} {d1}"
    return f"{d1} {d2} {item} {color}"


def _two_sentence_caption(rng: np.random.Generator, item: str, color: str) -> str:
    d = DESCRIPTORS[color]
    d1, d2, d3 = d[rng.integers(3)], d[rng.integers(3)], d[rng.integers(3)]
    if rng.integers(2):
        return f"{d1} {d2} . {item} {color} {d3}"
    return f"{item} {color} {d1} . {d2} {d3}"


def _captions_for(rng: np.random.Generator, item: str, color: str) -> list[str]:
    return [_tag_caption(item, color),
            _one_sentence_caption(rng, item, color),
            _one_sentence_caption(rng, item, color),
            _two_sentence_caption(rng, item, color)]


_PRETRAIN_TEMPLATE_SHAPES = (
    "q : what is the color of {item} ? a : it is {c} .",
    "q : what is the colour of {item} ? a : it is {c} .",
    "what is the color of {item} ? it is {c} .",
    "what is the colour of {item} ? {c} .",
    "the color of {item} is {c} .",
    "the usual color of {item} is {c} .",
    "{item} usually has the color of {c} .",
    "what is the usual color of {item} ? {c} .",
    "what is the typical color of {item} ? {c} .",
)
_PRETRAIN_DESC_SHAPES = (
    "{d1} {item} {c} {d2}",
    "{item} {c} {d1}",
    "{d1} {d2} . {item} {c} {d3}",
    "{item} {c} {d1} . {d2} {d3}",
    "it is {c} and {d1} .",
    "a {d1} {c} thing .",
)


def _pretrain_corpus(rng: np.random.Generator, n_sentences: int) -> list[str]:
    """Sentences whose colors are independent of the (fake) items.

    Descriptors stay paired with their class word, which separates the six
    color embeddings; colors are assigned to items uniformly at random, so
    no item-to-color mapping is learnable from text.
    """
    fakes = _item_names(rng, 40)
    corpus = []
    for _ in range(n_sentences):
        item = fakes[rng.integers(len(fakes))]
        c = CLASS_WORDS[rng.integers(N_CLASSES)]
        d = DESCRIPTORS[c]
        if rng.random() < 0.35:
            shape = _PRETRAIN_TEMPLATE_SHAPES[rng.integers(len(_PRETRAIN_TEMPLATE_SHAPES))]
        else:
            shape = _PRETRAIN_DESC_SHAPES[rng.integers(len(_PRETRAIN_DESC_SHAPES))]
        corpus.append(shape.format(item=item, c=c, d1=d[rng.integers(3)],
                                   d2=d[rng.integers(3)], d3=d[rng.integers(3)]))
    return corpus


def build_world(seed: int = 0, pretrain_epochs: int = 20) -> PlantedWorld:
    """Build vocabulary, pretrain and freeze the host, and plant the bank."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(_CONTENT_WORDS)
    assert len(vocab) == VOCAB_SIZE, f"vocabulary is {len(vocab)} wide, expected {VOCAB_SIZE}"

    items, item_dirs, class_basis, generic_dir = _plant_features(rng)
    train_items = items[:N_TRAIN_ITEMS]
    eval_items = items[N_TRAIN_ITEMS:]
    gold = {item: CLASS_WORDS[i % N_CLASSES] for i, item in enumerate(items)}

    entries = []
    for item in items:
        for j in range(IMAGES_PER_ITEM):
            vec = _unit(item_dirs[item] + 0.2 * rng.standard_normal(FEATURE_DIM))
            entries.append((f"img-{item}-{j}", vec))
    # A tight background cluster with no class signal; contentless queries
    # land here, so their retrieved rows look the same at train and eval time.
    off = np.eye(FEATURE_DIM) - class_basis @ class_basis.T
    for j in range(N_BACKGROUND):
        vec = _unit(generic_dir + 0.08 * (off @ rng.standard_normal(FEATURE_DIM)))
        entries.append((f"bg-{j}", vec))
    bank = bank_build(entries, FEATURE_DIM)
    provider = PlantedProvider(item_dirs, class_basis, generic_dir, FEATURE_DIM, seed)

    cap_rng = np.random.default_rng(seed + 11)
    train_captions = [cap for item in train_items
                      for cap in _captions_for(cap_rng, item, gold[item])]
    heldout_captions = []
    for item in eval_items[:12]:
        heldout_captions.append(_one_sentence_caption(cap_rng, item, gold[item]))
        heldout_captions.append(_two_sentence_caption(cap_rng, item, gold[item]))

    enc_cfg = EncoderConfig(d=MODEL_DIM, n_layers=2, n_heads=2, ffn_dim=64,
                            vocab_size=VOCAB_SIZE, max_seq_len=32)
    model = EncoderModel(enc_cfg, vocab, seed=seed)
    report = pretrain_toy(model, _pretrain_corpus(rng, 700),
                          MaskingPolicy(mask_ratio=0.15),
                          PretrainConfig(epochs=pretrain_epochs, lr=1e-3, seed=seed))
    model.freeze()

    adapter_cfg = AdapterConfig(d=MODEL_DIM, r=32, n=4, ffn_dim=64,
                                d_c=FEATURE_DIM, s_init=0.1)
    return PlantedWorld(seed=seed, vocab=vocab, model=model,
                        adapter_config=adapter_cfg, bank=bank, provider=provider,
                        train_captions=train_captions,
                        heldout_captions=heldout_captions,
                        train_items=train_items, eval_items=eval_items,
                        gold=gold, pretrain_report=report)


def adapt_world(world: PlantedWorld, epochs: int = 45, lr: float = 3e-3,
                checkpoint_path: str | None = None,
                metrics_path: str | None = None) -> tuple[InsertionPlan, AdaptationRun]:
    """Insert a fresh V-expert and adapt it on the planted captions."""
    plan = make_insertion_plan(
        default_positions(V_EXPERT, world.model.cfg.n_layers), V_EXPERT,
        world.adapter_config, n_layers=world.model.cfg.n_layers, seed=world.seed)
    run = AdaptationRun(corpus=list(world.train_captions), expert=V_EXPERT,
                        epochs=epochs, lr=lr, k=K_RETRIEVE, seed=world.seed,
                        checkpoint_path=checkpoint_path, metrics_path=metrics_path,
                        fixed_clock=True)
    run_adaptation(world.model, plan, run, world.provider, world.bank)
    return plan, run


def static_mask_descent(world: PlantedWorld, steps: int = 100,
                        lr: float = 5e-3) -> list[float]:
    """Full-batch descent over one fixed masked copy of the corpus.

    BERT-style static masking: masks are drawn once, so the per-step loss is
    a deterministic function of the adapter parameters and the loss trend is
    meaningful step to step. Returns the loss history.
    """
    policy = MaskingPolicy(mask_ratio=0.45)
    feat_rng = np.random.default_rng(world.seed + 3)
    mask_rng = np.random.default_rng(world.seed + 4)
    samples = []
    for cap in world.train_captions:
        seq = build_model_input(world.vocab, cap, max_len=world.model.cfg.max_seq_len)
        masked = mask_batch([seq], policy, mask_rng, world.vocab)
        if not masked:
            continue
        feats = gather_features(world.bank, retrieve_images(
            world.bank, cap, K_RETRIEVE, world.provider, feat_rng))
        samples.append((masked[0], feats))

    plan = make_insertion_plan(
        default_positions(V_EXPERT, world.model.cfg.n_layers), V_EXPERT,
        world.adapter_config, n_layers=world.model.cfg.n_layers, seed=world.seed)
    params = plan.parameter_set()
    state = AdamState(lr=lr)
    history = []
    for _ in range(steps):
        losses = []
        for sample, feats in samples:
            logits = mlm_logits(world.model, encode(world.model, sample.seq, plan, feats))
            mask = [False] * len(sample.seq)
            targets = [0] * len(sample.seq)
            for pos, tgt in zip(sample.positions, sample.targets):
                mask[pos], targets[pos] = True, tgt
            losses.append(nm.cross_entropy_logits(logits, targets, mask))
        loss = losses[0]
        for extra in losses[1:]:
            loss = nm.add(loss, extra)
        loss = nm.mul(loss, Tensor(np.asarray(1.0 / len(losses))))
        nm.backward(loss)
        adam_step(params, state)
        history.append(float(loss.data))
    return history


def make_retriever(world: PlantedWorld, bank: FeatureBank | None = None,
                   seed_offset: int = 1):
    """Per-prompt feature callback for zero-shot evaluation (deterministic)."""
    bank = bank if bank is not None else world.bank
    rng = np.random.default_rng(world.seed + seed_offset)

    def features_for(text: str) -> FeatureMatrix:
        return gather_features(bank, retrieve_images(bank, text, K_RETRIEVE,
                                                     world.provider, rng))

    return features_for


def evaluate_zero_shot(world: PlantedWorld, plan: InsertionPlan | None,
                       bank: FeatureBank | None = None,
                       templates: list[PromptTemplate] | None = None) -> dict:
    """Zero-shot accuracy over the held-out items (plan=None is the baseline)."""
    templates = templates or builtin_color_pack()
    label_set = world.label_set
    features_for = make_retriever(world, bank) if plan is not None else None
    predictions = {}
    correct = 0
    for item in world.eval_items:
        result = zero_shot_classify(world.model, plan, item, templates, label_set,
                                    features_for)
        predictions[item] = result.label
        if result.label == world.gold[item]:
            correct += 1
    return {"accuracy": correct / len(world.eval_items),
            "n_items": len(world.eval_items), "predictions": predictions}


def heldout_mlm_loss(world: PlantedWorld, plan: InsertionPlan | None,
                     mask_draws: int = 5) -> float:
    """Mean masked-LM loss on held-out captions over several fixed mask draws."""
    policy = MaskingPolicy(mask_ratio=0.45)
    mask_rng = np.random.default_rng(world.seed + 5)
    feat_rng = np.random.default_rng(world.seed + 6)
    total = 0.0
    count = 0
    for _ in range(mask_draws):
        for cap in world.heldout_captions:
            seq = build_model_input(world.vocab, cap, max_len=world.model.cfg.max_seq_len)
            masked = mask_batch([seq], policy, mask_rng, world.vocab)
            if not masked:
                continue
            feats = None
            if plan is not None:
                feats = gather_features(world.bank, retrieve_images(
                    world.bank, cap, K_RETRIEVE, world.provider, feat_rng))
            sample = masked[0]
            logits = mlm_logits(world.model, encode(world.model, sample.seq, plan, feats))
            mask = [False] * len(sample.seq)
            targets = [0] * len(sample.seq)
            for pos, tgt in zip(sample.positions, sample.targets):
                mask[pos], targets[pos] = True, tgt
            total += float(nm.cross_entropy_logits(logits, targets, mask).data)
            count += 1
    return total / count


def export_world(world: PlantedWorld, plan: InsertionPlan, out_dir: str) -> dict[str, str]:
    """Write bank, checkpoints, items, labels, and a run config for the CLI."""
    from .adaptation import save_adapter_checkpoint

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "bank": os.path.join(out_dir, "planted.xabk"),
        "base_checkpoint": os.path.join(out_dir, "base.xamd"),
        "adapter_checkpoint": os.path.join(out_dir, "adapter.xamd"),
        "items": os.path.join(out_dir, "items.tsv"),
        "labels": os.path.join(out_dir, "labels.txt"),
        "config": os.path.join(out_dir, "run.json"),
    }
    save_bank(world.bank, paths["bank"])
    save_encoder(paths["base_checkpoint"], world.model)
    save_adapter_checkpoint(paths["adapter_checkpoint"], plan)
    with open(paths["items"], "w", encoding="utf-8") as f:
        for item in world.eval_items:
            f.write(f"{item}\t{world.gold[item]}\n")
    with open(paths["labels"], "w", encoding="utf-8") as f:
        f.write("\n".join(CLASS_WORDS) + "\n")
    cfg = world.model.cfg
    config = {
        "seed": world.seed,
        "expert": V_EXPERT,
        "k": K_RETRIEVE,
        "model": {"d": cfg.d, "n_layers": cfg.n_layers, "n_heads": cfg.n_heads,
                  "ffn_dim": cfg.ffn_dim, "max_seq_len": cfg.max_seq_len},
        "adapter": {"r": world.adapter_config.r, "n": world.adapter_config.n,
                    "ffn_dim": world.adapter_config.ffn_dim,
                    "d_c": world.adapter_config.d_c},
        "provider": {"kind": "planted", "seed": world.seed},
        "paths": {
            "bank": paths["bank"],
            "base_checkpoint": paths["base_checkpoint"],
            "adapter_checkpoint": paths["adapter_checkpoint"],
            "labels": paths["labels"],
        },
    }
    with open(paths["config"], "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2)
    return paths


def rebuild_provider(seed: int) -> PlantedProvider:
    """Reconstruct the planted query encoder from its seed (for the CLI)."""
    _, item_dirs, class_basis, generic_dir = _plant_features(np.random.default_rng(seed))
    return PlantedProvider(item_dirs, class_basis, generic_dir, FEATURE_DIM, seed)
