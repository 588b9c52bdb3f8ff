"""Adapter training: MLM over a corpus with per-sample external features.

The host encoder stays frozen for the whole run; only the inserted adapter
blocks receive gradient updates. Feature matrices come from the bank
(V-expert) or from chunked text embeddings (T-expert).
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .adapter import FeatureMatrix, InsertionPlan, T_EXPERT, V_EXPERT
from .checkpoint import save_checkpoint
from .encoder import EncoderModel, encode, mlm_logits
from .errors import ContractViolation
from .masking import MaskingPolicy, mask_batch
from .numerics import AdamState, ParameterSet, Tensor, adam_step
from .retrieval import FeatureBank, gather_features, retrieve_images
from .textfeat import EmbeddingProvider, assemble_text_features
from .vocab import TokenSequence, build_model_input

# Mask ratios that worked best per expert in the upstream ablations.
DEFAULT_MASK_RATIO = {V_EXPERT: 0.45, T_EXPERT: 0.15}
DEFAULT_EPOCHS = {V_EXPERT: 3, T_EXPERT: 1}
DEFAULT_LR = 1e-4
# Reference-scale batch sizes were 256 (V) and 96 (T); desk runs use 8.
DEFAULT_BATCH_SIZE = 8


@dataclass
class AdaptationRun:
    """Configuration and mutable state of one adaptation run."""

    corpus: list[str]
    expert: str = V_EXPERT
    epochs: int = 0                # 0 = per-expert default
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_LR
    mask_ratio: float = 0.0        # 0 = per-expert default
    k: int = 10
    feature_len: int = 16
    seed: int = 0
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    fixed_clock: bool = False      # write wall_ms as 0 for byte-reproducible metrics
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.epochs == 0:
            self.epochs = DEFAULT_EPOCHS[self.expert]
        if self.mask_ratio == 0.0:
            self.mask_ratio = DEFAULT_MASK_RATIO[self.expert]


def _sample_loss(model: EncoderModel, plan: InsertionPlan, sample,
                 features: FeatureMatrix) -> nm.Tensor:
    logits = mlm_logits(model, encode(model, sample.seq, plan, features))
    mask = [False] * len(sample.seq)
    targets = [0] * len(sample.seq)
    for pos, tgt in zip(sample.positions, sample.targets):
        mask[pos], targets[pos] = True, tgt
    return nm.cross_entropy_logits(logits, targets, mask)


def adaptation_step(model: EncoderModel, plan: InsertionPlan,
                    batch: list[TokenSequence], features: list[FeatureMatrix],
                    policy: MaskingPolicy, params: ParameterSet, state: AdamState,
                    rng: np.random.Generator) -> float:
    """One masked-LM step over a batch; updates adapter parameters only."""
    if not model.frozen:
        raise ContractViolation("adaptation requires a frozen host model")
    if len(batch) != len(features):
        raise ContractViolation(f"{len(batch)} sequences but {len(features)} feature matrices")
    for f in features:
        if f is None:
            raise ContractViolation("every sample needs a nonempty feature matrix")
    losses = []
    for seq, feat in zip(batch, features):
        masked = mask_batch([seq], policy, rng, model.vocab)
        if not masked:  # no maskable tokens; mask_batch already warned
            continue
        losses.append(_sample_loss(model, plan, masked[0], feat))
    if not losses:
        raise ContractViolation("batch contained no maskable sequences")
    loss = losses[0]
    for extra in losses[1:]:
        loss = nm.add(loss, extra)
    loss = nm.mul(loss, Tensor(np.asarray(1.0 / len(losses))))
    nm.backward(loss)
    adam_step(params, state)
    return float(loss.data)


def features_for_text(text: str, expert: str, bank: FeatureBank | None,
                      provider: EmbeddingProvider, k: int, feature_len: int,
                      rng: np.random.Generator) -> FeatureMatrix:
    """Build the external feature matrix for one input text."""
    if expert == V_EXPERT:
        if bank is None:
            raise ContractViolation("V-expert needs a feature bank")
        return gather_features(bank, retrieve_images(bank, text, k, provider, rng))
    return assemble_text_features(text, provider, feature_len).to_feature_matrix()


def run_adaptation(model: EncoderModel, plan: InsertionPlan, run: AdaptationRun,
                   provider: EmbeddingProvider, bank: FeatureBank | None = None) -> dict:
    """Train the plan's adapters over the corpus; returns a report dict."""
    if not run.corpus:
        raise ContractViolation("adaptation corpus is empty")
    if not model.frozen:
        raise ContractViolation("adaptation requires a frozen host model")

    rng = np.random.default_rng(run.seed)
    policy = MaskingPolicy(mask_ratio=run.mask_ratio)
    params = plan.parameter_set()
    state = AdamState(lr=run.lr)
    seqs = [build_model_input(model.vocab, text, max_len=model.cfg.max_seq_len)
            for text in run.corpus]

    metrics_file = open(run.metrics_path, "w") if run.metrics_path else None
    started = time.perf_counter()
    step = 0
    try:
        for epoch in range(run.epochs):
            order = rng.permutation(len(seqs))
            for lo in range(0, len(order), run.batch_size):
                idx = order[lo:lo + run.batch_size]
                batch = [seqs[i] for i in idx]
                feats = [features_for_text(run.corpus[i], run.expert, bank,
                                           provider, run.k, run.feature_len, rng)
                         for i in idx]
                t0 = time.perf_counter()
                loss = adaptation_step(model, plan, batch, feats, policy,
                                       params, state, rng)
                step += 1
                run.loss_history.append(loss)
                if metrics_file:
                    wall = 0 if run.fixed_clock else int((time.perf_counter() - t0) * 1000)
                    record = {"step": step, "epoch": epoch + 1, "loss": loss,
                              "lr": run.lr, "wall_ms": wall}
                    metrics_file.write(json.dumps(record) + "\n")
    finally:
        if metrics_file:
            metrics_file.close()

    if run.checkpoint_path:
        save_adapter_checkpoint(run.checkpoint_path, plan)
    return {
        "steps": step,
        "epochs": run.epochs,
        "final_loss": run.loss_history[-1] if run.loss_history else None,
        "mean_loss": float(np.mean(run.loss_history)) if run.loss_history else None,
        "wall_seconds": time.perf_counter() - started,
        "checkpoint": run.checkpoint_path,
    }


def save_adapter_checkpoint(path: str, plan: InsertionPlan) -> None:
    first = plan.adapters[plan.positions[0]].config
    config = {
        "kind": plan.kind,
        "positions": plan.positions,
        "adapter": {"d": first.d, "r": first.r, "n": first.n,
                    "ffn_dim": first.ffn_dim, "d_c": first.d_c,
                    "s_init": first.s_init, "ln_eps": first.ln_eps},
    }
    tensors = {name: t.data for name, t in plan.named_parameters()}
    save_checkpoint(path, config, tensors, kind="MODEL")


def load_adapter_checkpoint(path: str):
    """Rebuild an insertion plan from an adapter checkpoint."""
    from .adapter import AdapterConfig, make_insertion_plan
    from .checkpoint import load_checkpoint

    config, tensors = load_checkpoint(path, expect_kind="MODEL")
    acfg = AdapterConfig(**config["adapter"])
    n_layers = max(config["positions"])
    plan = make_insertion_plan(config["positions"], config["kind"], acfg,
                               n_layers=n_layers)
    for name, tensor in plan.named_parameters():
        if name not in tensors:
            raise ContractViolation(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != tensor.data.shape:
            raise ContractViolation(f"checkpoint tensor {name!r} has shape "
                                    f"{tensors[name].shape}, expected {tensor.data.shape}")
        tensor.data = tensors[name].copy()
    return plan
