"""A small transformer masked-language-model encoder.

Trainable on synthetic text, then frozen to play the role of the pretrained
host model that adapter blocks are inserted into. Post-norm layers, learned
position embeddings, tied MLM head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .adapter import FeatureMatrix, InsertionPlan, adapter_forward
from .errors import ConfigError, ContractViolation
from .numerics import AdamState, Linear, Norm, ParameterSet, Tensor, adam_step
from .vocab import SPECIAL_TOKENS, TokenSequence, Vocabulary, build_model_input

log = logging.getLogger(__name__)

_MASKED_SCORE = -1.0e30


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder dimensions plus the special vocabulary ids."""

    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 64
    pad_id: int = 0
    unk_id: int = 1
    cls_id: int = 2
    sep_id: int = 3
    mask_id: int = 4
    type_vocab: int = 2
    ln_eps: float = 1e-5
    tie_mlm_head: bool = True

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        specials = (self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id)
        if len(set(specials)) != len(specials) or max(specials) >= self.vocab_size:
            raise ConfigError(f"special ids {specials} must be distinct and < vocab_size")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def reference(cls) -> "EncoderConfig":
        """Full-size preset (as in the 12-layer base encoder) for accounting."""
        return cls(d=768, n_layers=12, n_heads=12, ffn_dim=3072,
                   vocab_size=30522, max_seq_len=512)


def desk_config(vocab_size: int, **overrides) -> EncoderConfig:
    return replace(EncoderConfig(vocab_size=vocab_size), **overrides)


class EncoderLayer:
    """Post-norm self-attention + FFN block."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.q = [Linear(cfg.d, cfg.head_dim, rng) for _ in range(cfg.n_heads)]
        self.k = [Linear(cfg.d, cfg.head_dim, rng) for _ in range(cfg.n_heads)]
        self.v = [Linear(cfg.d, cfg.head_dim, rng) for _ in range(cfg.n_heads)]
        self.attn_out = Linear(cfg.d, cfg.d, rng)
        self.ffn_in = Linear(cfg.d, cfg.ffn_dim, rng)
        self.ffn_out = Linear(cfg.ffn_dim, cfg.d, rng)
        self.ln_attn = Norm(cfg.d, cfg.ln_eps)
        self.ln_ffn = Norm(cfg.d, cfg.ln_eps)

    def __call__(self, h: Tensor, keep: Tensor | None, fill: Tensor | None) -> Tensor:
        scale = Tensor(np.asarray(1.0 / np.sqrt(self.cfg.head_dim)))
        heads = []
        for i in range(self.cfg.n_heads):
            qi, ki, vi = self.q[i](h), self.k[i](h), self.v[i](h)
            scores = nm.mul(nm.matmul(qi, nm.transpose(ki)), scale)
            if keep is not None:
                scores = nm.add(nm.mul(scores, keep), fill)
            heads.append(nm.matmul(nm.softmax_rows(scores), vi))
        h = self.ln_attn(nm.add(h, self.attn_out(nm.concat_cols(heads))))
        f = self.ffn_out(nm.gelu(self.ffn_in(h)))
        return self.ln_ffn(nm.add(h, f))

    def named_parameters(self, prefix: str = ""):
        for i in range(self.cfg.n_heads):
            yield from self.q[i].named(f"{prefix}attn.h{i}.q")
            yield from self.k[i].named(f"{prefix}attn.h{i}.k")
            yield from self.v[i].named(f"{prefix}attn.h{i}.v")
        yield from self.attn_out.named(prefix + "attn.out")
        yield from self.ffn_in.named(prefix + "ffn.in")
        yield from self.ffn_out.named(prefix + "ffn.out")
        yield from self.ln_attn.named(prefix + "ln_attn")
        yield from self.ln_ffn.named(prefix + "ln_ffn")


class EncoderModel:
    """Embeddings, transformer layers, and an MLM head over a fixed vocabulary."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, seed: int = 0):
        if len(vocab) != cfg.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} entries, config says {cfg.vocab_size}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d)),
                              requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (cfg.max_seq_len, cfg.d)),
                              requires_grad=True)
        self.type_emb = Tensor(rng.normal(0.0, 0.02, (cfg.type_vocab, cfg.d)),
                               requires_grad=True)
        self.emb_ln = Norm(cfg.d, cfg.ln_eps)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.mlm_bias = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
        self.mlm_head = None if cfg.tie_mlm_head else Linear(cfg.d, cfg.vocab_size, rng)
        self.frozen = False

    def named_parameters(self):
        yield "emb.token", self.tok_emb
        yield "emb.position", self.pos_emb
        yield "emb.type", self.type_emb
        yield from self.emb_ln.named("emb.ln")
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layer{i:02d}.")
        yield "mlm.bias", self.mlm_bias
        if self.mlm_head is not None:
            yield from self.mlm_head.named("mlm.head")

    def parameter_set(self) -> ParameterSet:
        ps = ParameterSet()
        ps.extend(self.named_parameters(), trainable=not self.frozen)
        return ps

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = False
        self.frozen = True

    def unfreeze(self) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = True
        self.frozen = False

    def digest(self) -> str:
        return nm.parameter_digest(self.named_parameters())


def _key_mask(seq: TokenSequence) -> tuple[Tensor | None, Tensor | None]:
    if all(seq.attention_mask):
        return None, None
    valid = np.array(seq.attention_mask, dtype=np.float64)
    return Tensor(valid), Tensor((1.0 - valid) * _MASKED_SCORE)


def encode(model: EncoderModel, seq: TokenSequence, plan: InsertionPlan | None = None,
           features: FeatureMatrix | None = None) -> Tensor:
    """Hidden states [len x d]; adapters in ``plan`` run before their layer."""
    cfg = model.cfg
    if len(seq) == 0:
        raise ContractViolation("encode requires a nonempty sequence")
    if len(seq) > cfg.max_seq_len:
        raise ContractViolation(f"sequence length {len(seq)} exceeds max {cfg.max_seq_len}")
    if plan is not None:
        for p in plan.positions:
            if not 1 <= p <= cfg.n_layers:
                raise ConfigError(f"adapter position {p} outside 1..{cfg.n_layers}")

    positions = list(range(len(seq)))
    h = nm.add(nm.add(nm.gather_rows(model.tok_emb, seq.ids),
                      nm.gather_rows(model.pos_emb, positions)),
               nm.gather_rows(model.type_emb, seq.token_type_ids))
    h = model.emb_ln(h)
    keep, fill = _key_mask(seq)
    for idx, layer in enumerate(model.layers, start=1):
        if plan is not None and idx in plan.adapters:
            h = adapter_forward(plan.adapters[idx], h, features)
        h = layer(h, keep, fill)
    return h


def mlm_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    """Vocabulary logits per position."""
    if model.mlm_head is not None:
        return model.mlm_head(hidden)
    return nm.add(nm.matmul(hidden, nm.transpose(model.tok_emb)), model.mlm_bias)


# --------------------------------------------------------------------------
# Toy pretraining

@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 50
    eval_samples: int = 16


def pretrain_toy(model: EncoderModel, corpus: list[str], policy, cfg: PretrainConfig) -> dict:
    """Train the whole (unfrozen) encoder with MLM on a small corpus.

    Returns a report with the eval-loss history; afterwards the model can be
    frozen and used as the host for adapters.
    """
    from .masking import mask_batch  # local import; masking also imports vocab

    if model.frozen:
        raise ContractViolation("pretrain_toy requires an unfrozen model")
    if not corpus:
        raise ContractViolation("pretrain_toy requires a nonempty corpus")

    rng = np.random.default_rng(cfg.seed)
    seqs = [build_model_input(model.vocab, text, max_len=model.cfg.max_seq_len)
            for text in corpus]
    probe = seqs[: min(cfg.eval_samples, len(seqs))]

    def eval_loss() -> float:
        probe_rng = np.random.default_rng(cfg.seed + 1)
        samples = mask_batch(probe, policy, probe_rng, model.vocab)
        total = 0.0
        for s in samples:
            logits = mlm_logits(model, encode(model, s.seq))
            mask = [False] * len(s.seq)
            targets = [0] * len(s.seq)
            for pos, tgt in zip(s.positions, s.targets):
                mask[pos], targets[pos] = True, tgt
            total += float(nm.cross_entropy_logits(logits, targets, mask).data)
        return total / len(samples)

    params = model.parameter_set()
    state = AdamState(lr=cfg.lr)
    eval_losses = [eval_loss()]
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), cfg.batch_size):
            batch = [seqs[i] for i in order[start:start + cfg.batch_size]]
            samples = mask_batch(batch, policy, rng, model.vocab)
            if not samples:
                continue
            losses = []
            for s in samples:
                logits = mlm_logits(model, encode(model, s.seq))
                mask = [False] * len(s.seq)
                targets = [0] * len(s.seq)
                for pos, tgt in zip(s.positions, s.targets):
                    mask[pos], targets[pos] = True, tgt
                losses.append(nm.cross_entropy_logits(logits, targets, mask))
            loss = losses[0]
            for extra in losses[1:]:
                loss = nm.add(loss, extra)
            loss = nm.mul(loss, Tensor(np.asarray(1.0 / len(losses))))
            nm.backward(loss)
            adam_step(params, state)
            step += 1
            if step % cfg.eval_every == 0:
                eval_losses.append(eval_loss())
    if (len(eval_losses) - 1) * cfg.eval_every != step:
        eval_losses.append(eval_loss())
    return {"eval_losses": eval_losses, "steps": step,
            "initial_loss": eval_losses[0], "final_loss": eval_losses[-1]}


# --------------------------------------------------------------------------
# Persistence

def save_encoder(path: str, model: EncoderModel) -> None:
    """Write config (including the vocabulary) plus all parameters."""
    from .checkpoint import save_checkpoint

    cfg = model.cfg
    config = {
        "d": cfg.d, "n_layers": cfg.n_layers, "n_heads": cfg.n_heads,
        "ffn_dim": cfg.ffn_dim, "vocab_size": cfg.vocab_size,
        "max_seq_len": cfg.max_seq_len, "type_vocab": cfg.type_vocab,
        "ln_eps": cfg.ln_eps, "tie_mlm_head": cfg.tie_mlm_head,
        "frozen": model.frozen,
        "vocab": list(model.vocab.itos[len(SPECIAL_TOKENS):]),
    }
    tensors = {name: t.data for name, t in model.named_parameters()}
    save_checkpoint(path, config, tensors, kind="MODEL")


def load_encoder(path: str) -> EncoderModel:
    from .checkpoint import load_checkpoint

    config, tensors = load_checkpoint(path, expect_kind="MODEL")
    vocab = Vocabulary(config.pop("vocab"))
    frozen = config.pop("frozen")
    model = EncoderModel(EncoderConfig(**config), vocab)
    for name, tensor in model.named_parameters():
        if name not in tensors:
            raise ContractViolation(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != tensor.data.shape:
            raise ContractViolation(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = tensors[name].copy()
    if frozen:
        model.freeze()
    return model


# --------------------------------------------------------------------------
# Parameter accounting

def count_layer_weights(cfg: EncoderConfig) -> int:
    """Weight-matrix entries in one transformer layer: 4*d^2 + 2*d*ffn."""
    return 4 * cfg.d * cfg.d + 2 * cfg.d * cfg.ffn_dim


def count_encoder_weights(cfg: EncoderConfig) -> dict[str, int]:
    """Closed-form weight counts (embeddings included, biases/LN excluded)."""
    embeddings = (cfg.vocab_size * cfg.d + cfg.max_seq_len * cfg.d
                  + cfg.type_vocab * cfg.d)
    per_layer = count_layer_weights(cfg)
    head = 0 if cfg.tie_mlm_head else cfg.vocab_size * cfg.d
    total = embeddings + cfg.n_layers * per_layer + head
    return {"embeddings": embeddings, "per_layer": per_layer,
            "layers": cfg.n_layers * per_layer, "mlm_head": head, "total": total}


def count_params(obj) -> dict[str, int]:
    """Brute-force count over allocated tensors, split weights/biases/LN.

    ``obj`` is anything with ``named_parameters()``. 2-D arrays count as
    weight matrices; gamma/beta as layer norm; everything else (biases and
    the adapter's scalar gate) as biases.
    """
    counts = {"weights": 0, "biases": 0, "layer_norm": 0}
    for path, tensor in obj.named_parameters():
        leaf = path.rsplit(".", 1)[-1]
        if leaf in ("gamma", "beta"):
            counts["layer_norm"] += tensor.data.size
        elif tensor.data.ndim == 2:
            counts["weights"] += tensor.data.size
        else:
            counts["biases"] += tensor.data.size
    counts["total"] = sum(counts.values())
    return counts
