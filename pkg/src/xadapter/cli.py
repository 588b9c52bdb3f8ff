"""Command-line interface.

Machine-readable JSON lines go to stdout; diagnostics go to stderr. Exit
codes: 0 success, 2 configuration or contract error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import __version__
from .adapter import count_adapter_params, default_positions, make_insertion_plan
from .adaptation import (AdaptationRun, features_for_text, load_adapter_checkpoint,
                         run_adaptation)
from .config import RunConfig, load_config, make_provider, validate
from .encoder import (EncoderModel, count_encoder_weights, encode, load_encoder,
                      mlm_logits, pretrain_toy, save_encoder, PretrainConfig)
from .errors import BankFormatError, ConfigError, ContractViolation, TemplateError
from .masking import MaskingPolicy
from .reasoning import (LabelSet, builtin_color_pack, load_labels, load_prompt_pack,
                        zero_shot_classify, COLOR_LABELS)
from .retrieval import (FeatureBank, bank_build, cosine_topk, inject_noise,
                        load_bank, save_bank)
from .vocab import Vocabulary, build_model_input

log = logging.getLogger("xadapter")


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")


def _fail_config(problems: list[str]) -> int:
    for p in problems:
        log.error("config: %s", p)
    return 2


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [ln.strip() for ln in f if ln.strip()]


# --------------------------------------------------------------------------
# bank

def cmd_bank_build(args) -> int:
    entries = []
    with open(args.csv, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ConfigError(f"{args.csv}:{line_no}: need id,v0,v1,...")
            entries.append((parts[0], np.array([float(x) for x in parts[1:]])))
    dim = args.dim or (len(entries[0][1]) if entries else 0)
    bank = bank_build(entries, dim)
    save_bank(bank, args.out)
    _emit({"written": args.out, "count": bank.count, "dim": bank.dim})
    return 0


def cmd_bank_query(args) -> int:
    bank = load_bank(args.bank)
    if args.vector_file:
        query = np.array([float(x) for x in _read_lines(args.vector_file)[0].split(",")])
    else:
        query = np.array([float(x) for x in args.vector.split(",")])
    for index, score in cosine_topk(bank, query, args.k):
        _emit({"index": index, "id": bank.ids[index], "score": score})
    return 0


def cmd_bank_augment(args) -> int:
    bank = load_bank(args.bank)
    noisy = inject_noise(bank, args.sigma, np.random.default_rng(args.seed))
    save_bank(noisy, args.out)
    _emit({"written": args.out, "count": noisy.count, "dim": noisy.dim,
           "sigma": args.sigma})
    return 0


# --------------------------------------------------------------------------
# model commands

def _load_model_for(cfg: RunConfig) -> EncoderModel:
    model = load_encoder(cfg.paths["base_checkpoint"])
    # the checkpoint is authoritative; only explicit overrides are validated
    if "d" in cfg.model and cfg.model["d"] != model.cfg.d:
        raise ConfigError(
            f"model.d: checkpoint has d={model.cfg.d}, config says {cfg.model['d']}")
    return model


def _build_plan(cfg: RunConfig, model: EncoderModel):
    acfg = cfg.adapter_config(model.cfg.d)
    positions = cfg.positions or default_positions(cfg.expert, model.cfg.n_layers)
    return make_insertion_plan(positions, cfg.expert, acfg,
                               n_layers=model.cfg.n_layers, seed=cfg.seed)


def _load_bank_checked(cfg: RunConfig, d_c: int) -> FeatureBank:
    bank = load_bank(cfg.paths["bank"])
    if bank.dim != d_c:
        raise ConfigError(f"bank: dim {bank.dim} does not match adapter d_c={d_c}")
    return bank


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    problems = validate(cfg, require_paths=("corpus",))
    if not cfg.path("base_checkpoint"):
        problems.append("paths.base_checkpoint: required but missing")
    if problems:
        return _fail_config(problems)
    corpus = _read_lines(cfg.paths["corpus"])
    merged = cfg.model_overrides()
    vocab = Vocabulary.from_corpus(corpus, max_size=merged.pop("vocab_size", None))
    model = EncoderModel(cfg.encoder_config(len(vocab)), vocab, seed=cfg.seed)
    report = pretrain_toy(model, corpus, MaskingPolicy(mask_ratio=0.15),
                          PretrainConfig(epochs=args.epochs, lr=args.lr, seed=cfg.seed))
    model.freeze()
    save_encoder(cfg.paths["base_checkpoint"], model)
    _emit({"written": cfg.paths["base_checkpoint"], "vocab_size": len(vocab),
           "steps": report["steps"], "initial_loss": report["initial_loss"],
           "final_loss": report["final_loss"]})
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    required = ["corpus"]
    if cfg.expert == "V":
        required.append("bank")
    if not args.pretrain_toy:
        required.append("base_checkpoint")
    problems = validate(cfg, require_paths=tuple(required))
    if not cfg.path("adapter_checkpoint"):
        problems.append("paths.adapter_checkpoint: required but missing")
    if problems:
        return _fail_config(problems)

    corpus = _read_lines(cfg.paths["corpus"])
    if args.pretrain_toy:
        vocab = Vocabulary.from_corpus(corpus)
        model = EncoderModel(cfg.encoder_config(len(vocab)), vocab, seed=cfg.seed)
        pretrain_toy(model, corpus, MaskingPolicy(mask_ratio=0.15),
                     PretrainConfig(epochs=2, seed=cfg.seed))
        model.freeze()
        if cfg.path("base_checkpoint"):
            save_encoder(cfg.paths["base_checkpoint"], model)
    else:
        model = _load_model_for(cfg)
    if not model.frozen:
        model.freeze()

    plan = _build_plan(cfg, model)
    acfg = plan.adapters[plan.positions[0]].config
    provider = make_provider(cfg, acfg.d_c)
    bank = _load_bank_checked(cfg, acfg.d_c) if cfg.expert == "V" else None
    run = AdaptationRun(corpus=corpus, expert=cfg.expert, epochs=cfg.epochs,
                        batch_size=cfg.batch_size, lr=cfg.lr,
                        mask_ratio=cfg.mask_ratio, k=cfg.k,
                        feature_len=cfg.feature_len, seed=cfg.seed,
                        checkpoint_path=cfg.paths["adapter_checkpoint"],
                        metrics_path=cfg.path("metrics"),
                        fixed_clock=cfg.fixed_clock)
    report = run_adaptation(model, plan, run, provider, bank)
    _emit({"written": cfg.paths["adapter_checkpoint"], "steps": report["steps"],
           "final_loss": report["final_loss"], "metrics": cfg.path("metrics")})
    return 0


def _reason_features(cfg: RunConfig, model, plan, provider, bank):
    if cfg.expert == "V":
        rng = np.random.default_rng(cfg.seed)

        def features_for(text: str):
            return features_for_text(text, "V", bank, provider, cfg.k,
                                     cfg.feature_len, rng)
    else:
        def features_for(text: str):
            return features_for_text(text, "T", None, provider, cfg.k,
                                     cfg.feature_len, None)
    return features_for


def cmd_reason(args) -> int:
    cfg = load_config(args.config)
    required = ["base_checkpoint", "adapter_checkpoint"]
    if cfg.expert == "V":
        required.append("bank")
    problems = validate(cfg, require_paths=tuple(required))
    if problems:
        return _fail_config(problems)

    model = _load_model_for(cfg)
    plan = load_adapter_checkpoint(cfg.paths["adapter_checkpoint"])
    acfg = plan.adapters[plan.positions[0]].config
    provider = make_provider(cfg, acfg.d_c)
    bank = _load_bank_checked(cfg, acfg.d_c) if cfg.expert == "V" else None

    labels = load_labels(cfg.paths["labels"]) if cfg.path("labels") else list(COLOR_LABELS)
    label_set = LabelSet(labels, model.vocab)
    templates = (load_prompt_pack(cfg.paths["prompt_pack"])
                 if cfg.path("prompt_pack") else builtin_color_pack())

    items: list[tuple[str, str | None]] = []
    if args.item:
        items.append((args.item, None))
    if args.items:
        for line in _read_lines(args.items):
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            items.append((parts[0], parts[1] if len(parts) > 1 else None))
    if not items:
        raise ConfigError("reason: provide --item or --items")

    features_for = _reason_features(cfg, model, plan, provider, bank)
    correct = scored = 0
    for item, gold in items:
        result = zero_shot_classify(model, plan, item, templates, label_set,
                                    features_for)
        record = {"item": item, "label": result.label,
                  "scores": {lbl: float(s) for lbl, s in
                             zip(label_set.labels, result.scores)},
                  "per_template": result.per_template}
        if gold is not None:
            record["gold"] = gold
            scored += 1
            correct += int(result.label == gold)
        _emit(record)
    summary = {"summary": True, "n_items": len(items)}
    if scored:
        summary["accuracy"] = correct / scored
    _emit(summary)
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if args.n == 0:
        _emit({"n": 0})
        return 0
    required = ["base_checkpoint"]
    if cfg.expert == "V":
        required.append("bank")
    problems = validate(cfg, require_paths=tuple(required))
    if problems:
        return _fail_config(problems)

    model = _load_model_for(cfg)
    if cfg.path("adapter_checkpoint"):
        plan = load_adapter_checkpoint(cfg.paths["adapter_checkpoint"])
    else:
        plan = _build_plan(cfg, model)
    acfg = plan.adapters[plan.positions[0]].config
    provider = make_provider(cfg, acfg.d_c)
    bank = _load_bank_checked(cfg, acfg.d_c) if cfg.expert == "V" else None
    rng = np.random.default_rng(cfg.seed)

    texts = (_read_lines(cfg.paths["corpus"])[: args.n] if cfg.path("corpus") else [])
    while len(texts) < args.n:
        texts.append(f"a small object number {len(texts)} sits on the table .")

    base_ms, adapter_ms = [], []
    for text in texts[: args.n]:
        seq = build_model_input(model.vocab, text, max_len=model.cfg.max_seq_len)
        t0 = time.perf_counter()
        mlm_logits(model, encode(model, seq))
        t1 = time.perf_counter()
        feats = features_for_text(text, cfg.expert, bank, provider, cfg.k,
                                  cfg.feature_len, rng)
        mlm_logits(model, encode(model, seq, plan, feats))
        t2 = time.perf_counter()
        base_ms.append((t1 - t0) * 1000.0)
        adapter_ms.append((t2 - t1) * 1000.0)

    def stats(xs: list[float]) -> dict:
        arr = np.array(xs)
        return {"mean": float(arr.mean()), "median": float(np.median(arr)),
                "p95": float(np.percentile(arr, 95))}

    report = {"n": args.n, "base_ms": stats(base_ms), "adapter_ms": stats(adapter_ms),
              "ratio": float(np.mean(adapter_ms) / np.mean(base_ms))}
    _emit(report)
    return 0


def cmd_params(args) -> int:
    cfg = load_config(args.config)
    problems = validate(cfg)
    if problems:
        return _fail_config(problems)
    merged = cfg.model_overrides()
    vocab_size = merged.get("vocab_size", 256)
    enc_cfg = cfg.encoder_config(vocab_size)
    acfg = cfg.adapter_config(enc_cfg.d)
    n_adapters = len(cfg.positions or default_positions(cfg.expert, enc_cfg.n_layers))

    base = count_encoder_weights(enc_cfg)
    adapter_weights = count_adapter_params(acfg)["weights"]
    record = {
        "preset": cfg.preset,
        "base_layer_weights": base["per_layer"],
        "adapter_weights": adapter_weights,
        "adapter_to_layer_ratio": adapter_weights / base["per_layer"],
        "base_total_weights": base["total"],
        "n_adapters": n_adapters,
        "overhead_percent": 100.0 * n_adapters * adapter_weights / base["total"],
    }
    _emit(record)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xadapter",
        description="Feature-fusing adapter blocks on a frozen MLM encoder")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    bank = sub.add_parser("bank", help="build, query, or augment feature banks")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    b = bank_sub.add_parser("build", help="build a bank from a CSV of id,v0,v1,...")
    b.add_argument("--csv", required=True)
    b.add_argument("--dim", type=int, default=0, help="vector width (default: infer)")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bank_build)
    q = bank_sub.add_parser("query", help="top-k cosine search")
    q.add_argument("--bank", required=True)
    q.add_argument("--vector", help="comma-separated floats")
    q.add_argument("--vector-file", help="file whose first line is the vector")
    q.add_argument("-k", type=int, default=10)
    q.set_defaults(func=cmd_bank_query)
    a = bank_sub.add_parser("augment", help="append noisy copies of every row")
    a.add_argument("--bank", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--sigma", type=float, default=0.1)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_bank_augment)

    p = sub.add_parser("pretrain", help="train and freeze a toy base encoder")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_pretrain)

    ad = sub.add_parser("adapt", help="train adapter blocks on a frozen base")
    ad.add_argument("--config", required=True)
    ad.add_argument("--pretrain-toy", action="store_true",
                    help="build a toy base from the corpus instead of loading one")
    ad.set_defaults(func=cmd_adapt)

    r = sub.add_parser("reason", help="prompt-based zero-shot classification")
    r.add_argument("--config", required=True)
    r.add_argument("--item")
    r.add_argument("--items", help="file with one item per line (optional TAB gold label)")
    r.set_defaults(func=cmd_reason)

    be = sub.add_parser("bench", help="latency of plain vs adapter forward")
    be.add_argument("--config", required=True)
    be.add_argument("-n", type=int, default=20)
    be.set_defaults(func=cmd_bench)

    pa = sub.add_parser("params", help="parameter accounting for the configured plan")
    pa.add_argument("--config", required=True)
    pa.set_defaults(func=cmd_params)
    return parser


def _setup_logging() -> None:
    # bind to the current sys.stderr on every invocation (also under pytest)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.INFO)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, BankFormatError, TemplateError) as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
