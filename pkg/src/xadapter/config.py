"""JSON run configuration shared by the CLI commands.

The environment variable ``XADAPTER_SEED`` overrides the configured seed so
CI sweeps can vary it without editing files.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .adapter import AdapterConfig, T_EXPERT, V_EXPERT
from .encoder import EncoderConfig
from .errors import ConfigError

MODEL_PRESETS = {
    "desk": {"d": 64, "n_layers": 4, "n_heads": 4, "ffn_dim": 256, "max_seq_len": 64},
    "reference": {"d": 768, "n_layers": 12, "n_heads": 12, "ffn_dim": 3072,
                  "vocab_size": 30522, "max_seq_len": 512},
}

ADAPTER_PRESETS = {
    "desk": {"r": 32, "n": 4, "ffn_dim": 128, "d_c": 16},
    "reference": {"r": 512, "n": 8, "ffn_dim": 2048, "d_c": 512},
}


@dataclass
class RunConfig:
    seed: int = 0
    expert: str = V_EXPERT
    preset: str = "desk"
    model: dict = field(default_factory=dict)     # overrides on the preset
    adapter: dict = field(default_factory=dict)
    positions: list[int] | None = None            # None = per-expert default
    k: int = 10
    feature_len: int = 16
    mask_ratio: float = 0.0                       # 0 = per-expert default
    epochs: int = 0                               # 0 = per-expert default
    batch_size: int = 8
    lr: float = 1e-4
    provider: dict = field(default_factory=lambda: {"kind": "stub"})
    paths: dict = field(default_factory=dict)
    fixed_clock: bool = False

    def model_overrides(self) -> dict:
        if self.preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        merged = dict(MODEL_PRESETS[self.preset])
        merged.update(self.model)
        return merged

    def adapter_config(self, d: int) -> AdapterConfig:
        merged = dict(ADAPTER_PRESETS.get(self.preset, ADAPTER_PRESETS["desk"]))
        merged.update(self.adapter)
        merged["d"] = d
        return AdapterConfig(**merged)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        merged = self.model_overrides()
        merged["vocab_size"] = vocab_size
        return EncoderConfig(**merged)

    def path(self, key: str) -> str | None:
        return self.paths.get(key)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**raw)
    env_seed = os.environ.get("XADAPTER_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def validate(cfg: RunConfig, require_paths: tuple[str, ...] = ()) -> list[str]:
    """Collect every violation instead of failing on the first."""
    problems: list[str] = []
    if cfg.expert not in (V_EXPERT, T_EXPERT):
        problems.append(f"expert: must be '{V_EXPERT}' or '{T_EXPERT}', got {cfg.expert!r}")
    if cfg.preset not in MODEL_PRESETS:
        problems.append(f"preset: unknown preset {cfg.preset!r}")
    if cfg.k < 1:
        problems.append(f"k: must be >= 1, got {cfg.k}")
    if cfg.feature_len < 1:
        problems.append(f"feature_len: must be >= 1, got {cfg.feature_len}")
    if cfg.mask_ratio and not 0.0 < cfg.mask_ratio < 1.0:
        problems.append(f"mask_ratio: must lie in (0,1), got {cfg.mask_ratio}")
    if cfg.batch_size < 1:
        problems.append(f"batch_size: must be >= 1, got {cfg.batch_size}")
    if cfg.lr <= 0:
        problems.append(f"lr: must be positive, got {cfg.lr}")
    for key in require_paths:
        value = cfg.paths.get(key)
        if not value:
            problems.append(f"paths.{key}: required but missing")
        elif not os.path.exists(value):
            problems.append(f"paths.{key}: {value} does not exist")
    if cfg.positions is not None:
        try:
            merged = cfg.model_overrides()
            n_layers = merged.get("n_layers", 4)
            if len(set(cfg.positions)) != len(cfg.positions):
                problems.append(f"positions: duplicates in {cfg.positions}")
            for p in cfg.positions:
                if not 1 <= p <= n_layers:
                    problems.append(f"positions: {p} outside 1..{n_layers}")
        except ConfigError as exc:
            problems.append(str(exc))
    return problems


def make_provider(cfg: RunConfig, d_c: int):
    spec = dict(cfg.provider)
    kind = spec.pop("kind", "stub")
    if kind == "stub":
        from .textfeat import HashStubProvider

        return HashStubProvider(dim=spec.pop("dim", d_c), salt=spec.pop("salt", 0))
    if kind == "planted":
        from .planted import rebuild_provider

        return rebuild_provider(spec.pop("seed", cfg.seed))
    raise ConfigError(f"unknown provider kind {kind!r}")
