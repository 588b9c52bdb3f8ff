"""The cross-attention adapter block and its insertion plan.

The block projects hidden states down to width ``r``, fuses a matrix of
external features through multi-head cross-attention, runs a small FFN, maps
back up to the model width, and adds the result to the input through a
learnable scalar gate — all wrapped in layer norms so a fresh block behaves
as a plain layer norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractViolation, DimensionError
from .numerics import Linear, Norm, Tensor

V_EXPERT = "V"
T_EXPERT = "T"

# Scores at masked key columns are replaced with this; exp() underflows to
# exactly zero, so padded feature rows can never receive attention mass.
_MASKED_SCORE = -1.0e30


@dataclass(frozen=True)
class AdapterConfig:
    """Dimensions of one adapter block.

    Defaults are desk scale; ``reference()`` gives the full-size preset used
    for parameter accounting.
    """

    d: int = 64          # width of the host encoder
    r: int = 32          # adapter hidden width
    n: int = 4           # cross-attention heads
    ffn_dim: int = 128
    d_c: int = 16        # external feature width
    s_init: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if min(self.d, self.r, self.n, self.ffn_dim, self.d_c) <= 0:
            raise ConfigError("adapter dimensions must be positive")
        if self.r % self.n != 0:
            raise ConfigError(f"adapter width r={self.r} not divisible by heads n={self.n}")

    @property
    def head_dim(self) -> int:
        return self.r // self.n

    @classmethod
    def reference(cls, d: int = 768) -> "AdapterConfig":
        return cls(d=d, r=512, n=8, ffn_dim=2048, d_c=512)


@dataclass
class FeatureMatrix:
    """External feature rows consumed by cross-attention.

    ``valid_len`` marks the number of real rows; anything beyond it is pad
    and is masked out of the attention. ``token_type`` optionally tags each
    row with the sentence (0 or 1) it describes.
    """

    rows: np.ndarray
    token_type: np.ndarray | None = None
    valid_len: int | None = None
    source: str = V_EXPERT

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ContractViolation(f"FeatureMatrix needs at least one row, got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ContractViolation("FeatureMatrix rows must be finite")
        if self.valid_len is None:
            self.valid_len = self.rows.shape[0]
        if not 1 <= self.valid_len <= self.rows.shape[0]:
            raise ContractViolation(
                f"valid_len {self.valid_len} out of range for {self.rows.shape[0]} rows")
        if self.token_type is not None:
            self.token_type = np.asarray(self.token_type, dtype=np.int64)
            if self.token_type.shape != (self.rows.shape[0],):
                raise ContractViolation("token_type must tag every feature row")

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


class XAdapterLayer:
    """One adapter block; see ``adapter_forward`` for the data path."""

    def __init__(self, config: AdapterConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.down = Linear(c.d, c.r, rng)        # host width -> adapter width
        self.feat_proj = Linear(c.d_c, c.r, rng)  # external features -> adapter width
        self.q = [Linear(c.r, c.head_dim, rng) for _ in range(c.n)]
        self.k = [Linear(c.r, c.head_dim, rng) for _ in range(c.n)]
        self.v = [Linear(c.r, c.head_dim, rng) for _ in range(c.n)]
        self.attn_out = Linear(c.r, c.r, rng)
        self.ffn_in = Linear(c.r, c.ffn_dim, rng)
        self.ffn_out = Linear(c.ffn_dim, c.r, rng)
        # Zero-initialized so a fresh block is exactly x -> LN(x).
        self.up = Linear(c.r, c.d, rng, zero=True)
        self.scale = Tensor(np.asarray(float(c.s_init)), requires_grad=True)
        bound = math.sqrt(6.0 / (2 + c.r))
        self.type_emb = Tensor(rng.uniform(-bound, bound, size=(2, c.r)),
                               requires_grad=True)
        self.ln_attn = Norm(c.r, c.ln_eps)
        self.ln_ffn = Norm(c.r, c.ln_eps)
        self.ln_out = Norm(c.d, c.ln_eps)

    def named_parameters(self, prefix: str = ""):
        p = prefix
        yield from self.down.named(p + "down")
        yield from self.feat_proj.named(p + "feat_proj")
        for i in range(self.config.n):
            yield from self.q[i].named(f"{p}attn.h{i}.q")
            yield from self.k[i].named(f"{p}attn.h{i}.k")
            yield from self.v[i].named(f"{p}attn.h{i}.v")
        yield from self.attn_out.named(p + "attn.out")
        yield from self.ffn_in.named(p + "ffn.in")
        yield from self.ffn_out.named(p + "ffn.out")
        yield from self.up.named(p + "up")
        yield p + "scale", self.scale
        yield p + "type_emb", self.type_emb
        yield from self.ln_attn.named(p + "ln_attn")
        yield from self.ln_ffn.named(p + "ln_ffn")
        yield from self.ln_out.named(p + "ln_out")


def _feature_inputs(layer: XAdapterLayer, feats: FeatureMatrix) -> tuple[Tensor, Tensor, np.ndarray | None]:
    """Project features; returns (key input, value input, valid row mask)."""
    rows = feats.rows
    valid = None
    if feats.valid_len < feats.count:
        valid = np.zeros(feats.count)
        valid[: feats.valid_len] = 1.0
        rows = rows * valid[:, None]  # pad rows carry no signal anywhere
    projected = layer.feat_proj(Tensor(rows))
    key_input = projected
    if feats.token_type is not None:
        key_input = nm.add(projected, nm.gather_rows(layer.type_emb, feats.token_type))
    return key_input, projected, valid


def cross_attention(layer: XAdapterLayer, q: Tensor, feats: FeatureMatrix) -> Tensor:
    """Multi-head cross-attention of queries (width r) over external features."""
    c = layer.config
    if q.data.ndim != 2 or q.shape[1] != c.r:
        raise DimensionError(f"cross_attention: query width {q.shape} != r={c.r}")
    if feats.dim != c.d_c:
        raise DimensionError(
            f"cross_attention: feature width {feats.dim} != configured d_c={c.d_c}")
    key_input, value_input, valid = _feature_inputs(layer, feats)

    score_scale = Tensor(np.asarray(1.0 / math.sqrt(c.head_dim)))
    if valid is not None:
        keep = Tensor(valid)
        fill = Tensor((1.0 - valid) * _MASKED_SCORE)
    heads = []
    for i in range(c.n):
        qi = layer.q[i](q)
        ki = layer.k[i](key_input)
        vi = layer.v[i](value_input)
        scores = nm.mul(nm.matmul(qi, nm.transpose(ki)), score_scale)
        if valid is not None:
            scores = nm.add(nm.mul(scores, keep), fill)
        heads.append(nm.matmul(nm.softmax_rows(scores), vi))
    return layer.attn_out(nm.concat_cols(heads))


def adapter_forward(layer: XAdapterLayer, x: Tensor, feats: FeatureMatrix | None) -> Tensor:
    """Run the block on hidden states [len x d].

    Path: queries = down(x); fused = LN(cross_attn + queries); then an FFN
    with shortcut and LN; finally LN(scale * up(fused) + x).
    """
    c = layer.config
    if feats is None:
        raise ContractViolation("adapter_forward requires a nonempty feature matrix")
    if x.data.ndim != 2 or x.shape[1] != c.d:
        raise DimensionError(f"adapter_forward: input width {x.shape} != d={c.d}")
    queries = layer.down(x)
    attended = cross_attention(layer, queries, feats)
    fused = layer.ln_attn(nm.add(attended, queries))
    expanded = layer.ffn_out(nm.gelu(layer.ffn_in(fused)))
    fused = layer.ln_ffn(nm.add(fused, expanded))
    contribution = nm.mul(layer.up(fused), layer.scale)
    return layer.ln_out(nm.add(contribution, x))


def init_adapter(config: AdapterConfig, seed: int = 0) -> XAdapterLayer:
    """Fresh adapter: Glorot-uniform matrices, zero up-projection, gate = s_init."""
    return XAdapterLayer(config, np.random.default_rng(seed))


def count_adapter_params(config: AdapterConfig) -> dict[str, int]:
    """Closed-form parameter counts for one block, weights vs the rest."""
    c = config
    weights = (c.d * c.r                 # down-projection
               + c.d_c * c.r             # feature projection
               + 3 * c.r * c.r           # query/key/value heads combined
               + c.r * c.r               # attention output
               + 2 * c.r * c.ffn_dim     # FFN in + out
               + c.r * c.d               # up-projection
               + 2 * c.r)                # key token-type embedding
    biases = (c.r + c.r + 3 * c.r + c.r + c.ffn_dim + c.r + c.d  # per projection
              + 1)                                               # scalar gate
    layer_norm = 2 * (2 * c.r) + 2 * c.d
    return {"weights": weights - 2 * c.r,  # type embedding reported separately
            "type_embedding": 2 * c.r,
            "biases": biases,
            "layer_norm": layer_norm,
            "total": weights + biases + layer_norm}


@dataclass
class InsertionPlan:
    """Maps transformer layer indices (1-based) to adapter instances."""

    kind: str
    adapters: dict[int, XAdapterLayer] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (V_EXPERT, T_EXPERT):
            raise ConfigError(f"unknown expert kind {self.kind!r}")

    @property
    def positions(self) -> list[int]:
        return sorted(self.adapters)

    def __len__(self) -> int:
        return len(self.adapters)

    def named_parameters(self):
        for pos in self.positions:
            yield from self.adapters[pos].named_parameters(prefix=f"adapter.p{pos}.")

    def parameter_set(self, tagged_features: bool = False) -> nm.ParameterSet:
        """All adapter parameters, trainable.

        The key token-type embedding only sees gradients when feature rows
        carry segment tags, so it stays out of the trainable mask unless
        ``tagged_features`` is set.
        """
        ps = nm.ParameterSet()
        ps.extend(self.named_parameters(), trainable=True)
        if not tagged_features:
            for path in ps.paths():
                if path.endswith("type_emb"):
                    ps.set_trainable(path, False)
        return ps


def default_positions(kind: str, n_layers: int) -> list[int]:
    """V-expert: one block before the last layer. T-expert: before the last two."""
    if kind == V_EXPERT or n_layers == 1:
        return [n_layers]
    return [n_layers - 1, n_layers]


def make_insertion_plan(positions: list[int], kind: str, config: AdapterConfig,
                        n_layers: int, seed: int = 0) -> InsertionPlan:
    """Build a plan with a fresh adapter at each position (1-based indices)."""
    if len(set(positions)) != len(positions):
        raise ConfigError(f"duplicate insertion positions: {positions}")
    for p in positions:
        if not 1 <= p <= n_layers:
            raise ConfigError(f"insertion position {p} outside 1..{n_layers}")
    plan = InsertionPlan(kind=kind)
    for offset, p in enumerate(sorted(positions)):
        plan.adapters[p] = init_adapter(config, seed=seed + offset)
    return plan
