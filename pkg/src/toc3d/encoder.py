"""Compressed transformer backbone with a bridge-token dynamic router.

Salient tokens plus one bridge token (the score-weighted mean of the
redundant tokens) go through the encoder blocks; redundant tokens skip them
and receive the updated bridge token; everything is scattered back to the
original token order at the end of each segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mqts import (
    CompressionSchedule,
    ImportanceScore,
    ScorerParams,
    TokenGrid,
    TokenPartition,
    compute_importance,
    plan_updates,
    read_weight_file,
    sample_history_queries,
    split_tokens,
    write_weight_file,
)
from .motion import align_queries
from .numerics import LN_EPS, Linear, gelu, layer_norm, make_rng, softmax
from .scene import HistoryQuerySet

logger = logging.getLogger(__name__)

ENC_MAGIC = b"TOC3D-ENC v1\n"

WINDOW = "window"
GLOBAL = "global"


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    dim: int = 256
    heads: int = 8
    mlp_ratio: float = 4.0
    window_size: int = 4
    global_attn_layers: tuple[int, ...] = (2, 5, 8, 11)
    patch: int = 16

    def __post_init__(self):
        object.__setattr__(self, "global_attn_layers", tuple(int(i) for i in self.global_attn_layers))
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.layers < 1 or self.window_size < 1:
            raise ValueError("layers and window_size must be positive")
        if any(not 0 <= i < self.layers for i in self.global_attn_layers):
            raise ValueError("global attention layer index out of range")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    def kind(self, layer: int) -> str:
        return GLOBAL if layer in self.global_attn_layers else WINDOW

    @classmethod
    def vit_l(cls) -> "EncoderConfig":
        return cls(24, 1024, 16, 4.0, 16, (5, 11, 17, 23), 16)

    @classmethod
    def vit_b(cls) -> "EncoderConfig":
        return cls(12, 768, 12, 4.0, 14, (2, 5, 8, 11), 16)

    @classmethod
    def desk(cls, layers: int = 12, dim: int = 256, heads: int = 8, window_size: int = 4) -> "EncoderConfig":
        # a global layer closes every quarter of the stack
        q = max(1, layers // 4)
        glob = tuple(i for i in range(q - 1, layers, q))
        return cls(layers, dim, heads, 4.0, window_size, glob, 16)


@dataclass
class BlockParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    qkv: Linear
    proj: Linear
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng, dim: int, hidden: int) -> "BlockParams":
        return cls(np.ones(dim), np.zeros(dim), Linear.init(rng, dim, 3 * dim), Linear.init(rng, dim, dim),
                   np.ones(dim), np.zeros(dim), Linear.init(rng, dim, hidden), Linear.init(rng, hidden, dim))

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "BlockParams":
        return cls(np.ones(dim), np.zeros(dim), Linear.zeros(dim, 3 * dim), Linear.zeros(dim, dim),
                   np.ones(dim), np.zeros(dim), Linear.zeros(dim, hidden), Linear.zeros(hidden, dim))

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            f"{prefix}ln1.g": self.ln1_g, f"{prefix}ln1.b": self.ln1_b,
            f"{prefix}qkv.weight": self.qkv.weight, f"{prefix}qkv.bias": self.qkv.bias,
            f"{prefix}proj.weight": self.proj.weight, f"{prefix}proj.bias": self.proj.bias,
            f"{prefix}ln2.g": self.ln2_g, f"{prefix}ln2.b": self.ln2_b,
            f"{prefix}fc1.weight": self.fc1.weight, f"{prefix}fc1.bias": self.fc1.bias,
            f"{prefix}fc2.weight": self.fc2.weight, f"{prefix}fc2.bias": self.fc2.bias,
        }

    def astype(self, dtype) -> "BlockParams":
        return BlockParams(self.ln1_g.astype(dtype), self.ln1_b.astype(dtype), self.qkv.astype(dtype),
                           self.proj.astype(dtype), self.ln2_g.astype(dtype), self.ln2_b.astype(dtype),
                           self.fc1.astype(dtype), self.fc2.astype(dtype))


@dataclass
class EncoderWeights:
    blocks: list[BlockParams]

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int) -> "EncoderWeights":
        rng = make_rng(seed)
        return cls([BlockParams.init(rng, cfg.dim, cfg.hidden) for _ in range(cfg.layers)])

    @classmethod
    def zeros(cls, cfg: EncoderConfig) -> "EncoderWeights":
        return cls([BlockParams.zeros(cfg.dim, cfg.hidden) for _ in range(cfg.layers)])

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights([b.astype(dtype) for b in self.blocks])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.arrays(f"blocks.{i}."))
        return out


def save_encoder(cfg: EncoderConfig, weights: EncoderWeights, path) -> None:
    write_weight_file(path, ENC_MAGIC, {"config": asdict(cfg)}, weights.arrays())


def load_encoder(path) -> tuple[EncoderConfig, EncoderWeights]:
    header, a = read_weight_file(path, ENC_MAGIC)
    cfg = EncoderConfig(**header["config"])
    blocks = []
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        blocks.append(BlockParams(
            a[p + "ln1.g"], a[p + "ln1.b"], Linear(a[p + "qkv.weight"], a[p + "qkv.bias"]),
            Linear(a[p + "proj.weight"], a[p + "proj.bias"]), a[p + "ln2.g"], a[p + "ln2.b"],
            Linear(a[p + "fc1.weight"], a[p + "fc1.bias"]), Linear(a[p + "fc2.weight"], a[p + "fc2.bias"]),
        ))
    return cfg, EncoderWeights(blocks)


# ---------------------------------------------------------------------------
# attention


@dataclass
class WindowPlan:
    """Padding-free windows over the tokens present, grouped by window size.

    ``groups`` holds one ``(n_windows, size)`` index matrix per distinct
    window population, so windows of equal size are attended in one batch.
    """

    n_tokens: int
    groups: list[np.ndarray]

    @classmethod
    def build(cls, lattice: np.ndarray, window_size: int) -> "WindowPlan":
        lattice = np.asarray(lattice, dtype=int)
        if lattice.ndim != 2 or lattice.shape[1] != 3:
            raise ValueError(f"window attention needs (M, 3) lattice coordinates, got {lattice.shape}")
        if len(lattice) == 0:
            return cls(0, [])
        wr = lattice[:, 1] // window_size
        wc = lattice[:, 2] // window_size
        key = (lattice[:, 0] * (wr.max() + 1) + wr) * (wc.max() + 1) + wc
        order = np.argsort(key, kind="stable")
        _, starts, counts = np.unique(key[order], return_index=True, return_counts=True)
        groups = []
        for size in np.unique(counts):
            sel = starts[counts == size]
            groups.append(order[sel[:, None] + np.arange(size)[None, :]])
        return cls(len(lattice), groups)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    m, c = x.shape
    return x.reshape(m, heads, c // heads).transpose(1, 0, 2)


def _attention(q, k, v, kind: str, plan: WindowPlan | None, bridge: bool) -> np.ndarray:
    """Multi-head attention on ``(heads, M, d)`` arrays; returns ``(heads, M, d)``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    if kind == GLOBAL:
        return softmax((q @ k.transpose(0, 2, 1)) * scale) @ v
    m = q.shape[1]
    out = np.empty_like(q)
    n_lat = m - 1 if bridge else m
    if plan is None or plan.n_tokens != n_lat:
        raise ValueError(
            f"window attention needs lattice coordinates for all {n_lat} non-bridge tokens"
        )
    for idx in plan.groups:
        kidx = idx if not bridge else np.concatenate([idx, np.full((len(idx), 1), m - 1)], axis=1)
        qw = q[:, idx]
        kw = k[:, kidx]
        vw = v[:, kidx]
        p = softmax((qw @ kw.transpose(0, 1, 3, 2)) * scale)
        out[:, idx] = p @ vw
    if bridge:
        # the bridge token sees every token
        pb = softmax((q[:, -1:] @ k.transpose(0, 2, 1)) * scale)
        out[:, -1:] = pb @ v
    return out


def _affine_ln(x, g, b):
    return layer_norm(x, LN_EPS) * g + b


def encoder_block(tokens: np.ndarray, params: BlockParams, kind: str, lattice=None, heads: int = 8,
                  window_size: int = 4, bridge: bool = False) -> np.ndarray:
    """Pre-norm transformer block.

    ``lattice`` is either a ``WindowPlan`` or ``(M, 3)`` coordinates of the
    non-bridge rows; it is required for window blocks. With ``bridge`` the
    last row is the bridge token, which joins every window.
    """
    if kind not in (WINDOW, GLOBAL):
        raise ValueError(f"unknown block kind {kind!r}")
    plan = lattice
    if kind == WINDOW and lattice is not None and not isinstance(lattice, WindowPlan):
        plan = WindowPlan.build(lattice, window_size)
    x = tokens
    h = _affine_ln(x, params.ln1_g, params.ln1_b)
    qkv = params.qkv(h)
    c = x.shape[1]
    q, k, v = (_split_heads(qkv[:, i * c:(i + 1) * c], heads) for i in range(3))
    a = _attention(q, k, v, kind, plan, bridge)
    a = a.transpose(1, 0, 2).reshape(x.shape)
    x = x + params.proj(a)
    h = _affine_ln(x, params.ln2_g, params.ln2_b)
    return x + params.fc2(gelu(params.fc1(h)))


# ---------------------------------------------------------------------------
# router


def make_bridge(t_r: np.ndarray, s_r: np.ndarray) -> np.ndarray:
    """Score-weighted mean of the redundant tokens, shape ``(1, C)``."""
    t_r = np.asarray(t_r)
    s_r = np.asarray(s_r, dtype=t_r.dtype).reshape(-1)
    if len(t_r) == 0:
        raise ValueError("a bridge token needs at least one redundant token")
    if len(s_r) != len(t_r):
        raise ValueError(f"{len(t_r)} redundant tokens but {len(s_r)} scores")
    total = s_r.sum()
    if total <= 0:
        logger.warning("all redundant scores are zero; bridge falls back to the plain mean")
        return t_r.mean(axis=0, keepdims=True)
    return (s_r @ t_r)[None, :] / total


@dataclass
class Block:
    params: BlockParams
    kind: str


def regular_path(t_s: np.ndarray, t_b: np.ndarray | None, blocks: list[Block], lattice=None,
                 heads: int = 8, window_size: int = 4):
    """Run ``[t_s; t_b]`` through ``blocks`` and split the result again."""
    has_bridge = t_b is not None
    x = np.concatenate([t_s, t_b], axis=0) if has_bridge else t_s
    plan = None
    if lattice is not None and any(b.kind == WINDOW for b in blocks):
        plan = lattice if isinstance(lattice, WindowPlan) else WindowPlan.build(lattice, window_size)
    for b in blocks:
        x = encoder_block(x, b.params, b.kind, plan, heads, window_size, has_bridge)
    if has_bridge:
        return x[:-1], x[-1:]
    return x, None


def free_path_update(t_r: np.ndarray, t_b: np.ndarray) -> np.ndarray:
    return t_r + np.asarray(t_b).reshape(1, -1)


def rearrange(partition: TokenPartition, t_s: np.ndarray, t_r: np.ndarray, provenance=None):
    """Scatter salient / redundant rows back to their original positions."""
    s_idx, r_idx = partition.salient_idx, partition.redundant_idx
    if len(s_idx) != len(t_s) or len(r_idx) != len(t_r):
        raise ValueError("partition sizes do not match the token blocks")
    n = len(s_idx) + len(r_idx)
    hits = np.bincount(np.concatenate([s_idx, r_idx]).astype(int), minlength=n)
    if len(hits) != n or np.any(hits != 1):
        raise ValueError("partition indices collide or leave gaps")
    width = t_s.shape[1] if len(t_s) else t_r.shape[1]
    out = np.empty((n, width), dtype=np.result_type(t_s, t_r))
    out[s_idx] = t_s
    out[r_idx] = t_r
    if provenance is not None:
        return TokenGrid(out, provenance)
    return out


# ---------------------------------------------------------------------------
# full forward


@dataclass
class ForwardTrace:
    score_layers: list[int] = field(default_factory=list)
    segment_widths: list[int] = field(default_factory=list)
    layer_widths: list[int] = field(default_factory=list)
    partitions: list[TokenPartition] = field(default_factory=list)
    scores: list[ImportanceScore] = field(default_factory=list)

    @property
    def n_score_updates(self) -> int:
        return len(self.score_layers)


def _blocks(cfg: EncoderConfig, weights: EncoderWeights, layers: range) -> list[Block]:
    return [Block(weights.blocks[i], cfg.kind(i)) for i in layers]


def forward_baseline(t0: TokenGrid, enc: EncoderConfig, weights: EncoderWeights) -> TokenGrid:
    """Plain encoder over every token."""
    x, _ = regular_path(t0.tokens, None, _blocks(enc, weights, range(enc.layers)), t0.provenance,
                        enc.heads, enc.window_size)
    return TokenGrid(x, t0.provenance)


def forward_backbone(
    t0: TokenGrid,
    queries: HistoryQuerySet,
    schedule: CompressionSchedule,
    scorer: ScorerParams | None,
    enc: EncoderConfig,
    weights: EncoderWeights,
    trace: ForwardTrace | None = None,
    bridge_update: str = "full",
) -> TokenGrid:
    """Compressed forward pass; output rows keep the original token order.

    ``bridge_update="full"`` adds the updated bridge token to every redundant
    token; ``"delta"`` adds only its change across the segment.
    """
    if bridge_update not in ("full", "delta"):
        raise ValueError(f"bridge_update must be 'full' or 'delta', got {bridge_update!r}")
    if len(weights.blocks) != enc.layers:
        raise ValueError(f"{len(weights.blocks)} weight blocks for a {enc.layers}-layer encoder")
    segments = plan_updates(schedule, enc.layers)
    aligned = None
    if len(schedule):
        if scorer is None:
            raise ValueError("a non-empty schedule needs scorer parameters")
        if scorer.token_dim != enc.dim:
            raise ValueError(f"scorer expects {scorer.token_dim}-d tokens, encoder is {enc.dim}-d")
        aligned = align_queries(sample_history_queries(queries, scorer.n_queries), scorer.motion)

    x = t0.tokens
    prov = t0.provenance
    for seg in segments:
        blocks = _blocks(enc, weights, seg.layers)
        if not seg.update:
            x, _ = regular_path(x, None, blocks, prov, enc.heads, enc.window_size)
            if trace is not None:
                trace.segment_widths.append(len(x))
                trace.layer_widths.extend([len(x)] * len(blocks))
            continue
        score = compute_importance(x, aligned, scorer, seg.start)
        part = split_tokens(x, score, seg.rho)
        t_s = x[part.salient_idx]
        t_r = x[part.redundant_idx]
        t_b = make_bridge(t_r, score.scores[part.redundant_idx]) if len(t_r) else None
        t_s2, t_b2 = regular_path(t_s, t_b, blocks, prov[part.salient_idx], enc.heads, enc.window_size)
        if t_b2 is not None:
            t_r = free_path_update(t_r, t_b2 - t_b if bridge_update == "delta" else t_b2)
        x = rearrange(part, t_s2, t_r)
        if trace is not None:
            width = len(t_s) + (t_b is not None)
            trace.score_layers.append(seg.start)
            trace.segment_widths.append(width)
            trace.layer_widths.extend([width] * len(blocks))
            trace.partitions.append(part)
            trace.scores.append(score)
    return TokenGrid(x, prov)
