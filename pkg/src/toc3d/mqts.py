"""Motion query-guided token selection.

Scores every image token by attending it against motion-aligned history
queries, splits tokens into salient / redundant sets by top-k, schedules the
score updates across encoder layers and trains the scorer with a Gaussian
focal loss using hand-written reverse-mode gradients.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import (
    MotionNorm,
    MotionParams,
    PEConfig,
    RefMLP,
    align_queries,
    align_refpoints,
    motion_vector,
    positional_encode,
    scale_refpoints,
)
from .numerics import Linear, gelu, gelu_grad, layer_norm, layer_norm_backward, make_rng, sigmoid
from .scene import HistoryQuerySet, SceneRecord

logger = logging.getLogger(__name__)

SCORER_MAGIC = b"TOC3D-SCORER v1\n"
FOCAL_EPS = 1e-6


class TrainingDivergedError(FloatingPointError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (N, C)
    provenance: np.ndarray  # (N, 3) view, row, col

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.provenance = np.asarray(self.provenance, dtype=int)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (N, C), got {self.tokens.shape}")
        if self.provenance.shape != (len(self.tokens), 3):
            raise ValueError(f"provenance must be ({len(self.tokens)}, 3), got {self.provenance.shape}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def is_bijective(self) -> bool:
        return len(np.unique(self.provenance, axis=0)) == len(self.provenance)


@dataclass
class ImportanceScore:
    scores: np.ndarray
    computed_at_layer: int = 0
    attention: np.ndarray | None = None
    logits: np.ndarray | None = None


@dataclass
class TokenPartition:
    salient_idx: np.ndarray
    redundant_idx: np.ndarray
    rho: float

    @property
    def n_tokens(self) -> int:
        return len(self.salient_idx) + len(self.redundant_idx)


@dataclass(frozen=True)
class CompressionSchedule:
    update_layers: tuple[int, ...] = ()
    ratios: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "update_layers", tuple(int(x) for x in self.update_layers))
        object.__setattr__(self, "ratios", tuple(float(x) for x in self.ratios))
        if len(self.update_layers) != len(self.ratios):
            raise ValueError("update_layers and ratios must have the same length")
        if any(b <= a for a, b in zip(self.update_layers, self.update_layers[1:])):
            raise ValueError(f"update layers must be strictly increasing, got {self.update_layers}")
        if any(layer < 0 for layer in self.update_layers):
            raise ValueError("update layers must be non-negative")
        if any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise ValueError(f"keeping ratios must lie in (0, 1], got {self.ratios}")

    def __len__(self) -> int:
        return len(self.update_layers)

    @classmethod
    def preset(cls, name: str, layers: int = 24) -> "CompressionSchedule":
        """``fast`` / ``faster`` / ``none`` at quarter-depth update points."""
        q = layers // 4
        locs = (q, 2 * q, 3 * q)
        ratios = {"fast": (0.7, 0.5, 0.5), "faster": (0.5, 0.4, 0.3)}
        if name == "none":
            return cls()
        if name not in ratios:
            raise ValueError(f"unknown schedule preset {name!r}")
        return cls(locs, ratios[name])


@dataclass(frozen=True)
class Segment:
    start: int
    stop: int
    rho: float
    update: bool

    @property
    def layers(self) -> range:
        return range(self.start, self.stop)


def plan_updates(schedule: CompressionSchedule, total_layers: int) -> list[Segment]:
    """Tile ``[0, total_layers)`` into segments that share one importance score."""
    if schedule.update_layers and schedule.update_layers[-1] >= total_layers:
        raise ValueError(
            f"update layer {schedule.update_layers[-1]} is outside a {total_layers}-layer encoder"
        )
    segments = []
    bounds = list(schedule.update_layers) + [total_layers]
    first = bounds[0]
    if first > 0:
        segments.append(Segment(0, first, 1.0, False))
    for i, layer in enumerate(schedule.update_layers):
        segments.append(Segment(layer, bounds[i + 1], schedule.ratios[i], True))
    return segments


# ---------------------------------------------------------------------------
# scorer parameters


@dataclass
class ScorerParams:
    token_proj: Linear
    score_head: Linear
    motion: MotionParams
    version: int = field(default=0, compare=False)

    @classmethod
    def init(cls, seed: int, token_dim: int = 256, query_dim: int = 256, n_queries: int = 64,
             pe: PEConfig = PEConfig(), norm: MotionNorm = MotionNorm()) -> "ScorerParams":
        rng = make_rng(seed)
        token_proj = Linear.init(rng, token_dim, query_dim)
        score_head = Linear.init(rng, n_queries, 1)
        # focal-loss prior: start every token at p = 0.1 so the many negatives don't swamp early steps
        score_head.bias[:] = -math.log(9.0)
        return cls(token_proj, score_head, MotionParams.init(rng, query_dim, pe, norm))

    @property
    def token_dim(self) -> int:
        return self.token_proj.in_dim

    @property
    def query_dim(self) -> int:
        return self.token_proj.out_dim

    @property
    def n_queries(self) -> int:
        return self.score_head.in_dim

    def arrays(self) -> dict[str, np.ndarray]:
        """Ordered name -> array views (mutating them mutates the params)."""
        m = self.motion
        return {
            "token_proj.weight": self.token_proj.weight,
            "token_proj.bias": self.token_proj.bias,
            "score_head.weight": self.score_head.weight,
            "score_head.bias": self.score_head.bias,
            "w_gamma.weight": m.w_gamma.weight,
            "w_gamma.bias": m.w_gamma.bias,
            "w_beta.weight": m.w_beta.weight,
            "w_beta.bias": m.w_beta.bias,
            "ref_mlp.fc1.weight": m.ref_mlp.fc1.weight,
            "ref_mlp.fc1.bias": m.ref_mlp.fc1.bias,
            "ref_mlp.fc2.weight": m.ref_mlp.fc2.weight,
            "ref_mlp.fc2.bias": m.ref_mlp.fc2.bias,
        }

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "ScorerParams":
        m = self.motion
        motion = MotionParams(m.w_gamma.copy(), m.w_beta.copy(),
                              RefMLP(m.ref_mlp.fc1.copy(), m.ref_mlp.fc2.copy()), m.pe, m.norm)
        return ScorerParams(self.token_proj.copy(), self.score_head.copy(), motion)


# ---------------------------------------------------------------------------
# forward


def sample_history_queries(qs: HistoryQuerySet, n_q: int) -> HistoryQuerySet:
    """Top-``n_q`` queries by confidence; ties keep the lower original index."""
    if n_q < 1:
        raise ValueError("n_q must be >= 1")
    order = np.argsort(-qs.confidences, kind="stable")
    return qs.take(order[:n_q])


def compute_importance(t: TokenGrid | np.ndarray, q, p: ScorerParams, layer: int = 0) -> ImportanceScore:
    tokens = t.tokens if isinstance(t, TokenGrid) else np.asarray(t)
    fused = q.fused
    if fused.shape[0] != p.n_queries:
        raise ValueError(f"score head expects {p.n_queries} queries, got {fused.shape[0]}")
    if fused.shape[1] != p.query_dim:
        raise ValueError(f"query width {fused.shape[1]} does not match token projection {p.query_dim}")
    t_proj = p.token_proj(tokens)
    attn = (t_proj @ fused.T) / math.sqrt(p.query_dim)
    logits = p.score_head(attn)[:, 0]
    return ImportanceScore(sigmoid(logits), layer, attn, logits)


def score_tokens(tokens: np.ndarray, queries: HistoryQuerySet, p: ScorerParams, layer: int = 0) -> ImportanceScore:
    """Sample queries, align them, and score ``tokens`` (the inference path)."""
    sampled = sample_history_queries(queries, p.n_queries)
    return compute_importance(tokens, align_queries(sampled, p.motion), p, layer)


def split_tokens(t, s: ImportanceScore | np.ndarray, rho: float) -> TokenPartition:
    """Top-k split keeping ``max(1, round_half_up(rho * N))`` tokens; lower index wins ties."""
    if not rho > 0:
        raise ValueError(f"keeping ratio must be > 0, got {rho}")
    if rho > 1:
        raise ValueError(f"keeping ratio must be <= 1, got {rho}")
    scores = np.asarray(s.scores if isinstance(s, ImportanceScore) else s)
    n = len(scores)
    if t is not None and len(t) != n:
        raise ValueError(f"{len(t)} tokens but {n} scores")
    n_s = min(n, max(1, math.floor(rho * n + 0.5)))
    order = np.argsort(-scores, kind="stable")
    return TokenPartition(order[:n_s], order[n_s:], rho)


# ---------------------------------------------------------------------------
# loss


def gaussian_focal_loss(s, target, alpha: float = 2.0, beta: float = 4.0, eps: float = FOCAL_EPS):
    """Penalty-reduced focal loss over a Gaussian heatmap.

    Returns ``(loss, d loss / d s)``. Scores are clamped to ``[eps, 1 - eps]``;
    the gradient is zero where the clamp is active.
    """
    s = np.asarray(s.scores if isinstance(s, ImportanceScore) else s, dtype=float)
    y = np.asarray(getattr(target, "flat", target), dtype=float).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and target {y.shape} are not aligned")
    sc = np.clip(s, eps, 1 - eps)
    pos = y == 1.0
    norm = max(1, int(pos.sum()))
    neg_w = (1 - y) ** beta

    pos_term = (1 - sc) ** alpha * np.log(sc)
    neg_term = neg_w * sc**alpha * np.log(1 - sc)
    loss = -float(np.where(pos, pos_term, neg_term).sum()) / norm

    d_pos = alpha * (1 - sc) ** (alpha - 1) * np.log(sc) - (1 - sc) ** alpha / sc
    d_neg = -neg_w * (alpha * sc ** (alpha - 1) * np.log(1 - sc) - sc**alpha / (1 - sc))
    grad = np.where(pos, d_pos, d_neg) / norm
    grad[(s < eps) | (s > 1 - eps)] = 0.0
    return loss, grad


# ---------------------------------------------------------------------------
# forward with cache + backward


@dataclass
class ScorerCache:
    params_id: int
    version: int
    tokens: np.ndarray
    v_m: np.ndarray
    gamma: np.ndarray
    ref_in: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    h2: np.ndarray
    n_ref: np.ndarray
    n_content: np.ndarray
    contents: np.ndarray
    fused: np.ndarray
    t_proj: np.ndarray
    attn: np.ndarray
    scores: np.ndarray


def scorer_forward(tokens: np.ndarray, queries: HistoryQuerySet, p: ScorerParams, layer: int = 0):
    """Scores plus the activations ``scorer_backward`` needs.

    ``queries`` must already be sampled to ``p.n_queries`` rows.
    """
    m = p.motion
    if len(queries) != p.n_queries:
        raise ValueError(f"score head expects {p.n_queries} queries, got {len(queries)}")
    aligned = align_refpoints(queries.refpoints, queries.ego_transform)
    v_m = positional_encode(motion_vector(queries, m.norm), m.pe)
    gamma = m.w_gamma(v_m)
    beta = m.w_beta(v_m)
    ref_in = scale_refpoints(aligned, m.norm)
    h1 = m.ref_mlp.fc1(ref_in)
    a1 = gelu(h1)
    h2 = m.ref_mlp.fc2(a1)
    n_ref = layer_norm(h2)
    n_content = layer_norm(queries.contents)
    fused = gamma * (n_ref + n_content) + 2 * beta
    t_proj = p.token_proj(tokens)
    attn = (t_proj @ fused.T) / math.sqrt(p.query_dim)
    logits = p.score_head(attn)[:, 0]
    scores = sigmoid(logits)
    cache = ScorerCache(id(p), p.version, tokens, v_m, gamma, ref_in, h1, a1, h2, n_ref, n_content,
                        queries.contents, fused, t_proj, attn, scores)
    return ImportanceScore(scores, layer, attn, logits), cache


def scorer_backward(cache: ScorerCache, p: ScorerParams, grad_s) -> dict[str, np.ndarray]:
    """Parameter gradients for an upstream gradient on the scores."""
    if cache.params_id != id(p) or cache.version != p.version:
        raise StaleCacheError("forward cache does not belong to the current parameters")
    grad_s = np.asarray(grad_s, dtype=float).reshape(-1)
    if grad_s.shape != cache.scores.shape:
        raise ValueError(f"grad_s has shape {grad_s.shape}, scores have {cache.scores.shape}")
    m = p.motion
    scale = 1.0 / math.sqrt(p.query_dim)
    s = cache.scores

    g_z = grad_s * s * (1 - s)
    g_head_w = (g_z @ cache.attn)[None, :]
    g_head_b = np.array([g_z.sum()])
    g_attn = np.outer(g_z, p.score_head.weight[0])
    g_tproj = (g_attn @ cache.fused) * scale
    g_fused = (g_attn.T @ cache.t_proj) * scale

    g_tp_w = g_tproj.T @ cache.tokens
    g_tp_b = g_tproj.sum(axis=0)

    g_gamma = g_fused * (cache.n_ref + cache.n_content)
    g_beta = 2 * g_fused
    g_wg_w = g_gamma.T @ cache.v_m
    g_wg_b = g_gamma.sum(axis=0)
    g_wb_w = g_beta.T @ cache.v_m
    g_wb_b = g_beta.sum(axis=0)

    g_h2 = layer_norm_backward(g_fused * cache.gamma, cache.h2)
    g_fc2_w = g_h2.T @ cache.a1
    g_fc2_b = g_h2.sum(axis=0)
    g_h1 = (g_h2 @ m.ref_mlp.fc2.weight) * gelu_grad(cache.h1)
    g_fc1_w = g_h1.T @ cache.ref_in
    g_fc1_b = g_h1.sum(axis=0)

    return {
        "token_proj.weight": g_tp_w,
        "token_proj.bias": g_tp_b,
        "score_head.weight": g_head_w,
        "score_head.bias": g_head_b,
        "w_gamma.weight": g_wg_w,
        "w_gamma.bias": g_wg_b,
        "w_beta.weight": g_wb_w,
        "w_beta.bias": g_wb_b,
        "ref_mlp.fc1.weight": g_fc1_w,
        "ref_mlp.fc1.bias": g_fc1_b,
        "ref_mlp.fc2.weight": g_fc2_w,
        "ref_mlp.fc2.bias": g_fc2_b,
    }


def scorer_loss(tokens, queries, target, p: ScorerParams, loss_weight: float = 1.0,
                alpha: float = 2.0, beta: float = 4.0):
    """Weighted focal loss and its parameter gradients for one frame."""
    score, cache = scorer_forward(tokens, queries, p)
    loss, g_s = gaussian_focal_loss(score.scores, target, alpha, beta)
    grads = scorer_backward(cache, p, loss_weight * g_s)
    return loss_weight * loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ScorerParams
    losses: list[float]


def prepare_examples(records: list[SceneRecord], token_dim: int, n_queries: int, token_seed: int = 0,
                     token_noise: float = 0.1):
    return [
        (rec.tokens(token_dim, token_seed, token_noise), sample_history_queries(rec.queries, n_queries), rec.target.flat)
        for rec in records
    ]


def train_scorer(
    dataset,
    epochs: int = 50,
    lr: float = 1e-3,
    seed: int = 0,
    momentum: float = 0.9,
    loss_weight: float = 5.0,
    clip_norm: float | None = 35.0,
    params: ScorerParams | None = None,
    token_dim: int = 256,
    query_dim: int = 256,
    n_queries: int = 64,
    pe: PEConfig = PEConfig(),
    token_seed: int = 0,
) -> TrainResult:
    """Momentum SGD over frames, one step per frame, deterministic per seed.

    ``dataset`` is a list of ``SceneRecord`` or of prepared
    ``(tokens, sampled_queries, target)`` triples.
    """
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    if isinstance(dataset[0], SceneRecord):
        examples = prepare_examples(dataset, token_dim, n_queries, token_seed)
    else:
        examples = list(dataset)
    token_dim = examples[0][0].shape[1]
    if params is None:
        params = ScorerParams.init(seed, token_dim, query_dim, len(examples[0][1]), pe)
    arrays = params.arrays()
    velocity = {k: np.zeros_like(v) for k, v in arrays.items()}
    rng = make_rng(seed + 1)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for i in rng.permutation(len(examples)):
            tokens, queries, target = examples[i]
            loss, grads = scorer_loss(tokens, queries, target, params, loss_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, example {i}")
            if clip_norm is not None:
                gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if gnorm > clip_norm:
                    for g in grads.values():
                        g *= clip_norm / gnorm
            for k, g in grads.items():
                velocity[k] *= momentum
                velocity[k] += g
                arrays[k] -= lr * velocity[k]
            params.touch()
            total += loss / loss_weight
        losses.append(total / len(examples))
        logger.debug("epoch %d mean focal loss %.5f", epoch, losses[-1])
    return TrainResult(params, losses)


def foreground_recall(scores, target, rho: float, threshold: float = 0.8) -> float:
    """Fraction of cells with ``target >= threshold`` that land in the salient set."""
    y = np.asarray(getattr(target, "flat", target)).reshape(-1)
    fg = np.flatnonzero(y >= threshold)
    if fg.size == 0:
        return 1.0
    part = split_tokens(None, scores, rho)
    return float(np.isin(fg, part.salient_idx).mean())


# ---------------------------------------------------------------------------
# checkpoint IO


def write_weight_file(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Magic line, JSON header line with a shape table, then row-major float64 data."""
    table = [[name, list(a.shape)] for name, a in arrays.items()]
    head = json.dumps({**header, "shapes": table}).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for a in arrays.values():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_weight_file(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise ValueError(f"{path} does not start with {magic.strip().decode()!r}")
    off = len(magic)
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + n].decode())
    off += n
    arrays = {}
    for name, shape in header.pop("shapes"):
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after the weight table")
    return header, arrays


def save_scorer(p: ScorerParams, path) -> None:
    m = p.motion
    header = {
        "pe_bands": m.pe.bands,
        "pe_include_input": m.pe.include_input,
        "norm": [m.norm.v_max, m.norm.horizon, m.norm.translation, m.norm.position],
    }
    write_weight_file(path, SCORER_MAGIC, header, p.arrays())


def load_scorer(path) -> ScorerParams:
    header, a = read_weight_file(path, SCORER_MAGIC)
    pe = PEConfig(header["pe_bands"], header["pe_include_input"])
    norm = MotionNorm(*header["norm"])
    motion = MotionParams(
        Linear(a["w_gamma.weight"], a["w_gamma.bias"]),
        Linear(a["w_beta.weight"], a["w_beta.bias"]),
        RefMLP(Linear(a["ref_mlp.fc1.weight"], a["ref_mlp.fc1.bias"]),
               Linear(a["ref_mlp.fc2.weight"], a["ref_mlp.fc2.bias"])),
        pe, norm,
    )
    return ScorerParams(Linear(a["token_proj.weight"], a["token_proj.bias"]),
                        Linear(a["score_head.weight"], a["score_head.bias"]), motion)
