"""Temporal alignment and motion-conditioned embedding of history queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LN_EPS, Linear, gelu, layer_norm, make_rng
from .scene import HistoryQuerySet, is_rigid

MOTION_RAW_DIM = 3 + 1 + 16


@dataclass(frozen=True)
class PEConfig:
    bands: int = 10
    include_input: bool = True

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError("PE needs at least one frequency band")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.bands + int(self.include_input))


@dataclass(frozen=True)
class MotionNorm:
    """Scales that keep PE arguments O(1)."""

    v_max: float = 10.0
    horizon: float = 1.0
    translation: float = 10.0
    position: float = 50.0


def positional_encode(x, cfg: PEConfig = PEConfig()) -> np.ndarray:
    """NeRF sin/cos encoding along the last axis.

    Layout is ``[x?, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]``,
    each block as wide as ``x``.
    """
    x = np.asarray(x, dtype=float)
    parts = [x] if cfg.include_input else []
    for k in range(cfg.bands):
        arg = (2.0**k) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def check_rigid(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if not is_rigid(e):
        raise ValueError("ego transform must be rigid (orthonormal rotation, det 1, last row 0 0 0 1)")
    return e


def align_refpoints(refpoints, e) -> np.ndarray:
    """Move homogeneous refpoints into the current ego frame assuming static objects."""
    e = check_rigid(e)
    refpoints = np.asarray(refpoints, dtype=float)
    if refpoints.ndim != 2 or refpoints.shape[1] != 4:
        raise ValueError(f"refpoints must be (N, 4), got {refpoints.shape}")
    if len(refpoints) and not np.allclose(refpoints[:, 3], 1.0):
        raise ValueError("refpoints must have homogeneous component 1")
    return refpoints @ e.T


def motion_vector(queries: HistoryQuerySet, norm: MotionNorm = MotionNorm()) -> np.ndarray:
    """(N, 20) raw motion rows ``[v, dt, flatten(ego)]`` after normalization."""
    n = len(queries)
    e = queries.ego_transform.copy()
    e[:3, 3] /= norm.translation
    return np.concatenate(
        [
            queries.velocities / norm.v_max,
            (queries.dt / norm.horizon)[:, None],
            np.broadcast_to(e.reshape(1, 16), (n, 16)),
        ],
        axis=1,
    )


@dataclass
class MotionContext:
    v_m: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class AlignedQueries:
    content_emb: np.ndarray
    refpoint_emb: np.ndarray
    fused: np.ndarray


def encode_motion(queries: HistoryQuerySet, cfg: PEConfig, w_gamma: Linear, w_beta: Linear,
                  norm: MotionNorm = MotionNorm()) -> MotionContext:
    v_m = positional_encode(motion_vector(queries, norm), cfg)
    if w_gamma.in_dim != v_m.shape[1] or w_beta.in_dim != v_m.shape[1]:
        raise ValueError(
            f"motion heads expect {w_gamma.in_dim}/{w_beta.in_dim} inputs, encoded motion has {v_m.shape[1]}"
        )
    if w_gamma.out_dim != w_beta.out_dim:
        raise ValueError("gamma and beta heads must share the output width")
    return MotionContext(v_m, w_gamma(v_m), w_beta(v_m))


@dataclass
class RefMLP:
    """Two-layer GELU MLP lifting homogeneous refpoints into query space."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng, query_dim: int) -> "RefMLP":
        return cls(Linear.init(rng, 4, query_dim), Linear.init(rng, query_dim, query_dim))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        return self.fc2(gelu(self.fc1(p)))


def scale_refpoints(p: np.ndarray, norm: MotionNorm = MotionNorm()) -> np.ndarray:
    out = np.array(p, dtype=float)
    out[:, :3] /= norm.position
    return out


def conditional_layernorm(queries: HistoryQuerySet, aligned_ref: np.ndarray, ctx: MotionContext,
                          ref_mlp: RefMLP, norm: MotionNorm = MotionNorm(), eps: float = LN_EPS) -> AlignedQueries:
    n, cq = ctx.gamma.shape
    if queries.query_dim != cq or ref_mlp.fc2.out_dim != cq:
        raise ValueError(
            f"query width {queries.query_dim} / MLP width {ref_mlp.fc2.out_dim} / gamma width {cq} disagree"
        )
    if len(queries) != n or len(aligned_ref) != n:
        raise ValueError("motion context, queries and refpoints disagree on the query count")
    ref_emb = ctx.gamma * layer_norm(ref_mlp(scale_refpoints(aligned_ref, norm)), eps) + ctx.beta
    content_emb = ctx.gamma * layer_norm(queries.contents, eps) + ctx.beta
    return AlignedQueries(content_emb, ref_emb, ref_emb + content_emb)


@dataclass
class MotionParams:
    w_gamma: Linear
    w_beta: Linear
    ref_mlp: RefMLP
    pe: PEConfig = PEConfig()
    norm: MotionNorm = MotionNorm()

    @classmethod
    def init(cls, seed_or_rng, query_dim: int = 256, pe: PEConfig = PEConfig(),
             norm: MotionNorm = MotionNorm()) -> "MotionParams":
        rng = make_rng(seed_or_rng) if isinstance(seed_or_rng, (int, np.integer)) else seed_or_rng
        d_m = pe.out_dim(MOTION_RAW_DIM)
        return cls(Linear.init(rng, d_m, query_dim), Linear.init(rng, d_m, query_dim),
                   RefMLP.init(rng, query_dim), pe, norm)


def align_queries(queries: HistoryQuerySet, params: MotionParams) -> AlignedQueries:
    """Ego alignment, motion encoding and conditional LN in one call."""
    aligned = align_refpoints(queries.refpoints, queries.ego_transform)
    ctx = encode_motion(queries, params.pe, params.w_gamma, params.w_beta, params.norm)
    return conditional_layernorm(queries, aligned, ctx, params.ref_mlp, params.norm)
