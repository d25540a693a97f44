"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numpy as np

from .mqts import TokenGrid
from .scene import HistoryQuerySet, SceneRecord


def check_tokens(tokens, dim: int | None = None, dtype=np.float64) -> np.ndarray:
    tokens = np.asarray(getattr(tokens, "tokens", tokens), dtype=dtype)
    if tokens.ndim != 2:
        raise ValueError(f"expected an (N, C) token matrix, got shape {tokens.shape}")
    if len(tokens) == 0:
        raise ValueError("token matrix is empty")
    if not np.all(np.isfinite(tokens)):
        raise ValueError("tokens contain NaN or inf")
    if dim is not None and tokens.shape[1] != dim:
        raise ValueError(f"expected {dim}-d tokens, got {tokens.shape[1]}")
    return tokens


def check_target(target, n_tokens: int) -> np.ndarray:
    y = np.asarray(getattr(target, "flat", target), dtype=float).reshape(-1)
    if y.shape != (n_tokens,):
        raise ValueError(f"target has {y.size} cells for {n_tokens} tokens")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("target values must lie in [0, 1]")
    return y


def check_sample(x, token_dim: int | None = None, token_seed: int = 0):
    """Normalize one sample to ``(tokens, queries, provenance_or_None)``.

    Accepts a ``SceneRecord`` or a ``(tokens | TokenGrid, HistoryQuerySet)`` pair.
    """
    if isinstance(x, SceneRecord):
        if token_dim is None:
            raise ValueError("token_dim is needed to synthesize tokens from a scene record")
        return x.tokens(token_dim, token_seed), x.queries, None
    try:
        tokens, queries = x
    except (TypeError, ValueError):
        raise TypeError("samples must be SceneRecord or (tokens, HistoryQuerySet) pairs") from None
    if not isinstance(queries, HistoryQuerySet):
        raise TypeError(f"expected a HistoryQuerySet, got {type(queries).__name__}")
    prov = tokens.provenance if isinstance(tokens, TokenGrid) else None
    return check_tokens(tokens, token_dim), queries, prov


def check_samples(X, y=None, token_dim: int | None = None, token_seed: int = 0):
    if X is None or len(X) == 0:
        raise ValueError("no samples given")
    samples = [check_sample(x, token_dim, token_seed) for x in X]
    if y is None:
        if not all(isinstance(x, SceneRecord) for x in X):
            raise ValueError("targets are required unless samples are scene records")
        y = [x.target for x in X]
    if len(y) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(y)} targets")
    targets = [check_target(t, len(s[0])) for s, t in zip(samples, y)]
    return samples, targets
