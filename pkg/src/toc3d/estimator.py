"""scikit-learn style wrappers around the scorer and the compressed encoder."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import EncoderConfig, EncoderWeights, forward_backbone
from .motion import PEConfig
from .mqts import (
    CompressionSchedule,
    ScorerParams,
    TokenGrid,
    foreground_recall,
    sample_history_queries,
    score_tokens,
    split_tokens,
    train_scorer,
)
from .scene import SceneRecord, lattice_provenance
from .validation import check_sample, check_samples


class TokenImportanceScorer(BaseEstimator):
    """Query-guided token importance scorer trained with a Gaussian focal loss.

    ``fit`` takes scene records, or ``(tokens, HistoryQuerySet)`` pairs with
    heatmap targets in ``y``. ``predict_proba`` returns per-token scores and
    ``predict`` the salient mask at ``keep_ratio``.
    """

    def __init__(self, n_queries=64, query_dim=256, token_dim=256, pe_bands=10, epochs=50, lr=1e-3,
                 momentum=0.9, loss_weight=5.0, clip_norm=35.0, keep_ratio=0.5, token_seed=0, random_state=0):
        self.n_queries = n_queries
        self.query_dim = query_dim
        self.token_dim = token_dim
        self.pe_bands = pe_bands
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.loss_weight = loss_weight
        self.clip_norm = clip_norm
        self.keep_ratio = keep_ratio
        self.token_seed = token_seed
        self.random_state = random_state

    def fit(self, X, y=None):
        samples, targets = check_samples(X, y, self.token_dim, self.token_seed)
        examples = [(tok, sample_history_queries(q, self.n_queries), t) for (tok, q, _), t in zip(samples, targets)]
        if len(examples[0][1]) != self.n_queries:
            raise ValueError(f"samples carry fewer than n_queries={self.n_queries} history queries")
        params = ScorerParams.init(self.random_state, samples[0][0].shape[1], self.query_dim, self.n_queries,
                                   PEConfig(self.pe_bands))
        res = train_scorer(examples, epochs=self.epochs, lr=self.lr, seed=self.random_state,
                           momentum=self.momentum, loss_weight=self.loss_weight, clip_norm=self.clip_norm,
                           params=params)
        self.params_ = res.params
        self.loss_curve_ = res.losses
        self.n_features_in_ = samples[0][0].shape[1]
        return self

    def _scores(self, X):
        check_is_fitted(self, "params_")
        out = []
        for x in X:
            tokens, queries, _ = check_sample(x, self.n_features_in_, self.token_seed)
            out.append(score_tokens(tokens, queries, self.params_).scores)
        return out

    def predict_proba(self, X):
        scores = self._scores(X)
        if len({len(s) for s in scores}) == 1:
            return np.stack(scores)
        return scores

    def predict(self, X):
        masks = []
        for s in self._scores(X):
            m = np.zeros(len(s), dtype=bool)
            m[split_tokens(None, s, self.keep_ratio).salient_idx] = True
            masks.append(m)
        return np.stack(masks) if len({len(m) for m in masks}) == 1 else masks

    def score(self, X, y=None):
        """Mean foreground recall (target >= 0.8) at ``keep_ratio``."""
        if y is None:
            y = [x.target for x in X]
        return float(np.mean([foreground_recall(s, t, self.keep_ratio) for s, t in zip(self._scores(X), y)]))


class TokenCompressionEncoder(TransformerMixin, BaseEstimator):
    """Transformer encoder that routes low-importance tokens around its blocks.

    ``transform`` maps each sample's ``(N, C)`` tokens to encoded ``(N, C)``
    tokens in the original order. Provenance comes from a ``TokenGrid``
    input, a scene record's target lattice or, for plain arrays, from
    ``lattice=(views, rows, cols)``.
    """

    def __init__(self, layers=12, dim=256, heads=8, mlp_ratio=4.0, window_size=4, global_attn_layers=None,
                 update_layers=(3, 6, 9), ratios=(0.5, 0.4, 0.3), bridge_update="full", scorer=None,
                 lattice=None, random_state=0):
        self.layers = layers
        self.dim = dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.window_size = window_size
        self.global_attn_layers = global_attn_layers
        self.update_layers = update_layers
        self.ratios = ratios
        self.bridge_update = bridge_update
        self.scorer = scorer
        self.lattice = lattice
        self.random_state = random_state

    def fit(self, X=None, y=None):
        glob = self.global_attn_layers
        if glob is None:
            glob = EncoderConfig.desk(self.layers, self.dim, self.heads, self.window_size).global_attn_layers
        self.config_ = EncoderConfig(self.layers, self.dim, self.heads, self.mlp_ratio, self.window_size, tuple(glob))
        self.schedule_ = CompressionSchedule(tuple(self.update_layers), tuple(self.ratios))
        self.weights_ = EncoderWeights.init(self.config_, self.random_state)
        if self.scorer is None:
            self.scorer_params_ = ScorerParams.init(self.random_state, self.dim)
        elif isinstance(self.scorer, ScorerParams):
            self.scorer_params_ = self.scorer
        else:
            check_is_fitted(self.scorer, "params_")
            self.scorer_params_ = self.scorer.params_
        self.n_features_in_ = self.dim
        return self

    def _grid(self, x):
        if isinstance(x, SceneRecord):
            tokens, queries = x.tokens(self.dim), x.queries
            prov = lattice_provenance(*x.target.grid.shape)
        else:
            tokens, queries, prov = check_sample(x, self.dim)
        if prov is None:
            if self.lattice is None:
                raise ValueError("plain token arrays need lattice=(views, rows, cols)")
            prov = lattice_provenance(*self.lattice)
        return TokenGrid(tokens, prov), queries

    def transform(self, X):
        check_is_fitted(self, "weights_")
        out = []
        for x in X:
            grid, queries = self._grid(x)
            out.append(forward_backbone(grid, queries, self.schedule_, self.scorer_params_, self.config_,
                                        self.weights_, bridge_update=self.bridge_update).tokens)
        return out
