"""Estimator facade over the pretraining loop and the tuning-free predictor."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .episodes import Episode
from .graph import Graph
from .training import Checkpoint, DimensionMismatchError, TrainConfig, episode_logits, evaluate, train
from .prompt import predict as argmax_predict
from ._validation import check_graph, derive_seed


class PromptClassifier(BaseEstimator):
    """Few-shot classifier pretrained without labels on one graph, applied frozen to others.

    ``fit`` runs self-supervised pretraining on a source graph (its labels
    are ignored).  ``predict`` classifies the queries of an episode drawn
    from any graph with the same feature width, using only the episode's
    support examples; no parameter is updated after ``fit``.
    """

    def __init__(self, m=3, s=3, n=4, epochs=12, lr=1e-3, weight_decay=1e-3, lam=0.3, p=0.3, h=2, d=256,
                 task_kind="node", ablation="O1+O2+O3", seed=0, extra=None):
        self.m = m
        self.s = s
        self.n = n
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.lam = lam
        self.p = p
        self.h = h
        self.d = d
        self.task_kind = task_kind
        self.ablation = ablation
        self.seed = seed
        self.extra = extra

    def _config(self) -> TrainConfig:
        params = self.get_params()
        ablation = params.pop("ablation")
        extra = params.pop("extra") or {}
        return TrainConfig.from_dict({**extra, **params}).with_ablation(ablation)

    def fit(self, X: Graph, y=None):
        check_graph(X)
        self.checkpoint_ = train(X, self._config())
        self.n_features_in_ = X.feature_dim
        self.loss_log_ = self.checkpoint_.log
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PromptClassifier":
        cfg = ckpt.config
        keys = cls._get_param_names()
        est = cls(**{k: cfg[k] for k in keys if k in cfg})
        est.checkpoint_ = ckpt
        est.n_features_in_ = ckpt.d_in
        est.loss_log_ = ckpt.log
        return est

    def _check_target(self, graph: Graph) -> None:
        check_is_fitted(self, "checkpoint_")
        check_graph(graph)
        if graph.feature_dim != self.n_features_in_:
            raise DimensionMismatchError(
                f"graph feature width {graph.feature_dim} != fitted d_in {self.n_features_in_}")

    def decision_function(self, episode: Episode, graph: Graph, seed: int | None = None) -> np.ndarray:
        """Cosine logits [queries x classes] for ``episode`` on ``graph``."""
        self._check_target(graph)
        cfg = self.checkpoint_.config
        seed = episode.seed if seed is None else seed
        with ad.no_grad(), ad.default_dtype(np.float32):
            logits = episode_logits(graph, episode, self.checkpoint_.params, cfg["h"], cfg["fanout_cap"],
                                    seed, cfg.get("logit_scale", 1.0))
        return logits.data.copy()

    def predict(self, episode: Episode, graph: Graph, seed: int | None = None) -> np.ndarray:
        """Class ids (entries of ``episode.classes``) for each query."""
        pos = argmax_predict(self.decision_function(episode, graph, seed))
        return np.asarray(episode.classes)[pos]

    def score(self, graph: Graph, y=None, ways: int = 3, shots: int = 3, queries: int = 4, episodes: int = 100,
              seed: int = 0) -> float:
        """Mean episode accuracy on ``graph`` (the labels come from the graph itself)."""
        self._check_target(graph)
        report = evaluate(self.checkpoint_, graph, ways, shots, queries, episodes,
                          seed=derive_seed(seed, 77), task_kind=self.task_kind)
        return report.mean
