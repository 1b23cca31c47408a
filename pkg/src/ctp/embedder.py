"""Unsupervised GraphSAGE embeddings trained with a random-walk skip-gram objective.

The table these produce only serves centroid collection; it is never
shared with the prompt model.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import checkpoint
from .graph import Graph, RandomWalk, sample_walks
from .layers import ParamSet, glorot, mean_adjacency, sage_layer
from .optim import AdamState, adam_step
from ._validation import check_graph, check_positive_int, derive_seed

log = logging.getLogger(__name__)


@dataclass
class PairBatch:
    """Skip-gram training entries: ``u[i]`` co-occurs with ``v[i]``; ``neg[i]`` holds Q negatives."""

    u: np.ndarray
    v: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.u)

    @property
    def num_negatives(self) -> int:
        return self.neg.shape[1]


@dataclass
class EmbedderConfig:
    dim: int = 256
    epochs: int = 2
    lr: float = 1e-2
    weight_decay: float = 0.0
    walks_per_node: int = 5
    walk_length: int = 8
    window: int = 2
    negatives: int = 5
    pn_power: float = 0.75
    batch_size: int = 512
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    graph_hash: str = ""
    config_hash: str = ""
    loss_history: list = field(default_factory=list)
    flagged: bool = False

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def positive_pairs(walks: list[RandomWalk], window: int) -> np.ndarray:
    """All ordered (center, context) co-occurrences within ``window`` steps."""
    out = []
    for w in walks:
        nodes = np.asarray(w.nodes, dtype=np.int64)
        for off in range(1, window + 1):
            if off >= len(nodes):
                break
            out.append(np.stack([nodes[:-off], nodes[off:]], axis=1))
            out.append(np.stack([nodes[off:], nodes[:-off]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out)


def negative_distribution(degrees: np.ndarray, power: float) -> np.ndarray:
    weights = np.asarray(degrees, dtype=np.float64) ** power
    weights[np.asarray(degrees) == 0] = 0.0
    return weights / weights.sum()


def build_pair_batches(walks: list[RandomWalk], window: int, Q: int, pn_power: float, seed: int,
                       degrees: np.ndarray, batch_size: int = 512) -> list[PairBatch]:
    """Shuffle all window co-occurrences into batches and attach Q negatives per entry.

    Negatives are drawn i.i.d. from P_n(v) proportional to degree(v)**pn_power.
    """
    if not walks:
        raise ValueError("build_pair_batches: empty walk list")
    if window < 1 or Q < 1:
        raise ValueError("window and Q must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = positive_pairs(walks, window)
    pairs = pairs[rng.permutation(len(pairs))]
    pn = negative_distribution(degrees, pn_power)
    negs = rng.choice(len(pn), size=(len(pairs), Q), p=pn)
    return [PairBatch(pairs[i:i + batch_size, 0], pairs[i:i + batch_size, 1], negs[i:i + batch_size])
            for i in range(0, len(pairs), batch_size)]


def skipgram_loss(emb, batch: PairBatch) -> ad.Tensor:
    """Mean over entries of -log s(h_u.h_v) - Q * mean_n log s(-h_u.h_n)."""
    emb = ad.tensor(emb)
    q = batch.num_negatives
    hu = ad.gather_rows(emb, batch.u)
    pos = ad.row_dot(hu, ad.gather_rows(emb, batch.v))
    hu_rep = ad.gather_rows(emb, np.repeat(batch.u, q))
    negdot = ad.row_dot(hu_rep, ad.gather_rows(emb, batch.neg.reshape(-1)))
    pos_term = ad.mean_all(ad.log_sigmoid(pos))
    neg_term = ad.mean_all(ad.log_sigmoid(ad.neg(negdot)))
    return ad.neg(ad.add(pos_term, ad.scale(neg_term, float(q))))


def init_embedder_params(d_in: int, dim: int, seed: int) -> ParamSet:
    rng = np.random.default_rng([seed, 101])
    dt = ad.get_default_dtype()
    return ParamSet({
        "l1.self": ad.parameter(glorot(rng, d_in, dim), dt),
        "l1.neigh": ad.parameter(glorot(rng, d_in, dim), dt),
        "l2.self": ad.parameter(glorot(rng, dim, dim), dt),
        "l2.neigh": ad.parameter(glorot(rng, dim, dim), dt),
    }, topology={"d_in": d_in, "dim": dim, "layers": 2})


def embed(g: Graph, params: ParamSet) -> ad.Tensor:
    """Two-layer forward pass over the whole graph; the last layer is linear."""
    adj = mean_adjacency(g.node_count, g.src, g.dst)
    x = ad.tensor(g.features.astype(ad.get_default_dtype()))
    h = sage_layer(x, adj, params["l1.self"], params["l1.neigh"])
    return sage_layer(h, adj, params["l2.self"], params["l2.neigh"], activation=False)


def _moving_average_decreasing(losses: list[float], steps: int = 50, width: int = 10) -> bool:
    head = np.asarray(losses[:steps])
    if len(head) < width + 1:
        return True
    ma = np.convolve(head, np.ones(width) / width, mode="valid")
    return bool(ma[-1] < ma[0])


def pretrain(g: Graph, cfg: EmbedderConfig | None = None, cache_dir=None) -> tuple[EmbeddingTable, ParamSet]:
    """Fit the embedder on ``g`` and return the final embedding table and weights.

    With ``cache_dir`` the table is read from / written to
    ``<graph hash>_<config hash>.ctpe`` there.
    """
    cfg = cfg or EmbedderConfig()
    check_graph(g)
    check_positive_int(cfg.dim, "dim")
    ghash, chash = g.digest(), cfg.digest()
    cache = Path(cache_dir) / f"{ghash[:16]}_{chash[:16]}.ctpe" if cache_dir else None
    if cache is not None and cache.is_file():
        tensors, meta = checkpoint.load(cache, checkpoint.EMBEDDING_MAGIC)
        params = ParamSet({k: v for k, v in tensors.items() if k != "table"}, topology=meta.get("topology"))
        return EmbeddingTable(tensors["table"], ghash, chash, meta.get("loss_history", []),
                              meta.get("flagged", False)), params

    params = init_embedder_params(g.feature_dim, cfg.dim, cfg.seed)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[float] = []
    degrees = g.degrees()
    if degrees.sum() > 0:
        for epoch in range(cfg.epochs):
            walks = sample_walks(g, cfg.walks_per_node, cfg.walk_length, seed=derive_seed(cfg.seed, epoch, 1))
            batches = build_pair_batches(walks, cfg.window, cfg.negatives, cfg.pn_power,
                                         seed=derive_seed(cfg.seed, epoch, 2),
                                         degrees=degrees, batch_size=cfg.batch_size)
            for batch in batches:
                params.zero_grad()
                loss = skipgram_loss(embed(g, params), batch)
                history.append(loss.item())
                ad.backward(loss)
                adam_step(params, state)
    with ad.no_grad():
        table = embed(g, params).data.copy()
    flagged = not _moving_average_decreasing(history)
    if flagged:
        log.warning("embedder loss did not decrease over the first 50 steps")
    result = EmbeddingTable(table, ghash, chash, history, flagged)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        tensors = dict(params.arrays(), table=table)
        checkpoint.save(cache, tensors, {"topology": params.topology, "loss_history": history,
                                         "flagged": flagged, "config": asdict(cfg)},
                        checkpoint.EMBEDDING_MAGIC)
    return result, params


class NeighborhoodEmbedder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains on a graph, ``transform`` embeds any graph
    with the same feature width."""

    def __init__(self, dim=256, epochs=2, lr=1e-2, weight_decay=0.0, walks_per_node=5, walk_length=8,
                 window=2, negatives=5, pn_power=0.75, batch_size=512, seed=0, cache_dir=None):
        self.dim = dim
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.walks_per_node = walks_per_node
        self.walk_length = walk_length
        self.window = window
        self.negatives = negatives
        self.pn_power = pn_power
        self.batch_size = batch_size
        self.seed = seed
        self.cache_dir = cache_dir

    def _config(self) -> EmbedderConfig:
        params = self.get_params()
        params.pop("cache_dir")
        return EmbedderConfig(**params)

    def fit(self, X: Graph, y=None):
        table, params = pretrain(X, self._config(), cache_dir=self.cache_dir)
        self.params_ = params
        self.embedding_ = table
        self.n_features_in_ = X.feature_dim
        return self

    def transform(self, X: Graph) -> np.ndarray:
        check_is_fitted(self, "params_")
        check_graph(X, feature_dim=self.n_features_in_)
        with ad.no_grad():
            return embed(X, self.params_).data.copy()
