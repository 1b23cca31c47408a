"""Centroid collection and m-way episode construction.

Pretraining episodes carry pseudo-labels (one class per centroid
neighbourhood); downstream episodes carry the graph's own node classes or
relation types.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .graph import Graph, Subgraph, khop_subgraph
from .kmeans import KMeansConfig, kmeans
from ._validation import check_fraction, derive_seed

log = logging.getLogger(__name__)

Input = Union[int, tuple]
RETRY_LIMIT = 5


class SamplingError(ValueError):
    """Not enough labelled data or neighbourhood support to build an episode."""


@dataclass
class CentroidSet:
    nodes: np.ndarray
    from_cluster: np.ndarray
    alpha: float
    k: int

    def __len__(self) -> int:
        return len(self.nodes)

    def shuffled(self, seed: int) -> "CentroidSet":
        perm = np.random.default_rng(seed).permutation(len(self.nodes))
        return CentroidSet(self.nodes[perm], self.from_cluster[perm], self.alpha, self.k)


def collect_centroids(emb, total: int, alpha: float, kmeans_cfg: KMeansConfig | None = None,
                      seed: int = 0) -> CentroidSet:
    """k = floor(alpha * total) cluster representatives plus uniform random fill.

    Each k-means cluster contributes the member nearest its mean (the next
    nearest if that node was already taken); the remaining slots are filled
    without replacement from unchosen nodes.
    """
    emb = np.asarray(getattr(emb, "matrix", emb), dtype=np.float64)
    n = len(emb)
    alpha = check_fraction(alpha, "alpha")
    if total > n:
        raise ValueError(f"cannot collect {total} centroids from {n} nodes")
    k = int(np.floor(alpha * total))
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    if k:
        cfg = kmeans_cfg or KMeansConfig()
        assign, means = kmeans(emb, k, cfg.restarts, cfg.max_iter, cfg.tol, seed=derive_seed(seed, 7))
        taken = set()
        for c in range(k):
            members = np.flatnonzero(assign == c)
            if len(members) == 0:
                members = np.arange(n)
            dist = ((emb[members] - means[c]) ** 2).sum(axis=1)
            for j in members[np.argsort(dist, kind="stable")]:
                if int(j) not in taken:
                    break
            else:
                rest = np.setdiff1d(np.arange(n), list(taken))
                j = rest[((emb[rest] - means[c]) ** 2).sum(axis=1).argmin()]
            taken.add(int(j))
            chosen.append(int(j))
    rest = np.setdiff1d(np.arange(n), chosen)
    fill = rng.choice(rest, size=total - k, replace=False) if total > k else np.zeros(0, dtype=np.int64)
    nodes = np.concatenate([np.asarray(chosen, dtype=np.int64), fill.astype(np.int64)])
    flags = np.concatenate([np.ones(k, dtype=bool), np.zeros(total - k, dtype=bool)])
    return CentroidSet(nodes, flags, alpha, k)


def random_centroids(node_count: int, total: int, seed: int = 0) -> CentroidSet:
    """Uniform centroid sampling, the no-clustering fallback."""
    if total > node_count:
        raise ValueError(f"cannot collect {total} centroids from {node_count} nodes")
    nodes = np.random.default_rng(seed).choice(node_count, size=total, replace=False).astype(np.int64)
    return CentroidSet(nodes, np.zeros(total, dtype=bool), 0.0, 0)


@dataclass
class Episode:
    task_kind: str
    classes: list
    support: list
    queries: list
    label_mode: str
    seed: int = 0
    with_replacement: bool = False
    warnings: list = field(default_factory=list)
    centroids: list = field(default_factory=list)
    subgraphs: list = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return len(self.classes)

    def _index(self, items):
        pos = {c: i for i, c in enumerate(self.classes)}
        return np.asarray([pos[c] for _, c in items], dtype=np.int64)

    @property
    def support_inputs(self) -> list:
        return [x for x, _ in self.support]

    @property
    def query_inputs(self) -> list:
        return [x for x, _ in self.queries]

    @property
    def support_index(self) -> np.ndarray:
        """Class position (into ``classes``) of every support example."""
        return self._index(self.support)

    @property
    def query_index(self) -> np.ndarray:
        return self._index(self.queries)

    def validate(self, allow_replacement: bool = False) -> None:
        if self.with_replacement and not allow_replacement:
            raise SamplingError("episode was sampled with replacement")
        sup = set(self.support_inputs)
        qry = set(self.query_inputs)
        if not allow_replacement and sup & qry:
            raise SamplingError("support and query inputs overlap")
        for c in self.classes:
            if not any(cc == c for _, cc in self.support) and self.support:
                raise SamplingError(f"class {c} missing from support")
            if not any(cc == c for _, cc in self.queries):
                raise SamplingError(f"class {c} missing from queries")

    def to_json(self) -> str:
        def enc(x):
            return list(x) if isinstance(x, tuple) else x

        return json.dumps({
            "task_kind": self.task_kind,
            "label_mode": self.label_mode,
            "seed": self.seed,
            "classes": self.classes,
            "support": [[enc(x), c] for x, c in self.support],
            "queries": [[enc(x), c] for x, c in self.queries],
            "centroids": self.centroids,
            "with_replacement": self.with_replacement,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Episode":
        d = json.loads(text)

        def dec(x):
            return tuple(x) if isinstance(x, list) else x

        return cls(d["task_kind"], d["classes"], [(dec(x), c) for x, c in d["support"]],
                   [(dec(x), c) for x, c in d["queries"]], d["label_mode"], d["seed"],
                   d.get("with_replacement", False), centroids=d.get("centroids", []))


def _items(g: Graph, sub: Subgraph, task_kind: str) -> list:
    if task_kind == "node":
        return [int(v) for v in sub.nodes]
    seen, out = set(), []
    for e in sub.edge_ids:
        pair = (int(g.src[e]), int(g.dst[e]))
        if pair not in seen:
            seen.add(pair)
            out.append(pair)
    return out


def sample_pretrain_episode(g: Graph, centroids: CentroidSet, batch_index: int, m: int, s: int, n: int,
                            h: int, fanout_cap: int | None, task_kind: str, seed: int,
                            pool_size: int = 10, retries: int = RETRY_LIMIT) -> Episode:
    """One pseudo-labelled episode from the batch's centroid pool.

    The batch owns the contiguous slice ``[batch_index*pool_size, +pool_size)``
    of the (already shuffled) centroid list; m ways are drawn from it.  A
    centroid whose neighbourhood cannot supply s+n unused inputs is replaced
    by the next unused one, up to ``retries`` times; after that the inputs
    are drawn with replacement and the episode is flagged.
    """
    if task_kind not in ("node", "link"):
        raise ValueError(f"unknown task kind {task_kind!r}")
    total = len(centroids)
    if total < m:
        raise SamplingError(f"need at least {m} centroids, have {total}")
    rng = np.random.default_rng(seed)
    start = (batch_index * pool_size) % total
    pool = [int(centroids.nodes[(start + i) % total]) for i in range(min(pool_size, total))]
    rest = [int(centroids.nodes[(start + pool_size + i) % total]) for i in range(max(0, total - pool_size))]
    order = [pool[i] for i in rng.permutation(len(pool))] + rest
    need = s + n
    used: set = set()
    support, queries, chosen, subs, warnings = [], [], [], [], []
    replaced = False
    cursor = 0
    for way in range(m):
        attempts = 0
        while True:
            if cursor >= len(order):
                raise SamplingError("ran out of centroids while building episode")
            o = order[cursor]
            cursor += 1
            sub = khop_subgraph(g, o, h, fanout_cap, seed=derive_seed(seed, o))
            avail = [x for x in _items(g, sub, task_kind) if x not in used]
            if len(avail) >= need:
                pick = rng.choice(len(avail), size=need, replace=False)
                inputs = [avail[i] for i in pick]
                break
            attempts += 1
            if attempts > retries or cursor >= len(order):
                pool_items = avail or _items(g, sub, task_kind)
                if not pool_items:
                    continue
                pick = rng.choice(len(pool_items), size=need, replace=True)
                inputs = [pool_items[i] for i in pick]
                replaced = True
                msg = f"centroid {o}: only {len(avail)} inputs for {need} slots; sampled with replacement"
                warnings.append(msg)
                log.warning(msg)
                break
        used.update(inputs)
        chosen.append(o)
        subs.append(sub)
        support += [(x, way) for x in inputs[:s]]
        queries += [(x, way) for x in inputs[s:]]
    return Episode(task_kind, list(range(m)), support, queries, "pseudo", seed, replaced, warnings, chosen, subs)


def _class_pools(g: Graph, task_kind: str) -> dict[int, list]:
    pools: dict[int, list] = {}
    if task_kind == "node":
        for v, c in sorted((g.node_labels or {}).items()):
            pools.setdefault(c, []).append(v)
    else:
        for s_, r, t in g.edges():
            pools.setdefault(r, []).append((s_, t))
    return pools


def sample_downstream_episode(g: Graph, m: int, k_shots: int, n: int, task_kind: str, seed: int) -> Episode:
    """Uniformly choose m eligible classes, then k_shots support and n query inputs each."""
    if task_kind not in ("node", "link"):
        raise ValueError(f"unknown task kind {task_kind!r}")
    pools = _class_pools(g, task_kind)
    if m > len(pools):
        raise SamplingError(f"{m}-way episode requested but the graph has only {len(pools)} classes")
    need = k_shots + n
    eligible = sorted(c for c, items in pools.items() if len(set(items)) >= need)
    if len(eligible) < m:
        deficient = sorted(c for c in pools if c not in eligible)
        raise SamplingError(f"only {len(eligible)} classes have >= {need} inputs; deficient classes: {deficient}")
    rng = np.random.default_rng(seed)
    classes = [int(c) for c in rng.choice(eligible, size=m, replace=False)]
    used: set = set()
    support, queries = [], []
    for c in classes:
        items = pools[c]
        picked = []
        for i in rng.permutation(len(items)):
            x = items[i]
            if x in used or x in picked:
                continue
            picked.append(x)
            if len(picked) == need:
                break
        if len(picked) < need:
            raise SamplingError(f"class {c}: cannot find {need} inputs disjoint from other classes")
        used.update(picked)
        support += [(x, c) for x in picked[:k_shots]]
        queries += [(x, c) for x in picked[k_shots:]]
    return Episode(task_kind, classes, support, queries, "true", seed)
