"""Context graphs around episode inputs, and protection-aware augmentation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import Graph, Subgraph, khop_subgraph
from ._validation import check_fraction, derive_seed


@dataclass(frozen=True)
class ProtectionPlan:
    centroid: int
    protect: frozenset
    p: float
    remain: frozenset


@dataclass
class ContextGraph:
    """Local neighbourhood of one input; ``src``/``dst`` index into ``nodes``."""

    nodes: np.ndarray
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    hops: np.ndarray
    targets: tuple
    features: np.ndarray
    dropped: frozenset = frozenset()
    masked: frozenset = frozenset()
    original_masked_features: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def target_index(self) -> np.ndarray:
        pos = {int(v): i for i, v in enumerate(self.nodes)}
        return np.asarray([pos[t] for t in self.targets], dtype=np.int64)

    @property
    def masked_index(self) -> np.ndarray:
        """Local positions of masked nodes, in node order."""
        return np.asarray([i for i, v in enumerate(self.nodes) if int(v) in self.masked], dtype=np.int64)

    def restored_features(self) -> np.ndarray:
        out = self.features.copy()
        for i, v in enumerate(self.nodes):
            if int(v) in self.original_masked_features:
                out[i] = self.original_masked_features[int(v)]
        return out

    def to_json(self) -> str:
        return json.dumps({
            "nodes": self.nodes.tolist(),
            "edges": [[int(self.nodes[s]), int(r), int(self.nodes[t])]
                      for s, r, t in zip(self.src, self.rel, self.dst)],
            "targets": list(self.targets),
            "dropped": sorted(self.dropped),
            "masked": sorted(self.masked),
        })


def build_protection_plan(g_o: Subgraph, examples, queries, p: float, seed: int) -> ProtectionPlan:
    """Protected set = {centroid} + examples + queries + a p-fraction of the remaining nodes."""
    p = check_fraction(p, "p")
    v_o = set(int(v) for v in g_o.nodes)
    ex = set(int(v) for v in examples)
    qu = set(int(v) for v in queries)
    outside = (ex | qu) - v_o
    if outside:
        raise ValueError(f"examples/queries not in the centroid subgraph: {sorted(outside)}")
    core = {int(g_o.anchor)} | ex | qu
    remain = sorted(v_o - core)
    size = int(np.floor(p * len(remain)))
    rng = np.random.default_rng(seed)
    extra = rng.choice(remain, size=size, replace=False).tolist() if size else []
    return ProtectionPlan(int(g_o.anchor), frozenset(core | set(extra)), p, frozenset(remain))


def _from_nodes(g: Graph, nodes: np.ndarray, hops: np.ndarray, targets: tuple) -> ContextGraph:
    eids = g.induced_edges(nodes)
    local = {int(v): i for i, v in enumerate(nodes)}
    src = np.asarray([local[int(v)] for v in g.src[eids]], dtype=np.int64)
    dst = np.asarray([local[int(v)] for v in g.dst[eids]], dtype=np.int64)
    return ContextGraph(nodes, src, g.rel[eids].copy(), dst, hops, targets, g.features[nodes].copy())


def build_context(g: Graph, x, h: int, fanout_cap: int | None = 20, seed: int = 0) -> ContextGraph:
    """h-hop context of a node, or the union of both endpoints' contexts for a pair."""
    if isinstance(x, (tuple, list)):
        u, v = int(x[0]), int(x[1])
        su = khop_subgraph(g, u, h, fanout_cap, seed=derive_seed(seed, 0))
        sv = khop_subgraph(g, v, h, fanout_cap, seed=derive_seed(seed, 1))
        hop = {int(a): int(b) for a, b in zip(su.nodes, su.hops)}
        order = list(map(int, su.nodes))
        for a, b in zip(sv.nodes, sv.hops):
            a, b = int(a), int(b)
            if a in hop:
                hop[a] = min(hop[a], b)
            else:
                hop[a] = b
                order.append(a)
        nodes = np.asarray(order, dtype=np.int64)
        hops = np.asarray([hop[a] for a in order], dtype=np.int64)
        return _from_nodes(g, nodes, hops, (u, v))
    sub = khop_subgraph(g, int(x), h, fanout_cap, seed=seed)
    return _from_nodes(g, sub.nodes, sub.hops, (int(x),))


def augment(ctx: ContextGraph, plan: ProtectionPlan | None, drop_rate: float, mask_rate: float,
            seed: int) -> ContextGraph:
    """Drop, then mask, nodes outside the protected set.

    Candidates are the context nodes not in ``plan.protect`` and not
    targets (with ``plan=None`` only targets are protected).  Each candidate
    is dropped with ``drop_rate``; each surviving candidate has its whole
    feature vector zeroed with ``mask_rate``.
    """
    check_fraction(drop_rate, "drop_rate")
    check_fraction(mask_rate, "mask_rate")
    protected = set(ctx.targets) | (set(plan.protect) if plan is not None else set())
    cand = np.asarray([i for i, v in enumerate(ctx.nodes) if int(v) not in protected], dtype=np.int64)
    if len(cand) == 0 or (drop_rate == 0 and mask_rate == 0):
        return ctx
    rng = np.random.default_rng(seed)
    drop_flags = rng.random(len(cand)) < drop_rate
    survivors = cand[~drop_flags]
    mask_flags = rng.random(len(survivors)) < mask_rate
    drop_local = cand[drop_flags]
    mask_local = survivors[mask_flags]

    keep = np.ones(len(ctx.nodes), dtype=bool)
    keep[drop_local] = False
    remap = np.cumsum(keep) - 1
    edge_keep = keep[ctx.src] & keep[ctx.dst]
    feats = ctx.features.copy()
    originals = dict(ctx.original_masked_features)
    for i in mask_local:
        originals[int(ctx.nodes[i])] = ctx.features[i].copy()
        feats[i] = 0.0
    return replace(
        ctx,
        nodes=ctx.nodes[keep],
        src=remap[ctx.src[edge_keep]],
        rel=ctx.rel[edge_keep],
        dst=remap[ctx.dst[edge_keep]],
        hops=ctx.hops[keep],
        features=feats[keep],
        dropped=ctx.dropped | frozenset(int(ctx.nodes[i]) for i in drop_local),
        masked=ctx.masked | frozenset(int(ctx.nodes[i]) for i in mask_local),
        original_masked_features=originals,
    )
