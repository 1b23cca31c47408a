"""Typed-edge attributed graphs: storage, TSV I/O, synthetic generators and samplers."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class GraphFormatError(ValueError):
    """A graph directory could not be parsed."""


@dataclass(eq=False)
class Graph:
    """Immutable graph with dense integer node and relation ids.

    Edges are stored directed as ``(src, rel, dst)`` but message passing and
    neighbourhood extraction treat them as undirected.
    """

    features: np.ndarray
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    relation_count: int
    node_labels: dict[int, int] | None = None
    node_names: list[str] | None = None
    relation_names: list[str] | None = None
    class_names: list[str] | None = None
    _indptr: np.ndarray = field(init=False, repr=False)
    _nbr: np.ndarray = field(init=False, repr=False)
    _eid: np.ndarray = field(init=False, repr=False)
    _uptr: np.ndarray = field(init=False, repr=False)
    _unbr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.src = np.asarray(self.src, dtype=np.int64)
        self.rel = np.asarray(self.rel, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        n = self.node_count
        if self.features.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        if not (len(self.src) == len(self.rel) == len(self.dst)):
            raise ValueError("src/rel/dst arrays differ in length")
        if len(self.src):
            if min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= n:
                raise ValueError("edge endpoint out of range")
            if self.rel.min() < 0 or self.rel.max() >= self.relation_count:
                raise ValueError("relation id out of range")
        if self.node_labels is not None:
            self.node_labels = {int(k): int(v) for k, v in self.node_labels.items()}
            if any(k < 0 or k >= n for k in self.node_labels):
                raise ValueError("labelled node out of range")
        for arr in (self.features, self.src, self.rel, self.dst):
            arr.setflags(write=False)
        self._build_adjacency()

    def _build_adjacency(self) -> None:
        n = self.node_count
        m = len(self.src)
        ends = np.concatenate([self.src, self.dst])
        other = np.concatenate([self.dst, self.src])
        eids = np.concatenate([np.arange(m), np.arange(m)])
        keep = ends != other
        ends, other, eids = ends[keep], other[keep], eids[keep]
        order = np.lexsort((eids, other, ends))
        ends, other, eids = ends[order], other[order], eids[order]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(ends, minlength=n))])
        self._nbr = other
        self._eid = eids
        # unique neighbour lists
        if len(ends):
            first = np.ones(len(ends), dtype=bool)
            first[1:] = (ends[1:] != ends[:-1]) | (other[1:] != other[:-1])
        else:
            first = np.zeros(0, dtype=bool)
        uends = ends[first]
        self._unbr = other[first]
        self._uptr = np.concatenate([[0], np.cumsum(np.bincount(uends, minlength=n))])

    @property
    def node_count(self) -> int:
        return self.features.shape[0]

    @property
    def edge_count(self) -> int:
        return len(self.src)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, v: int) -> np.ndarray:
        """Sorted distinct neighbours of ``v``."""
        return self._unbr[self._uptr[v]:self._uptr[v + 1]]

    def incident_edges(self, v: int) -> np.ndarray:
        return self._eid[self._indptr[v]:self._indptr[v + 1]]

    def incident_pairs(self, v: int) -> np.ndarray:
        """Neighbour multiset of ``v`` (one entry per incident edge)."""
        return self._nbr[self._indptr[v]:self._indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self._uptr)

    def label_array(self, missing: int = -1) -> np.ndarray:
        out = np.full(self.node_count, missing, dtype=np.int64)
        for k, v in (self.node_labels or {}).items():
            out[k] = v
        return out

    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.src.tolist(), self.rel.tolist(), self.dst.tolist()))

    def induced_edges(self, nodes: Sequence[int]) -> np.ndarray:
        """Ids of the edges whose endpoints both lie in ``nodes``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            return np.zeros(0, dtype=np.int64)
        inside = np.zeros(self.node_count, dtype=bool)
        inside[nodes] = True
        cand = np.unique(np.concatenate([self.incident_edges(v) for v in nodes]))
        return cand[inside[self.src[cand]] & inside[self.dst[cand]]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        for arr in (self.src, self.rel, self.dst):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        h.update(str(self.relation_count).encode())
        h.update(self.label_array().astype("<i8").tobytes())
        return h.hexdigest()


class Subgraph(NamedTuple):
    """Neighbourhood of ``anchor``; ``nodes`` are parent ids with the anchor first."""

    anchor: int
    nodes: np.ndarray
    hops: np.ndarray
    edge_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


class RandomWalk(NamedTuple):
    start: int
    nodes: tuple


# ---------------------------------------------------------------------------
# sampling


def khop_subgraph(g: Graph, anchor: int, h: int, fanout_cap: int | None = 20, seed: int = 0) -> Subgraph:
    """Breadth-first ``h``-hop neighbourhood, capping new neighbours per expanded node.

    When a node has more than ``fanout_cap`` unvisited neighbours a uniform
    sample of that size is taken.  ``fanout_cap=None`` disables the cap.
    """
    if not 0 <= anchor < g.node_count:
        raise ValueError(f"anchor {anchor} out of range for {g.node_count} nodes")
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    rng = np.random.default_rng(seed)
    visited = {int(anchor): 0}
    order = [int(anchor)]
    frontier = [int(anchor)]
    for hop in range(1, h + 1):
        nxt = []
        for u in frontier:
            fresh = [int(w) for w in g.neighbors(u) if int(w) not in visited]
            if fanout_cap is not None and len(fresh) > fanout_cap:
                pick = np.sort(rng.choice(len(fresh), size=fanout_cap, replace=False))
                fresh = [fresh[i] for i in pick]
            for w in fresh:
                visited[w] = hop
                order.append(w)
                nxt.append(w)
        frontier = nxt
        if not frontier:
            break
    nodes = np.asarray(order, dtype=np.int64)
    hops = np.asarray([visited[v] for v in order], dtype=np.int64)
    return Subgraph(int(anchor), nodes, hops, g.induced_edges(nodes))


def sample_walks(g: Graph, walks_per_node: int, walk_length: int, seed: int = 0) -> list[RandomWalk]:
    """Uniform random walks from every non-isolated node, in node order."""
    if walk_length < 2:
        raise ValueError(f"walk_length must be >= 2, got {walk_length}")
    deg = g.degrees()
    starts = np.repeat(np.flatnonzero(deg > 0), walks_per_node)
    if len(starts) == 0:
        return []
    rng = np.random.default_rng(seed)
    paths = np.empty((len(starts), walk_length), dtype=np.int64)
    paths[:, 0] = starts
    cur = starts
    for step in range(1, walk_length):
        offs = np.floor(rng.random(len(cur)) * deg[cur]).astype(np.int64)
        cur = g._unbr[g._uptr[cur] + offs]
        paths[:, step] = cur
    return [RandomWalk(int(p[0]), tuple(p.tolist())) for p in paths]


# ---------------------------------------------------------------------------
# generators


def gen_planted_partition(communities: int, nodes_per_community: int, p_in: float, p_out: float,
                          d_in: int, feature_shift: float, seed: int, mean_offset: float = 0.0,
                          basis_seed: int | None = None) -> Graph:
    """Undirected planted-partition graph with community-dependent Gaussian features.

    Community means lie on orthonormal random directions scaled so that any
    two means are ``feature_shift`` apart; ``mean_offset`` adds the same
    constant to every coordinate of every mean.  Features carry unit noise.
    Graphs generated with the same ``basis_seed`` share their mean
    directions (community c points the same way in each), which models
    several graphs embedded by one feature encoder; by default the
    directions come from ``seed``.
    """
    if communities < 2:
        raise ValueError("communities must be >= 2")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    n = communities * nodes_per_community
    labels = np.repeat(np.arange(communities), nodes_per_community)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    src, dst = iu[keep], ju[keep]
    basis_rng = rng if basis_seed is None else np.random.default_rng([basis_seed, d_in])
    if communities <= d_in:
        q, _ = np.linalg.qr(basis_rng.normal(size=(d_in, d_in)) if basis_seed is not None
                            else basis_rng.normal(size=(d_in, communities)))
        dirs = q.T[:communities]
    else:
        dirs = basis_rng.normal(size=(communities, d_in))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * (feature_shift / np.sqrt(2.0)) + mean_offset
    feats = means[labels] + rng.normal(size=(n, d_in))
    return Graph(feats, src, np.zeros(len(src), dtype=np.int64), dst, 1,
                 node_labels=dict(enumerate(labels.tolist())))


def gen_relational(entities: int, relation_count: int, edges: int, d_in: int, seed: int,
                   groups: int | None = None, affinity: float = 0.85, feature_shift: float = 2.0,
                   basis_seed: int | None = None) -> Graph:
    """Directed multi-relational graph where each relation links two latent entity groups.

    Every relation gets a distinct ordered (source group, target group)
    pair; with probability ``affinity`` an edge of that relation is drawn
    between those groups, otherwise between uniform entities.  Entity
    features are the group mean plus unit noise, so a relation is
    predictable from its endpoints' context.  ``basis_seed`` shares the
    group mean directions across graphs, as in :func:`gen_planted_partition`.
    """
    if relation_count < 2:
        raise ValueError("relation_count must be >= 2")
    if entities < 2:
        raise ValueError("entities must be >= 2")
    capacity = entities * (entities - 1) * relation_count
    if edges > capacity:
        raise ValueError(f"{edges} edges exceed simple-graph capacity {capacity}")
    rng = np.random.default_rng(seed)
    groups = groups or max(2, relation_count)
    group = rng.permutation(np.arange(entities) % groups)
    members = [np.flatnonzero(group == k) for k in range(groups)]
    all_pairs = [(a, b) for a in range(groups) for b in range(groups)]
    chosen = rng.choice(len(all_pairs), size=relation_count, replace=len(all_pairs) < relation_count)
    rel_pairs = [all_pairs[i] for i in chosen]

    seen: set[tuple[int, int, int]] = set()
    triples: list[tuple[int, int, int]] = []
    misses = 0
    while len(triples) < edges:
        r = int(rng.integers(relation_count))
        a, b = rel_pairs[r]
        if rng.random() < affinity and len(members[a]) and len(members[b]):
            u = int(rng.choice(members[a]))
            v = int(rng.choice(members[b]))
        else:
            u, v = (int(x) for x in rng.integers(entities, size=2))
        if u == v or (u, r, v) in seen:
            misses += 1
            if misses > 50 * edges:
                break
            continue
        seen.add((u, r, v))
        triples.append((u, r, v))
    if len(triples) < edges:
        rest = [(u, r, v) for u in range(entities) for r in range(relation_count)
                for v in range(entities) if u != v and (u, r, v) not in seen]
        extra = rng.choice(len(rest), size=edges - len(triples), replace=False)
        triples.extend(rest[i] for i in sorted(extra))
    arr = np.asarray(triples, dtype=np.int64)
    basis_rng = rng if basis_seed is None else np.random.default_rng([basis_seed, d_in])
    if d_in <= groups:
        dirs = basis_rng.normal(size=(groups, d_in))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        q, _ = np.linalg.qr(basis_rng.normal(size=(d_in, d_in)) if basis_seed is not None
                            else basis_rng.normal(size=(d_in, groups)))
        dirs = q.T[:groups]
    feats = dirs[group] * (feature_shift / np.sqrt(2.0)) + rng.normal(size=(entities, d_in))
    return Graph(feats, arr[:, 0], arr[:, 1], arr[:, 2], relation_count,
                 node_labels=dict(enumerate(group.tolist())))


# ---------------------------------------------------------------------------
# TSV I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def _sort_names(names) -> list[str]:
    names = list(names)
    try:
        return sorted(names, key=int)
    except ValueError:
        return sorted(names)


def save_graph(g: Graph, directory) -> None:
    """Write ``nodes.tsv``, ``edges.tsv`` and (if labelled) ``labels.tsv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = g.node_names or [str(i) for i in range(g.node_count)]
    rels = g.relation_names or [str(i) for i in range(g.relation_count)]
    lines = ["node_id\tfeatures"]
    lines += [f"{names[i]}\t{','.join(_fmt(x) for x in g.features[i])}" for i in range(g.node_count)]
    (d / "nodes.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    lines = ["src\trel\tdst"]
    lines += [f"{names[s]}\t{rels[r]}\t{names[t]}" for s, r, t in g.edges()]
    (d / "edges.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    if g.node_labels is not None:
        classes = g.class_names
        lines = ["node_id\tclass"]
        lines += [f"{names[v]}\t{classes[c] if classes else c}" for v, c in sorted(g.node_labels.items())]
        (d / "labels.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _rows(path: Path, header: list[str]):
    with path.open(encoding="utf-8", newline="\n") as fh:
        first = fh.readline().rstrip("\n").split("\t")
        if first != header:
            raise GraphFormatError(f"{path.name}:1: expected header {'<TAB>'.join(header)!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise GraphFormatError(f"{path.name}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            yield lineno, parts


def load_graph(directory) -> Graph:
    """Parse a graph directory; node ids keep file order, relation/class ids are sorted."""
    d = Path(directory)
    for name in ("nodes.tsv", "edges.tsv"):
        if not (d / name).is_file():
            raise GraphFormatError(f"missing {name}")
    names: list[str] = []
    index: dict[str, int] = {}
    feats: list[list[float]] = []
    width = None
    for lineno, (nid, raw) in _rows(d / "nodes.tsv", ["node_id", "features"]):
        if nid in index:
            raise GraphFormatError(f"nodes.tsv:{lineno}: duplicate node id {nid!r}")
        try:
            vec = [float(x) for x in raw.split(",")] if raw else []
        except ValueError:
            raise GraphFormatError(f"nodes.tsv:{lineno}: malformed feature value") from None
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise GraphFormatError(f"nodes.tsv:{lineno}: feature width {len(vec)} differs from {width}")
        index[nid] = len(names)
        names.append(nid)
        feats.append(vec)
    raw_edges = []
    for lineno, (s, r, t) in _rows(d / "edges.tsv", ["src", "rel", "dst"]):
        for end in (s, t):
            if end not in index:
                raise GraphFormatError(f"edges.tsv:{lineno}: dangling endpoint {end!r}")
        if s == t:
            raise GraphFormatError(f"edges.tsv:{lineno}: self-loop on {s!r}")
        raw_edges.append((index[s], r, index[t]))
    rel_names = _sort_names({r for _, r, _ in raw_edges})
    rel_index = {r: i for i, r in enumerate(rel_names)}
    labels = None
    class_names = None
    if (d / "labels.tsv").is_file():
        raw_labels = []
        for lineno, (nid, cls) in _rows(d / "labels.tsv", ["node_id", "class"]):
            if nid not in index:
                raise GraphFormatError(f"labels.tsv:{lineno}: unknown node {nid!r}")
            raw_labels.append((index[nid], cls))
        class_names = _sort_names({c for _, c in raw_labels})
        cls_index = {c: i for i, c in enumerate(class_names)}
        labels = {v: cls_index[c] for v, c in raw_labels}
    feat_arr = np.asarray(feats, dtype=np.float64).reshape(len(names), width or 0)
    e = np.asarray([(s, rel_index[r], t) for s, r, t in raw_edges], dtype=np.int64).reshape(-1, 3)
    return Graph(feat_arr, e[:, 0], e[:, 1], e[:, 2], max(1, len(rel_names)), node_labels=labels,
                 node_names=names, relation_names=rel_names or None, class_names=class_names)
