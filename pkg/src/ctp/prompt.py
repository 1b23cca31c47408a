"""Context encoding, prompt-graph assembly, attention refinement and cosine scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .context import ContextGraph
from .layers import ParamSet, glorot, mean_adjacency, sage_layer, typed_attention_layer

MATCH, NONMATCH, QUERY = 0, 1, 2
EDGE_TYPES = ("MATCH", "NONMATCH", "QUERY")


def init_prompt_params(d_in: int, d: int, seed: int, attn_dim: int | None = None,
                       type_dim: int | None = None) -> ParamSet:
    """Fresh weights for the encoder, pair projection, attribute MLP and refiner."""
    attn_dim = attn_dim or d
    type_dim = type_dim or max(4, d // 8)
    rng = np.random.default_rng([seed, 202])
    dt = ad.get_default_dtype()
    shapes = {
        "init.self": (d_in, d), "init.neigh": (d_in, d),
        "pair.self": (d, d), "pair.neigh": (d, d), "pair.proj": (3 * d, d),
        "attr.w1": (d, d), "attr.w2": (d, d_in),
        "ref.src": (d, attn_dim), "ref.dst": (d, attn_dim), "ref.val": (d, d),
        "ref.type": (len(EDGE_TYPES), type_dim),
    }
    tensors = {}
    for name in sorted(shapes):
        fan_in, fan_out = shapes[name]
        tensors[name] = ad.parameter(glorot(rng, fan_in, fan_out), dt)
    tensors["pair.bias"] = ad.parameter(np.zeros(d), dt)
    tensors["attr.b1"] = ad.parameter(np.zeros(d), dt)
    tensors["attr.b2"] = ad.parameter(np.zeros(d_in), dt)
    tensors["ref.attn"] = ad.parameter(glorot(rng, 2 * attn_dim + type_dim, 1, shape=(2 * attn_dim + type_dim,)), dt)
    topology = {"d_in": d_in, "d": d, "attn_dim": attn_dim, "type_dim": type_dim,
                "edge_types": len(EDGE_TYPES), "init_layers": 1, "ref_layers": 1}
    return ParamSet(tensors, topology)


@dataclass
class EncoderOutput:
    """Batched encoder result for a list of context graphs."""

    node_embeddings: Tensor
    offsets: np.ndarray
    target_rows: np.ndarray
    adjacency: sp.csr_matrix
    targets: Tensor | None = None
    masked_pred: Tensor | None = None
    masked_true: np.ndarray | None = None
    masked_ctx: np.ndarray | None = None

    def context_rows(self, i: int) -> Tensor:
        return ad.gather_rows(self.node_embeddings, slice(self.offsets[i], self.offsets[i + 1]))


def encode_contexts(ctxs: list[ContextGraph], params: ParamSet, task_kind: str = "node",
                    dropout: float = 0.0, rng: np.random.Generator | None = None,
                    with_attr: bool = True) -> EncoderOutput:
    """Run the one-layer encoder over the disjoint union of ``ctxs``.

    Node tasks take each target's row; link tasks pass the pair through
    :func:`project_pair`.  When any context has masked nodes the attribute
    MLP predictions for them are attached.
    """
    if not ctxs:
        raise ShapeError("encode_contexts: no contexts")
    sizes = np.asarray([len(c) for c in ctxs])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    dt = ad.get_default_dtype()
    x = ad.tensor(np.concatenate([c.features for c in ctxs]).astype(dt))
    src = np.concatenate([c.src + o for c, o in zip(ctxs, offsets)])
    dst = np.concatenate([c.dst + o for c, o in zip(ctxs, offsets)])
    adj = mean_adjacency(total, src, dst)
    x = ad.dropout(x, dropout, rng)
    emb = sage_layer(x, adj, params["init.self"], params["init.neigh"])
    target_rows = np.concatenate([c.target_index + o for c, o in zip(ctxs, offsets)])
    out = EncoderOutput(emb, offsets, target_rows, adj)
    if task_kind == "node":
        if any(len(c.targets) != 1 for c in ctxs):
            raise ShapeError("encode_contexts: node task needs exactly one target per context")
        out.targets = ad.gather_rows(emb, target_rows)
    elif task_kind == "link":
        out.targets = project_pair(out, params)
    else:
        raise ValueError(f"unknown task kind {task_kind!r}")
    if with_attr:
        rows, truth, owner = [], [], []
        for i, c in enumerate(ctxs):
            for j in c.masked_index:
                rows.append(offsets[i] + j)
                truth.append(c.original_masked_features[int(c.nodes[j])])
                owner.append(i)
        if rows:
            out.masked_pred = attribute_mlp(ad.gather_rows(emb, rows), params)
            out.masked_true = np.asarray(truth, dtype=dt)
            out.masked_ctx = np.asarray(owner, dtype=np.int64)
    return out


def encode_context(ctx: ContextGraph, params: ParamSet, task_kind: str | None = None) -> EncoderOutput:
    task_kind = task_kind or ("link" if len(ctx.targets) == 2 else "node")
    return encode_contexts([ctx], params, task_kind)


def attribute_mlp(emb: Tensor, params: ParamSet) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(emb, params["attr.w1"]), params["attr.b1"]))
    return ad.add(ad.matmul(hidden, params["attr.w2"]), params["attr.b2"])


def project_pair(out: EncoderOutput, params: ParamSet) -> Tensor:
    """W^T (h_v1 || h_v2 || h_max) + b for every two-target context.

    h_v1, h_v2 come from one more mean-aggregation layer evaluated only at
    the two targets; h_max is the column-wise max over the context's rows.
    """
    rows = out.target_rows
    n_ctx = len(out.offsets) - 1
    if len(rows) != 2 * n_ctx:
        raise ShapeError(f"project_pair: expected 2 targets per context, got {len(rows)} for {n_ctx}")
    emb = out.node_embeddings
    neigh = ad.spmm(out.adjacency[rows].astype(emb.data.dtype), emb)
    own = ad.gather_rows(emb, rows)
    second = ad.relu(ad.add(ad.matmul(own, params["pair.self"]), ad.matmul(neigh, params["pair.neigh"])))
    h1 = ad.gather_rows(second, np.arange(0, len(rows), 2))
    h2 = ad.gather_rows(second, np.arange(1, len(rows), 2))
    pooled = ad.concat([ad.reshape(ad.max_rows(out.context_rows(i)), (1, -1)) for i in range(n_ctx)], axis=0)
    cat = ad.concat([h1, h2, pooled], axis=1)
    return ad.add(ad.matmul(cat, params["pair.proj"]), params["pair.bias"])


def init_labels(example_embs, class_index, m: int | None = None) -> Tensor:
    """Row c is the mean of the example rows whose class position is c."""
    example_embs = ad.tensor(example_embs)
    class_index = np.asarray(class_index, dtype=np.int64)
    m = m if m is not None else int(class_index.max()) + 1
    counts = np.bincount(class_index, minlength=m)
    if (counts == 0).any():
        raise ValueError(f"init_labels: classes without examples: {np.flatnonzero(counts == 0).tolist()}")
    avg = sp.csr_matrix((1.0 / counts[class_index], (class_index, np.arange(len(class_index)))),
                        shape=(m, len(class_index)))
    return ad.spmm(avg, example_embs)


@dataclass
class PromptGraph:
    """Example, query and label nodes joined by typed context-label edges.

    Combined node order is examples, then queries, then labels; ``edges``
    holds one (context index, edge type, label index) triple per link and
    message passing runs in both directions.
    """

    example_nodes: Tensor
    query_nodes: Tensor
    label_nodes: Tensor
    edges: np.ndarray
    example_class: np.ndarray

    @property
    def m(self) -> int:
        return self.label_nodes.shape[0]

    def counts(self) -> dict[str, int]:
        types = self.edges[:, 1]
        return {name: int((types == i).sum()) for i, name in enumerate(EDGE_TYPES)}

    def directed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n_ex, n_q = self.example_nodes.shape[0], self.query_nodes.shape[0]
        ctx = self.edges[:, 0]
        lab = self.edges[:, 2] + n_ex + n_q
        et = self.edges[:, 1]
        return np.concatenate([ctx, lab]), np.concatenate([et, et]), np.concatenate([lab, ctx])


def build_prompt_graph(example_embs, query_embs, example_class, m: int | None = None) -> PromptGraph:
    example_embs = ad.tensor(example_embs)
    query_embs = ad.tensor(query_embs)
    example_class = np.asarray(example_class, dtype=np.int64)
    if example_embs.ndim != 2 or query_embs.ndim != 2 or example_embs.shape[1] != query_embs.shape[1]:
        raise ShapeError(f"build_prompt_graph: example {example_embs.shape} vs query {query_embs.shape}")
    if len(example_class) != example_embs.shape[0]:
        raise ShapeError("build_prompt_graph: one class index per example required")
    m = m if m is not None else int(example_class.max()) + 1
    labels = init_labels(example_embs, example_class, m)
    n_ex, n_q = example_embs.shape[0], query_embs.shape[0]
    ex_ctx = np.repeat(np.arange(n_ex), m)
    ex_lab = np.tile(np.arange(m), n_ex)
    ex_type = np.where(ex_lab == example_class[ex_ctx], MATCH, NONMATCH)
    q_ctx = np.repeat(np.arange(n_ex, n_ex + n_q), m)
    q_lab = np.tile(np.arange(m), n_q)
    edges = np.stack([np.concatenate([ex_ctx, q_ctx]),
                      np.concatenate([ex_type, np.full(len(q_ctx), QUERY)]),
                      np.concatenate([ex_lab, q_lab])], axis=1).astype(np.int64)
    return PromptGraph(example_embs, query_embs, labels, edges, example_class)


def refine(pg: PromptGraph, params: ParamSet) -> tuple[Tensor, Tensor]:
    """One attention pass over the prompt graph; returns (refined queries, refined labels)."""
    states = ad.concat([pg.example_nodes, pg.query_nodes, pg.label_nodes], axis=0)
    src, et, dst = pg.directed()
    out = typed_attention_layer(states, src, et, dst, params["ref.src"], params["ref.dst"], params["ref.val"],
                                params["ref.type"], params["ref.attn"])
    n_ex, n_q = pg.example_nodes.shape[0], pg.query_nodes.shape[0]
    queries = ad.gather_rows(out, np.arange(n_ex, n_ex + n_q))
    labels = ad.gather_rows(out, np.arange(n_ex + n_q, n_ex + n_q + pg.m))
    return queries, labels


def score(queries, labels, logit_scale: float = 1.0) -> Tensor:
    logits = ad.cosine_sim(queries, labels)
    return logits if logit_scale == 1.0 else ad.scale(logits, logit_scale)


def refine_and_score(pg: PromptGraph, params: ParamSet, logit_scale: float = 1.0) -> Tensor:
    """Cosine logits [queries x labels] after refinement."""
    queries, labels = refine(pg, params)
    return score(queries, labels, logit_scale)


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class position."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return arr.argmax(axis=1)
