"""Parameter containers and the two message-passing layers used by the model."""
from __future__ import annotations

import hashlib
from collections.abc import Mapping
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ParamSet(Mapping):
    """Named learnable tensors plus the topology that fixes their shapes.

    Iteration order is lexicographic by name so that serialization and
    optimizer updates never depend on insertion order.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None, topology: dict | None = None):
        self._tensors: dict[str, Tensor] = {}
        self.topology = dict(topology or {})
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else ad.parameter(value)
        if not t.requires_grad:
            t = ad.parameter(t.data, dtype=t.data.dtype)
        if not np.isfinite(t.data).all():
            raise ad.NumericError(f"parameter {name!r} has non-finite values")
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self._tensors[name].data for name in self}

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: ad.parameter(t.data.astype(dtype), dtype=dtype) for n, t in self._tensors.items()},
                        self.topology)

    def copy(self) -> "ParamSet":
        return ParamSet({n: ad.parameter(t.data.copy(), dtype=t.data.dtype) for n, t in self._tensors.items()},
                        self.topology)

    def digest(self) -> str:
        """SHA-256 over names, shapes and little-endian float32 values."""
        h = hashlib.sha256()
        for name in self:
            arr = self._tensors[name].data
            h.update(name.encode())
            h.update(np.asarray(arr.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def mean_adjacency(num_nodes: int, src, dst) -> sp.csr_matrix:
    """Row-normalized undirected adjacency; duplicate pairs and self-loops collapse away."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    rows = np.concatenate([src[keep], dst[keep]])
    cols = np.concatenate([dst[keep], src[keep]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
    a.data[:] = 1.0  # collapse parallel edges
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    return sp.diags(inv) @ a


def sage_layer(feats, adjacency: sp.spmatrix, w_self: Tensor, w_neigh: Tensor,
               activation: bool = True) -> Tensor:
    """Mean-aggregator GraphSAGE layer.

    out_v = relu(f_v W_self + mean_{u in N(v)} f_u W_neigh); ``adjacency``
    must be row-normalized (see :func:`mean_adjacency`).  Isolated nodes get a
    zero neighbour term.
    """
    feats = ad.tensor(feats)
    if feats.shape[1] != w_self.shape[0] or w_self.shape != w_neigh.shape:
        raise ShapeError(f"sage_layer: features {feats.shape} vs weights {w_self.shape}/{w_neigh.shape}")
    if adjacency.shape != (feats.shape[0], feats.shape[0]):
        raise ShapeError(f"sage_layer: adjacency {adjacency.shape} for {feats.shape[0]} nodes")
    neigh = ad.spmm(adjacency.astype(feats.data.dtype), feats)
    out = ad.add(ad.matmul(feats, w_self), ad.matmul(neigh, w_neigh))
    return ad.relu(out) if activation else out


def typed_attention_layer(states, src, etype, dst, w_src: Tensor, w_dst: Tensor, w_val: Tensor,
                          type_emb: Tensor, attn: Tensor, slope: float = 0.2) -> Tensor:
    """Single-head attention over typed edges with a residual self term.

    For every edge the score is leaky_relu(a . [h_src W_src || h_dst W_dst || e_type]);
    scores are soft-maxed over the incoming edges of each destination and
    weight the value projections h_src W_val.  Nodes without incoming edges
    are returned unchanged.
    """
    states = ad.tensor(states)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    etype = np.asarray(etype, dtype=np.int64)
    n = states.shape[0]
    if not (len(src) == len(dst) == len(etype)):
        raise ShapeError("typed_attention_layer: src/etype/dst lengths differ")
    if len(etype) and (etype.min() < 0 or etype.max() >= type_emb.shape[0]):
        bad = sorted(set(etype[(etype < 0) | (etype >= type_emb.shape[0])].tolist()))
        raise ValueError(f"typed_attention_layer: unknown edge type(s) {bad}")
    if len(src) == 0:
        return states
    hs = ad.gather_rows(ad.matmul(states, w_src), src)
    hd = ad.gather_rows(ad.matmul(states, w_dst), dst)
    he = ad.gather_rows(type_emb, etype)
    feats = ad.concat([hs, hd, he], axis=1)
    score = ad.leaky_relu(ad.reshape(ad.matmul(feats, ad.reshape(attn, (-1, 1))), (-1,)), slope)
    alpha = ad.segment_softmax(score, dst, n)
    msg = ad.mul(ad.gather_rows(ad.matmul(states, w_val), src), ad.reshape(alpha, (-1, 1)))
    return ad.add(states, ad.scatter_sum(msg, dst, n))


def attention_weights(states, src, etype, dst, w_src, w_dst, type_emb, attn, slope: float = 0.2) -> np.ndarray:
    """The per-edge softmax weights the attention layer would use (inspection helper)."""
    with ad.no_grad():
        hs = ad.gather_rows(ad.matmul(states, w_src), src)
        hd = ad.gather_rows(ad.matmul(states, w_dst), dst)
        he = ad.gather_rows(type_emb, etype)
        feats = ad.concat([hs, hd, he], axis=1)
        score = ad.leaky_relu(ad.reshape(ad.matmul(feats, ad.reshape(attn, (-1, 1))), (-1,)), slope)
        return ad.segment_softmax(score, dst, ad.tensor(states).shape[0]).data
