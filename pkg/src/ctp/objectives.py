"""Training losses: cross-entropy over cosine logits, label orthogonality, attribute reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossBreakdown:
    ce: float
    orth: float
    attr: float
    total: float
    lam: float
    tensor: Tensor | None = None

    def row(self, step: int) -> dict:
        return {"step": step, "ce": self.ce, "orth": self.orth, "attr": self.attr, "total": self.total}


def ce_loss(logits, truth) -> Tensor:
    """Mean over queries of -log softmax(logits)[true class]."""
    logits = ad.tensor(logits)
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) != logits.shape[0]:
        raise ValueError(f"ce_loss: {len(truth)} labels for {logits.shape[0]} rows")
    logp = ad.log_softmax_rows(logits)
    return ad.neg(ad.mean_all(ad.pick(logp, np.arange(len(truth)), truth)))


def orth_loss(label_embs) -> Tensor:
    """Sum over ordered pairs i != j of (l_i . l_j)^2 with rows L2-normalized."""
    unit = ad.l2_normalize_rows(ad.tensor(label_embs))
    gram = ad.matmul(unit, ad.transpose(unit))
    m = gram.shape[0]
    off = 1.0 - np.eye(m, dtype=gram.data.dtype)
    return ad.sum_all(ad.mul(ad.square(gram), off))


def attr_loss(pred, truth, owner, num_contexts: int | None = None) -> Tensor:
    """Per context, mean over its masked nodes of the per-node MSE; then mean over
    contexts that have at least one masked node.  No masked nodes gives 0."""
    if pred is None or len(owner) == 0:
        return ad.tensor(0.0)
    pred = ad.tensor(pred)
    owner = np.asarray(owner, dtype=np.int64)
    diff = ad.sub(pred, ad.tensor(np.asarray(truth, dtype=pred.data.dtype)))
    per_node = ad.scale(ad.row_dot(diff, diff), 1.0 / pred.shape[1])
    present, dense_owner = np.unique(owner, return_inverse=True)
    per_ctx = ad.scatter_mean(per_node, dense_owner, len(present))
    return ad.mean_all(per_ctx)


def total_loss(ce, orth, attr, lam: float) -> LossBreakdown:
    """L = ce + lam * orth + attr, with every term reported."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    ce_t, orth_t, attr_t = ad.tensor(ce), ad.tensor(orth), ad.tensor(attr)
    total = ad.add(ad.add(ce_t, ad.scale(orth_t, lam)), attr_t)
    return LossBreakdown(float(ce_t.data), float(orth_t.data), float(attr_t.data), float(total.data), lam, total)
