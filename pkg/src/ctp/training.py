"""Self-supervised pretraining loop, tuning-free evaluation, sweeps and ablations."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import checkpoint
from .context import ContextGraph, augment, build_context, build_protection_plan
from .embedder import EmbedderConfig, pretrain
from .episodes import (Episode, collect_centroids, random_centroids, sample_downstream_episode,
                       sample_pretrain_episode)
from .graph import Graph
from .kmeans import KMeansConfig, kmeans
from .layers import ParamSet
from .objectives import LossBreakdown, attr_loss, ce_loss, orth_loss, total_loss
from .optim import AdamState, adam_step
from .prompt import build_prompt_graph, encode_contexts, init_prompt_params, predict, refine, score
from ._validation import check_fraction, check_graph, check_non_negative, check_positive_int, derive_seed

log = logging.getLogger(__name__)

# independent seed streams
SAMPLING, AUGMENT, INIT = 1, 2, 3


class DimensionMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    m: int = 3
    s: int = 3
    n: int = 4
    pool_size: int = 10
    batches: int = 5
    epochs: int = 12
    lr: float = 1e-3
    weight_decay: float = 1e-3
    dropout: float = 0.0
    lam: float = 0.3
    p: float = 0.3
    drop_rate: float = 0.1
    mask_rate: float = 0.15
    h: int = 2
    fanout_cap: int | None = 20
    alpha: float = 0.5
    num_centroids: int | None = None
    d: int = 256
    seed: int = 0
    sampling_seed: int | None = None
    augment_seed: int | None = None
    init_seed: int | None = None
    task_kind: str = "node"
    o1_centroid_clustering: bool = True
    o2_balanced_augmentation: bool = True
    o3_orth_and_attr: bool = True
    logit_scale: float = 1.0
    kmeans_restarts: int = 10
    embedder: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("m", "s", "n", "pool_size", "batches", "d", "h"):
            check_positive_int(getattr(self, name), name)
        check_positive_int(self.epochs, "epochs", minimum=0)
        for name in ("p", "alpha", "drop_rate", "mask_rate"):
            check_fraction(getattr(self, name), name)
        check_non_negative(self.lam, "lam")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.task_kind not in ("node", "link"):
            raise ValueError(f"task_kind must be 'node' or 'link', got {self.task_kind!r}")
        if self.pool_size < self.m:
            raise ValueError(f"pool_size ({self.pool_size}) must be >= m ({self.m})")
        unknown = set(self.embedder) - {f.name for f in dataclasses.fields(EmbedderConfig)}
        if unknown:
            raise ValueError(f"unknown embedder keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def stream(self, which: int) -> int:
        explicit = {SAMPLING: self.sampling_seed, AUGMENT: self.augment_seed, INIT: self.init_seed}[which]
        return explicit if explicit is not None else derive_seed(self.seed, which)

    def embedder_config(self) -> EmbedderConfig:
        opts = {"dim": self.d, "seed": derive_seed(self.seed, 4)}
        opts.update(self.embedder)
        return EmbedderConfig(**opts)

    def with_ablation(self, flags: str) -> "TrainConfig":
        """Turn on exactly the components named in ``flags`` (e.g. ``"O1+O3"``; ``"none"`` = all off)."""
        names = {x.strip().upper() for x in flags.replace(",", "+").split("+") if x.strip()}
        names.discard("NONE")
        names.discard("BASELINE")
        bad = names - {"O1", "O2", "O3"}
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}")
        return dataclasses.replace(self, o1_centroid_clustering="O1" in names,
                                   o2_balanced_augmentation="O2" in names, o3_orth_and_attr="O3" in names)


class Checkpoint:
    """Learned parameters plus the configuration that produced them."""

    def __init__(self, params: ParamSet, config: dict):
        self.params = params
        self.config = config
        self.log: list[dict] = []

    def to_bytes(self) -> bytes:
        cfg = dict(self.config, topology=self.params.topology)
        return checkpoint.dumps(self.params.arrays(), cfg)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, cfg = checkpoint.load(path)
        topology = cfg.pop("topology", {})
        return cls(ParamSet(tensors, topology), cfg)

    @property
    def d_in(self) -> int:
        return int(self.params.topology["d_in"])


@dataclass
class EvalReport:
    accuracies: list
    mean: float
    std: float
    episodes: int
    config: dict
    hash_before: str
    hash_after: str

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "accuracy"])
            for i, a in enumerate(self.accuracies):
                w.writerow([i, repr(float(a))])

    def summary(self) -> str:
        return f"mean={self.mean:.4f}, std={self.std:.4f}, episodes={self.episodes}"


# ---------------------------------------------------------------------------
# episode forward pass


def _contexts(g: Graph, inputs: Sequence, h: int, fanout_cap, seed: int) -> list[ContextGraph]:
    return [build_context(g, x, h, fanout_cap, seed=derive_seed(seed, i)) for i, x in enumerate(inputs)]


def episode_logits(g: Graph, episode: Episode, params: ParamSet, h: int, fanout_cap, seed: int,
                   logit_scale: float = 1.0):
    """Logits [queries x m] for an un-augmented episode (inference path)."""
    inputs = episode.support_inputs + episode.query_inputs
    ctxs = _contexts(g, inputs, h, fanout_cap, seed)
    enc = encode_contexts(ctxs, params, episode.task_kind, with_attr=False)
    n_sup = len(episode.support)
    ex = ad.gather_rows(enc.targets, np.arange(n_sup))
    qu = ad.gather_rows(enc.targets, np.arange(n_sup, len(inputs)))
    pg = build_prompt_graph(ex, qu, episode.support_index, episode.m)
    queries, labels = refine(pg, params)
    return score(queries, labels, logit_scale)


def _plan_nodes(items) -> list[int]:
    out = []
    for x in items:
        out.extend(x if isinstance(x, tuple) else (x,))
    return out


def train_step(g: Graph, episode: Episode, params: ParamSet, cfg: TrainConfig, ctx_seed: int,
               aug_seed: int) -> LossBreakdown:
    """Forward one pretraining episode and return the loss (graph still attached)."""
    m = episode.m
    inputs = episode.support_inputs + episode.query_inputs
    if len(inputs) != m * (cfg.s + cfg.n):
        raise AssertionError(f"episode has {len(inputs)} inputs, expected {m * (cfg.s + cfg.n)}")
    labels_of = [c for _, c in episode.support] + [c for _, c in episode.queries]
    plans = {}
    if cfg.o2_balanced_augmentation:
        for way, sub in enumerate(episode.subgraphs):
            ex = _plan_nodes(x for x, c in episode.support if c == way)
            qu = _plan_nodes(x for x, c in episode.queries if c == way)
            plans[way] = build_protection_plan(sub, ex, qu, cfg.p, seed=derive_seed(aug_seed, 1000 + way))
    ctxs = []
    for i, (x, ctx) in enumerate(zip(inputs, _contexts(g, inputs, cfg.h, cfg.fanout_cap, ctx_seed))):
        plan = plans.get(labels_of[i]) if cfg.o2_balanced_augmentation else None
        ctxs.append(augment(ctx, plan, cfg.drop_rate, cfg.mask_rate, seed=derive_seed(aug_seed, i)))
    rng = np.random.default_rng(derive_seed(aug_seed, 999)) if cfg.dropout else None
    enc = encode_contexts(ctxs, params, episode.task_kind, dropout=cfg.dropout, rng=rng,
                          with_attr=cfg.o3_orth_and_attr)
    n_sup = len(episode.support)
    ex = ad.gather_rows(enc.targets, np.arange(n_sup))
    qu = ad.gather_rows(enc.targets, np.arange(n_sup, len(inputs)))
    pg = build_prompt_graph(ex, qu, episode.support_index, m)
    q_ref, l_ref = refine(pg, params)
    logits = score(q_ref, l_ref, cfg.logit_scale)
    ce = ce_loss(logits, episode.query_index)
    if cfg.o3_orth_and_attr:
        orth = orth_loss(l_ref)
        attr = attr_loss(enc.masked_pred, enc.masked_true,
                         enc.masked_ctx if enc.masked_ctx is not None else [], len(ctxs))
        return total_loss(ce, orth, attr, cfg.lam)
    return total_loss(ce, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# training


def collect_training_centroids(source: Graph, cfg: TrainConfig):
    total = cfg.num_centroids or cfg.pool_size * cfg.batches
    if total > source.node_count:
        raise ValueError(f"need {total} centroids but the source graph has {source.node_count} nodes")
    seed = cfg.stream(SAMPLING)
    if cfg.o1_centroid_clustering:
        table, _ = pretrain(source, cfg.embedder_config())
        cs = collect_centroids(table, total, cfg.alpha, KMeansConfig(restarts=cfg.kmeans_restarts),
                               seed=derive_seed(seed, 11))
    else:
        cs = random_centroids(source.node_count, total, seed=derive_seed(seed, 11))
    return cs.shuffled(derive_seed(seed, 12))


def train(source: Graph, cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Pretrain the prompt model on ``source`` without reading its labels."""
    check_graph(source)
    with ad.default_dtype(np.float32):
        params = init_prompt_params(source.feature_dim, cfg.d, cfg.stream(INIT))
        ckpt = Checkpoint(params, cfg.to_dict())
        if cfg.epochs == 0:
            _write_log(log_path, [])
            return ckpt
        centroids = collect_training_centroids(source, cfg)
        state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        rows: list[dict] = []
        samp, aug = cfg.stream(SAMPLING), cfg.stream(AUGMENT)
        step = 0
        for epoch in range(cfg.epochs):
            for b in range(cfg.batches):
                episode = sample_pretrain_episode(
                    source, centroids, b, cfg.m, cfg.s, cfg.n, cfg.h, cfg.fanout_cap, cfg.task_kind,
                    seed=derive_seed(samp, epoch, b), pool_size=cfg.pool_size)
                params.zero_grad()
                try:
                    losses = train_step(source, episode, params, cfg, derive_seed(samp, epoch, b, 1),
                                        derive_seed(aug, epoch, b))
                    ad.backward(losses.tensor)
                except ad.NumericError as exc:
                    raise ad.NumericError(f"step {step}: {exc}") from exc
                adam_step(params, state)
                rows.append(losses.row(step))
                step += 1
        ckpt.log = rows
        _write_log(log_path, rows)
    return ckpt


def _write_log(path, rows: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "ce", "orth", "attr", "total"])
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in ("ce", "orth", "attr", "total")])


# ---------------------------------------------------------------------------
# evaluation


def _zero_shot_accuracy(g, episode, params, h, fanout_cap, seed) -> float:
    """Cluster the query embeddings into m groups and score the best cluster-to-class matching."""
    ctxs = _contexts(g, episode.query_inputs, h, fanout_cap, seed)
    enc = encode_contexts(ctxs, params, episode.task_kind, with_attr=False)
    emb = enc.targets.data.astype(np.float64)
    emb /= np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    assign, _ = kmeans(emb, episode.m, restarts=5, seed=seed)
    truth = episode.query_index
    conf = np.zeros((episode.m, episode.m))
    np.add.at(conf, (assign, truth), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / len(truth))


def evaluate(ckpt: Checkpoint, target: Graph, m: int, k_shots: int, n: int, episodes: int, seed: int,
             task_kind: str | None = None, h: int | None = None, fanout_cap=-1,
             zero_shot_fallback: bool = False) -> EvalReport:
    """Mean episode accuracy of a frozen checkpoint on ``target``.

    Parameters are never updated: the checkpoint digest is recorded before
    and after and must match.
    """
    if target.feature_dim != ckpt.d_in:
        raise DimensionMismatchError(
            f"target feature width {target.feature_dim} != checkpoint d_in {ckpt.d_in}; "
            "feature-projection adapters are not supported")
    if k_shots < 0:
        raise ValueError("k_shots must be >= 0")
    if k_shots == 0 and not zero_shot_fallback:
        raise ValueError("at least one support example per class required")
    cfg = ckpt.config
    task_kind = task_kind or cfg.get("task_kind", "node")
    h = h if h is not None else cfg.get("h", 2)
    fanout_cap = cfg.get("fanout_cap", 20) if fanout_cap == -1 else fanout_cap
    scale = cfg.get("logit_scale", 1.0)
    before = ckpt.digest()
    accs = []
    with ad.no_grad(), ad.default_dtype(np.float32):
        for e in range(episodes):
            ep_seed = derive_seed(seed, e)
            ep = sample_downstream_episode(target, m, k_shots, n, task_kind, seed=ep_seed)
            if k_shots == 0:
                accs.append(_zero_shot_accuracy(target, ep, ckpt.params, h, fanout_cap, ep_seed))
                continue
            logits = episode_logits(target, ep, ckpt.params, h, fanout_cap, ep_seed, scale)
            accs.append(episode_accuracy(logits, ep.query_index))
    after = ckpt.digest()
    if before != after:
        raise RuntimeError("parameters changed during evaluation")
    mean = float(np.mean(accs)) if accs else float("nan")
    std = float(np.std(accs)) if accs else float("nan")
    echo = {"m": m, "k_shots": k_shots, "n": n, "episodes": episodes, "seed": seed, "task_kind": task_kind,
            "h": h, "fanout_cap": fanout_cap, "zero_shot_fallback": zero_shot_fallback}
    return EvalReport(accs, mean, std, episodes, echo, before, after)


def episode_accuracy(logits, truth) -> float:
    pred = predict(logits)
    truth = np.asarray(truth)
    return float((pred == truth).mean())


# ---------------------------------------------------------------------------
# sweeps and ablations

ABLATIONS = {
    "baseline": "none",
    "O1": "O1",
    "O1+O2": "O1+O2",
    "O1+O3": "O1+O3",
    "O1+O2+O3": "O1+O2+O3",
}


def _train_eval_cell(args):
    source, target, cfg, eval_kwargs = args
    ckpt = train(source, cfg)
    return evaluate(ckpt, target, **eval_kwargs)


def _run_cells(cells: list, jobs: int) -> list[EvalReport]:
    if jobs <= 1 or len(cells) <= 1:
        return [_train_eval_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_eval_cell, cells))


def sweep_lambda_p(source: Graph, target: Graph, cfg: TrainConfig, lambdas: Iterable[float],
                   ps: Iterable[float], eval_kwargs: dict, jobs: int = 1) -> list[dict]:
    """Train and evaluate one model per (lambda, p) cell."""
    grid = [(lam, p) for lam in lambdas for p in ps]
    if not grid:
        raise ValueError("empty sweep grid")
    cells = [(source, target, dataclasses.replace(cfg, lam=lam, p=p), eval_kwargs) for lam, p in grid]
    reports = _run_cells(cells, jobs)
    return [{"lam": lam, "p": p, "mean": r.mean, "std": r.std} for (lam, p), r in zip(grid, reports)]


def sweep_eval(ckpt: Checkpoint, target: Graph, param: str, values: Iterable[int], eval_kwargs: dict) -> list[dict]:
    """Evaluate a fixed checkpoint over a grid of ``k_shots`` or ``m`` values; no retraining."""
    if param not in ("k_shots", "m"):
        raise ValueError(f"can only sweep k_shots or m, not {param!r}")
    values = list(values)
    if not values:
        raise ValueError("empty sweep grid")
    rows = []
    for v in values:
        kw = dict(eval_kwargs, **{param: v})
        r = evaluate(ckpt, target, **kw)
        rows.append({param: v, "mean": r.mean, "std": r.std})
    return rows


def ablate(source: Graph, target: Graph, cfg: TrainConfig, eval_kwargs: dict,
           seeds: Sequence[int] = (0,), arms: Iterable[str] | None = None, jobs: int = 1) -> list[dict]:
    """Train/evaluate each ablation arm with shared seeds.

    Rows carry the mean over all episodes of all seeds, the per-episode std
    and the std of the per-seed means.
    """
    arms = list(arms or ABLATIONS)
    cells, keys = [], []
    for arm in arms:
        for s in seeds:
            c = dataclasses.replace(cfg.with_ablation(ABLATIONS[arm]), seed=s)
            cells.append((source, target, c, eval_kwargs))
            keys.append((arm, s))
    reports = _run_cells(cells, jobs)
    rows = []
    for arm in arms:
        reps = [r for (a, _), r in zip(keys, reports) if a == arm]
        accs = [a for r in reps for a in r.accuracies]
        seed_means = [r.mean for r in reps]
        rows.append({
            "arm": arm,
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
            "seed_std": float(statistics.pstdev(seed_means)) if len(seed_means) > 1 else 0.0,
            "seed_means": seed_means,
        })
    return rows


def write_rows(path, rows: list[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(_cell(x) for x in v)
    return v
