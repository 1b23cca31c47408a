"""``ctp`` command line: generate graphs, pretrain, train, evaluate, sweep, ablate, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .embedder import pretrain
from .graph import gen_planted_partition, gen_relational, load_graph, save_graph
from .plotting import PlotError, plot_heatmap, plot_lines
from .training import (ABLATIONS, Checkpoint, TrainConfig, ablate, evaluate, sweep_eval, sweep_lambda_p, train,
                       write_rows)

log = logging.getLogger("ctp")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _default_seed() -> int:
    raw = os.environ.get("CTP_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CTP_SEED must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# TrainConfig keys that can be overridden from the command line
OVERRIDES = {
    "epochs": int, "lr": float, "weight_decay": float, "lam": float, "p": float, "h": int, "d": int,
    "m": int, "s": int, "n": int, "batches": int, "pool_size": int, "alpha": float, "dropout": float,
    "drop_rate": float, "mask_rate": float, "fanout_cap": int,
}


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="base seed (default: $CTP_SEED or 0)")
    p.add_argument("--task", choices=["node", "link"], help="task kind")
    for key, typ in OVERRIDES.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", type=typ, metavar=key.upper(),
                       help=f"override config '{key}'")


def _resolve_config(args, ablation: str | None = None) -> TrainConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    for key in OVERRIDES:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            data[key] = v
    if args.task:
        data["task_kind"] = args.task
    data["seed"] = args.seed if args.seed is not None else data.get("seed", _default_seed())
    try:
        cfg = TrainConfig.from_dict(data)
        if ablation:
            cfg = cfg.with_ablation(ablation)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _eval_kwargs(args) -> dict:
    seed = args.seed if args.seed is not None else _default_seed()
    kw = {"m": args.ways, "k_shots": args.shots, "n": args.queries, "episodes": args.episodes, "seed": seed}
    if getattr(args, "task", None):
        kw["task_kind"] = args.task
    return kw


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        if args.kind == "sbm":
            g = gen_planted_partition(args.communities, args.per, args.p_in, args.p_out, args.d_in,
                                      args.feature_shift, seed, mean_offset=args.mean_offset,
                                      basis_seed=args.basis_seed)
        else:
            g = gen_relational(args.entities, args.relations, args.edges, args.d_in, seed,
                               groups=args.groups, affinity=args.affinity, feature_shift=args.feature_shift,
                               basis_seed=args.basis_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_graph(g, args.out)
    print(f"wrote {g.node_count} nodes, {g.edge_count} edges to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    g = load_graph(args.graph)
    ecfg = cfg.embedder_config()
    table, params = pretrain(g, ecfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = checkpoint.save(out, dict(params.arrays(), table=table.matrix),
                             {"topology": params.topology, "graph_hash": table.graph_hash,
                              "config_hash": table.config_hash, "flagged": table.flagged},
                             checkpoint.EMBEDDING_MAGIC)
    _write_json(out.parent / "pretrain_config.json", cfg.to_dict())
    print(f"embeddings {table.matrix.shape} sha256={digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args, args.ablation)
    g = load_graph(args.graph)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.parent / "train.csv"
    ckpt = train(g, cfg, log_path=log_path)
    digest = ckpt.save(out)
    _write_json(out.parent / "train_config.json", cfg.to_dict())
    print(f"checkpoint {out} sha256={digest} steps={len(ckpt.log)}")
    return 0


def cmd_eval(args) -> int:
    kw = _eval_kwargs(args)
    ckpt = Checkpoint.load(args.ckpt)
    g = load_graph(args.graph)
    report = evaluate(ckpt, g, zero_shot_fallback=args.zero_shot_fallback, **kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    _write_json(out / "eval_config.json", dict(report.config, ckpt=str(args.ckpt), graph=str(args.graph),
                                                ckpt_sha256=report.hash_before))
    print(report.summary())
    return 0


def cmd_sweep(args) -> int:
    target = load_graph(args.target)
    kw = _eval_kwargs(args)
    out = Path(args.out)
    if args.grid == "lam-p":
        if not args.source:
            raise UsageError("--source is required for the lam-p grid")
        cfg = _resolve_config(args)
        rows = sweep_lambda_p(load_graph(args.source), target, cfg, args.lams, args.ps, kw, jobs=args.jobs)
        cols = ["lam", "p", "mean", "std"]
        echo = cfg.to_dict()
    else:
        if not args.ckpt:
            raise UsageError(f"--ckpt is required for the {args.grid} grid")
        if not args.values:
            raise UsageError("--values must list at least one grid value")
        param = "k_shots" if args.grid == "shots" else "m"
        rows = sweep_eval(Checkpoint.load(args.ckpt), target, param, args.values, kw)
        cols = [param, "mean", "std"]
        echo = {"ckpt": str(args.ckpt)}
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows(out, rows, cols)
    _write_json(out.parent / "sweep_config.json", dict(echo, grid=args.grid, eval=kw))
    for r in rows:
        print(", ".join(f"{c}={r[c]:.4f}" if isinstance(r[c], float) else f"{c}={r[c]}" for c in cols))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    kw = _eval_kwargs(args)
    arms = args.arms or list(ABLATIONS)
    bad = [a for a in arms if a not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown arms {bad}; choose from {list(ABLATIONS)}")
    rows = ablate(load_graph(args.source), load_graph(args.target), cfg, kw, seeds=args.seeds, arms=arms,
                  jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows(out, rows, ["arm", "mean", "std", "seed_std", "seed_means"])
    _write_json(out.parent / "ablate_config.json", dict(cfg.to_dict(), eval=kw, seeds=list(args.seeds)))
    for r in rows:
        print(f"{r['arm']}: mean={r['mean']:.4f}, std={r['std']:.4f}, seed_std={r['seed_std']:.4f}")
    return 0


def cmd_plot(args) -> int:
    if args.kind == "heatmap":
        if len(args.inputs) != 1:
            raise UsageError("heatmap takes exactly one --in CSV")
        plot_heatmap(args.inputs[0], args.out, x=args.x or "lam", y=args.y or "p", value=args.value,
                     title=args.title)
    else:
        if not args.x:
            raise UsageError("line charts need --x")
        plot_lines(args.inputs, args.out, x=args.x, value=args.value, labels=args.labels, title=args.title)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic graph as TSV files")
    g.add_argument("--kind", choices=["sbm", "relational"], default="sbm")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--communities", type=int, default=4, help="sbm: number of communities (default 4)")
    g.add_argument("--per", type=int, default=50, help="sbm: nodes per community (default 50)")
    g.add_argument("--p-in", type=float, default=0.2, help="sbm: intra-community edge probability (default 0.2)")
    g.add_argument("--p-out", type=float, default=0.01, help="sbm: inter-community edge probability (default 0.01)")
    g.add_argument("--d-in", type=int, default=8, help="feature width (default 8)")
    g.add_argument("--feature-shift", type=float, default=1.0, help="distance between class means (default 1.0)")
    g.add_argument("--mean-offset", type=float, default=0.0, help="sbm: constant added to every mean (default 0)")
    g.add_argument("--basis-seed", type=int, help="share class mean directions with other graphs generated with this seed")
    g.add_argument("--entities", type=int, default=200, help="relational: entity count (default 200)")
    g.add_argument("--relations", type=int, default=4, help="relational: relation count (default 4)")
    g.add_argument("--edges", type=int, default=1200, help="relational: edge count (default 1200)")
    g.add_argument("--groups", type=int, help="relational: latent entity groups (default: derived)")
    g.add_argument("--affinity", type=float, default=0.85, help="relational: share of on-pattern edges")
    g.set_defaults(func=cmd_gen)

    pt = sub.add_parser("pretrain", help="fit the neighbourhood embedder and write a .ctpe table")
    pt.add_argument("--graph", required=True)
    pt.add_argument("--out", required=True)
    _add_train_options(pt)
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="self-supervised pretraining of the prompt model")
    t.add_argument("--graph", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.ctpk)")
    t.add_argument("--log", help="training CSV (default: train.csv next to the checkpoint)")
    t.add_argument("--ablation", help="components to enable, e.g. O1+O3; 'none' disables all")
    _add_train_options(t)
    t.set_defaults(func=cmd_train)

    def eval_options(p):
        p.add_argument("--ways", type=int, default=3, help="classes per episode (default 3)")
        p.add_argument("--shots", type=int, default=3, help="support examples per class (default 3)")
        p.add_argument("--queries", type=int, default=4, help="queries per class (default 4)")
        p.add_argument("--episodes", type=int, default=100, help="evaluation episodes (default 100)")

    e = sub.add_parser("eval", help="tuning-free evaluation of a checkpoint on a graph")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--graph", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--task", choices=["node", "link"])
    e.add_argument("--out", default=".", help="output directory for eval.csv (default .)")
    e.add_argument("--zero-shot-fallback", action="store_true",
                   help="allow --shots 0 via label-free clustering of the queries")
    eval_options(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="lambda x p training grid, or shots / ways evaluation grid")
    s.add_argument("--grid", choices=["lam-p", "shots", "ways"], required=True)
    s.add_argument("--source", help="training graph (lam-p grid)")
    s.add_argument("--target", required=True, help="evaluation graph")
    s.add_argument("--ckpt", help="fixed checkpoint (shots / ways grids)")
    s.add_argument("--lams", type=_floats, default=[0.1, 0.3, 0.5])
    s.add_argument("--ps", type=_floats, default=[0.1, 0.3, 0.5])
    s.add_argument("--values", type=_ints, help="shots or ways values, comma separated")
    s.add_argument("--jobs", type=int, default=1, help="grid cells run in parallel (default 1)")
    s.add_argument("--out", required=True, help="output CSV")
    eval_options(s)
    _add_train_options(s)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="train and evaluate every ablation arm")
    a.add_argument("--source", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--seeds", type=_ints, default=[0], help="training seeds (default 0)")
    a.add_argument("--arms", type=lambda t: [x for x in t.split(",") if x], help=f"subset of {list(ABLATIONS)}")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", required=True, help="output CSV")
    eval_options(a)
    _add_train_options(a)
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render sweep CSVs as SVG")
    pl.add_argument("--kind", choices=["heatmap", "line"], required=True)
    pl.add_argument("--in", dest="inputs", nargs="+", required=True, help="input CSV(s)")
    pl.add_argument("--out", required=True)
    pl.add_argument("--x", help="x column (heatmap default lam)")
    pl.add_argument("--y", help="heatmap y column (default p)")
    pl.add_argument("--value", default="mean")
    pl.add_argument("--labels", nargs="+", help="legend labels, one per input")
    pl.add_argument("--title", default="")
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ctp: error: {exc}", file=sys.stderr)
        return 2
    except PlotError as exc:
        print(f"ctp: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"ctp: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
