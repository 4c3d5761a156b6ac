"""Command-line entry point: ``kgwalk <subcommand> [flags]``.

Subcommands: train, eval, stats, gridworld-gen, baseline-train, baseline-eval.

A ``--config`` file holds flat ``key = value`` lines (``#`` starts a comment);
keys are the long flag names with dashes or underscores. Command-line flags
override the file, the file overrides the per-dataset defaults, and those
override the built-in defaults.

On failure the process prints one line ``error: <kind>: <message>`` to stderr
and exits nonzero (2 for bad input or configuration, 1 for runtime failures).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import experiment as X
from .baseline import BaselineConfig, PathBaseline, evaluate_baseline, train_baseline
from .evaluation import known_answers_index, map_vs_negatives, render_path
from .gridworld import GridSpec, generate, write_gridworld
from .kg import (
    ConfigError,
    ParseError,
    UnknownEntityError,
    Vocab,
    VocabError,
    build_graph,
    cardinality_query_fractions,
    degree_stats,
    load_dataset,
    path_type_exceedance,
    path_type_histogram,
    relation_cardinality_classes,
)
from .numerics.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .policy import Policy, PolicyConfig
from .trainer import HyperParams, TrainingDiverged, defaults_for

log = logging.getLogger("kgwalk")

CHECKPOINT_NAME = "checkpoint.kgw"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ------------------------------------------------------------------ config


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into a dict with underscore keys."""
    out = {}
    p = Path(path)
    if not p.is_file():
        raise CliError("config", f"config file {p} does not exist")
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{p}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, action: argparse.Action):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)) or isinstance(
        action, argparse.BooleanOptionalAction
    ):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError("config", f"{action.dest}: expected a boolean, got {value!r}")
    if action.type is not None:
        try:
            return action.type(value)
        except ValueError as exc:
            raise CliError("config", f"{action.dest}: {exc}") from None
    return value


def parse_with_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill every flag not given on the command line."""
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        by_dest = {a.dest: a for a in sub._actions}
        unknown = sorted(set(cfg) - set(by_dest))
        if unknown:
            raise CliError("config", f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k: _coerce(v, by_dest[k]) for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser, dataset_required=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset-dir", required=False, default=None,
                   help="directory with train/dev/test triple files" + (" (required)" if dataset_required else ""))
    p.add_argument("--out", default="runs/out", help="output directory (all artifacts land here)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="evaluation worker threads; 1 is deterministic")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and configuration, write nothing")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--beam-width", type=int, default=50)
    p.add_argument("--horizon", type=int, default=None, help="path length T (per-dataset default)")
    p.add_argument("--filtered", dest="filtered", action="store_true", default=True, help="filtered ranking (default)")
    p.add_argument("--raw", dest="filtered", action="store_false", help="raw ranking")
    p.add_argument("--cap", type=int, default=200, help="per-node fan-out cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgwalk", description="Graph-walking query answering agent.")
    subs = parser.add_subparsers(dest="command", required=True)

    t = subs.add_parser("train", help="train the walking agent")
    _add_common(t)
    _add_model_flags(t)
    t.add_argument("--beta", type=float, default=None, help="entropy weight")
    t.add_argument("--lambda", dest="lam", type=float, default=None, help="baseline moving-average constant")
    t.add_argument("--rollouts", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--iterations", type=int, default=1000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--clip-norm", type=float, default=5.0)
    t.add_argument("--beta-decay", type=float, default=1.0)
    t.add_argument("--beta-decay-every", type=int, default=200)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--dev-limit", type=int, default=None, help="evaluate at most this many dev queries")
    t.add_argument("--normalize-advantage", action=argparse.BooleanOptionalAction, default=False)
    t.add_argument("--mask-direct-edge", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--entity-off", action="store_true")
    t.add_argument("--no-history", action="store_true")
    t.add_argument("--query-mode", choices=("relation", "bow", "directions"), default=None)
    t.add_argument("--embed-dim", type=int, default=200)
    t.add_argument("--hidden", type=int, default=400)
    t.add_argument("--lstm-layers", type=int, default=3)
    t.add_argument("--mlp-hidden", type=int, default=400)
    t.add_argument("--drop-unseen-test-entities", action="store_true")
    t.add_argument("--record-wallclock", action="store_true", help="add wallclock_s to metric log lines")

    e = subs.add_parser("eval", help="evaluate a checkpoint")
    _add_common(e)
    _add_model_flags(e)
    e.add_argument("--checkpoint", default=None, help=f"defaults to <out>/{CHECKPOINT_NAME}")
    e.add_argument("--split", choices=("dev", "test"), default="test")
    e.add_argument("--dump-paths", type=int, default=0, metavar="N", help="write top-N decoded paths per query")
    e.add_argument("--map-negatives", default=None, metavar="FILE", help="MAP against a negatives file")
    e.add_argument("--drop-unseen-test-entities", action="store_true")

    s = subs.add_parser("stats", help="dataset statistics and path-type histograms")
    _add_common(s)
    s.add_argument("--path-length", type=int, default=3)
    s.add_argument("--sample-budget", type=int, default=1_000_000)
    s.add_argument("--cap", type=int, default=None)

    g = subs.add_parser("gridworld-gen", help="generate the grid-world dataset")
    _add_common(g, dataset_required=False)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--queries-per-class", type=int, default=1000)

    for name in ("baseline-train", "baseline-eval"):
        b = subs.add_parser(name, help=f"random-walk path baseline ({name.split('-')[1]})")
        _add_common(b)
        b.add_argument("--horizon", type=int, default=3)
        b.add_argument("--k", type=int, default=100, help="sampled paths per query")
        b.add_argument("--embed-dim", type=int, default=50)
        b.add_argument("--hidden", type=int, default=100)
        b.add_argument("--iterations", type=int, default=500)
        b.add_argument("--batch-size", type=int, default=32)
        b.add_argument("--lr", type=float, default=1e-3)
        b.add_argument("--cap", type=int, default=200)
        b.add_argument("--filtered", dest="filtered", action="store_true", default=True)
        b.add_argument("--raw", dest="filtered", action="store_false")
        b.add_argument("--split", choices=("dev", "test"), default="test")
        b.add_argument("--checkpoint", default=None)
    return parser


# ------------------------------------------------------------------ helpers


def _dataset(args):
    if not args.dataset_dir:
        raise CliError("config", "--dataset-dir is required")
    d = Path(args.dataset_dir)
    if not d.is_dir():
        raise CliError("input", f"dataset directory {d} does not exist")
    return load_dataset(d, drop_unseen_test_entities=getattr(args, "drop_unseen_test_entities", False))


def _hyperparams(args, dataset_name: str) -> HyperParams:
    values = {f.name: f.default for f in fields(HyperParams)}
    values.update(defaults_for(dataset_name))
    for name in ("beta", "lam", "horizon"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for name in ("rollouts", "batch_size", "iterations", "lr", "gamma", "clip_norm", "seed", "beta_decay",
                 "beta_decay_every", "eval_every", "beam_width", "mask_direct_edge", "normalize_advantage"):
        values[name] = getattr(args, name)
    try:
        return HyperParams(**values)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    if not args.dry_run:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _metrics_only(m: dict) -> dict:
    return {k: v for k, v in m.items() if isinstance(v, (int, float, bool))}


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    ds = _dataset(args)
    hp = _hyperparams(args, ds.name)
    cfg = PolicyConfig(
        embed_dim=args.embed_dim,
        hidden=args.hidden,
        lstm_layers=args.lstm_layers,
        mlp_hidden=args.mlp_hidden,
        entity_off=args.entity_off,
        no_history=args.no_history,
        query_mode=args.query_mode or X.query_mode_for(ds),
    )
    if not X.split_queries(ds, "train"):
        raise CliError("input", f"dataset {ds.name} has no training queries")
    out = _out_dir(args)
    if args.dry_run:
        _emit({"dry_run": True, "dataset": ds.name, "hyperparams": asdict(hp), "policy_config": asdict(cfg),
               "num_entities": ds.vocab.num_entities, "num_relations": ds.vocab.num_relations})
        return 0
    settings = X.EvalSettings(beam_width=args.beam_width, filtered=args.filtered, threads=args.threads,
                              dev_limit=args.dev_limit)
    run = X.train_on_dataset(ds, hp, cfg, settings, cap=args.cap, log_path=out / "metrics.jsonl", dump_dir=out,
                             record_wallclock=args.record_wallclock, progress_every=50 if args.verbose else 0)
    save_checkpoint(out / CHECKPOINT_NAME, run.policy.state_dict(), X.checkpoint_meta(ds, run.policy, hp))
    ds.vocab.save(out)
    _emit({"dataset": ds.name, "best_dev_" + run.select_metric: run.result.best_metric,
           "checkpoint": str(out / CHECKPOINT_NAME)})
    return 0


def _load_policy(args, ds):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT_NAME
    if not ckpt.is_file():
        raise CliError("input", f"checkpoint {ckpt} does not exist")
    arrays, meta = load_checkpoint(ckpt)
    ne, nr = ds.vocab.num_entities, ds.vocab.num_relations
    if meta.get("num_entities") != ne or meta.get("num_relations") != nr:
        raise CliError("vocab", f"checkpoint vocabulary has {meta.get('num_entities')} entities and "
                                f"{meta.get('num_relations')} relations, dataset has {ne} and {nr}")
    saved_vocab = ckpt.parent / "entity_vocab.tsv"
    if saved_vocab.exists():
        v = Vocab.load(ckpt.parent)
        if v.entity_to_id != ds.vocab.entity_to_id or v.relation_to_id != ds.vocab.relation_to_id:
            raise CliError("vocab", "checkpoint vocabulary files do not match the dataset symbols")
    cfg = PolicyConfig(**meta["policy_config"])
    policy = Policy(ne, nr, cfg, num_words=meta.get("num_words", 1))
    try:
        policy.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CliError("checkpoint", str(exc)) from None
    return policy, meta


def cmd_eval(args) -> int:
    ds = _dataset(args)
    policy, meta = _load_policy(args, ds)
    horizon = args.horizon or meta["hyperparams"]["horizon"]
    if args.dry_run:
        _emit({"dry_run": True, "dataset": ds.name, "horizon": horizon, "split": args.split})
        return 0
    out = _out_dir(args)
    graph = X.evaluation_graph(ds, cap=args.cap, seed=meta["hyperparams"]["seed"])
    settings = X.EvalSettings(beam_width=args.beam_width, filtered=args.filtered, threads=args.threads)
    res = X.evaluate_split(policy, graph, ds, args.split, horizon, settings, keep_paths=args.dump_paths > 0)
    report = {"dataset": ds.name, "split": args.split, "filtered": args.filtered, "beam_width": args.beam_width,
              "horizon": horizon, **_metrics_only(res)}
    report["per_relation"] = _per_relation(ds, args.split, res["ranks"])
    if args.map_negatives:
        from .kg import load_negatives

        path = Path(args.map_negatives)
        if not path.is_file():
            raise CliError("input", f"negatives file {path} does not exist")
        records = load_negatives(path, ds.vocab)
        mp = map_vs_negatives(policy, graph, records, args.beam_width, horizon, seed=args.seed)
        report["map"] = {("overall" if k == "overall" else ds.vocab.id_to_relation[k]): v for k, v in mp.items()}
    if args.dump_paths:
        _dump_paths(out / f"paths_{args.split}.txt", ds, res["ranked"], args.split, args.dump_paths)
    with open(out / f"report_{args.split}.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_jsonable)
    _emit(report)
    return 0


def _per_relation(ds, split, ranks) -> dict:
    from .evaluation import hits_and_mrr

    queries = X.split_queries(ds, split)
    groups: dict = {}
    for q, r in zip(queries, ranks):
        name = ds.vocab.id_to_relation[q.relation] if q.relation else "question"
        groups.setdefault(name, []).append(r)
    return {k: hits_and_mrr(v) for k, v in sorted(groups.items())}


def _dump_paths(path, ds, ranked, split, n):
    queries = X.split_queries(ds, split)
    v = ds.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for q, ra in zip(queries, ranked):
            rel = v.id_to_relation[q.relation] if q.relation else "question"
            fh.write(f"query\t{v.id_to_entity[q.start]}\t{rel}\t{v.id_to_entity[q.answer]}\n")
            for i in range(min(n, len(ra.entities))):
                fh.write(f"  {i + 1}\t{ra.scores[i]:.4f}\t{render_path(ra.paths[i], v)}\n")


def cmd_stats(args) -> int:
    ds = _dataset(args)
    if args.path_length < 1:
        raise CliError("config", f"--path-length must be >= 1, got {args.path_length}")
    if args.dry_run:
        _emit({"dry_run": True, "dataset": ds.name})
        return 0
    out = _out_dir(args)
    train = list(ds.graph_triples)
    deg = degree_stats(train, ds.vocab.num_entities)
    classes = relation_cardinality_classes(train) if train else {}
    stats = {
        "dataset": ds.name,
        "entities": ds.vocab.num_entities,
        "relations": ds.vocab.num_base_relations,
        "facts": len(train),
        "queries": {"train": len(ds.train), "dev": len(ds.dev), "test": len(ds.test)},
        "degree": deg,
        "cardinality": {ds.vocab.id_to_relation[r]: c for r, c in classes.items()},
    }
    if ds.dev and classes:
        stats["dev_query_fractions"] = cardinality_query_fractions(ds.dev, classes)
    graph = build_graph(train, ds.vocab.num_entities, cap=args.cap, seed=args.seed)
    hist = path_type_histogram(graph, args.path_length, args.sample_budget, args.seed)
    csv_path = out / f"path_types_len{args.path_length}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_type", "count"])
        for types, count in sorted(hist.items(), key=lambda kv: (-kv[1], kv[0])):
            w.writerow(["|".join(ds.vocab.id_to_relation[r] for r in types), count])
    thresholds = [1, 10, 100, 1000, 10000]
    stats["path_types"] = {"length": args.path_length, "distinct": len(hist),
                           "exceedance": {str(t): n for t, n in path_type_exceedance(hist, thresholds)},
                           "csv": str(csv_path)}
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True, default=_jsonable)
    _emit(stats)
    return 0


def cmd_gridworld_gen(args) -> int:
    try:
        spec = GridSpec(size=args.size, queries_per_class=args.queries_per_class, seed=args.seed)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    world = generate(spec)
    summary = {"size": spec.size, "triples": len(world.triples),
               "train": {k: len(v) for k, v in world.train.items()},
               "test": {k: len(v) for k, v in world.test.items()}}
    if not args.dry_run:
        write_gridworld(world, _out_dir(args))
        summary["out"] = str(args.out)
    _emit(summary)
    return 0


def _baseline_config(args) -> BaselineConfig:
    return BaselineConfig(embed_dim=args.embed_dim, hidden=args.hidden, mlp_hidden=args.hidden, k=args.k,
                          horizon=args.horizon, batch_size=args.batch_size, iterations=args.iterations, lr=args.lr,
                          seed=args.seed)


def cmd_baseline_train(args) -> int:
    ds = _dataset(args)
    cfg = _baseline_config(args)
    if args.dry_run:
        _emit({"dry_run": True, "dataset": ds.name, "config": asdict(cfg)})
        return 0
    out = _out_dir(args)
    graph = X.evaluation_graph(ds, cap=args.cap, seed=args.seed)
    model = PathBaseline(ds.vocab.num_entities, ds.vocab.num_relations, cfg, seed=args.seed)
    losses = train_baseline(model, graph, ds.train, cfg, log_path=out / "baseline_metrics.jsonl")
    meta = {"dataset": ds.name, "num_entities": model.num_entities, "num_relations": model.num_relations,
            "baseline_config": asdict(cfg)}
    save_checkpoint(out / "baseline.kgw", model.state_dict(), meta)
    ds.vocab.save(out)
    _emit({"dataset": ds.name, "final_loss": losses[-1], "checkpoint": str(out / "baseline.kgw")})
    return 0


def cmd_baseline_eval(args) -> int:
    ds = _dataset(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "baseline.kgw"
    if not ckpt.is_file():
        raise CliError("input", f"checkpoint {ckpt} does not exist")
    arrays, meta = load_checkpoint(ckpt)
    if meta.get("num_entities") != ds.vocab.num_entities or meta.get("num_relations") != ds.vocab.num_relations:
        raise CliError("vocab", f"checkpoint vocabulary has {meta.get('num_entities')} entities and "
                                f"{meta.get('num_relations')} relations, dataset has {ds.vocab.num_entities} "
                                f"and {ds.vocab.num_relations}")
    cfg = BaselineConfig(**meta["baseline_config"])
    model = PathBaseline(ds.vocab.num_entities, ds.vocab.num_relations, cfg)
    model.load_state_dict(arrays)
    if args.dry_run:
        _emit({"dry_run": True, "dataset": ds.name})
        return 0
    out = _out_dir(args)
    graph = X.evaluation_graph(ds, cap=args.cap, seed=args.seed)
    fi = known_answers_index(ds.all_known()) if args.filtered else None
    res = evaluate_baseline(model, graph, getattr(ds, args.split), fi, seed=args.seed)
    report = {"dataset": ds.name, "split": args.split, "model": "path-baseline", **_metrics_only(res)}
    with open(out / f"baseline_report_{args.split}.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _emit(report)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "gridworld-gen": cmd_gridworld_gen,
    "baseline-train": cmd_baseline_train,
    "baseline-eval": cmd_baseline_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parse_with_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except (ParseError, VocabError, UnknownEntityError, ConfigError, CheckpointError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        print(f"error: input: {msg}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
