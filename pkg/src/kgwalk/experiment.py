"""Glue between datasets, the trainer and the evaluators.

These helpers turn a loaded :class:`~kgwalk.kg.DatasetSplits` into queries and
an evaluation graph, run training with periodic dev evaluation and compute the
final report for a split. The command line and the acceptance suite both go
through here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .env import Query
from .evaluation import evaluate_queries, known_answers_index
from .kg import PAD, DatasetSplits, KnowledgeGraph, build_graph
from .policy import Policy, PolicyConfig
from .trainer import HyperParams, TrainResult, train


def queries_from_triples(triples) -> list[Query]:
    return [Query(int(s), int(r), int(o)) for s, r, o in triples]


def queries_from_questions(records) -> list[Query]:
    """One query per (question, answer) pair; every answer of the question is known."""
    out = []
    for rec in records:
        answers = frozenset(rec.answers)
        for a in rec.answers:
            out.append(Query(rec.entity, PAD, a, tokens=rec.tokens, answers=answers))
    return out


def split_queries(ds: DatasetSplits, split: str) -> list[Query]:
    if ds.questions:
        return queries_from_questions(ds.questions.get(split, []))
    return queries_from_triples(getattr(ds, split))


def evaluation_graph(ds: DatasetSplits, cap: int | None = 200, seed: int = 0) -> KnowledgeGraph:
    """Graph over the background facts with every dev and test triple (and its inverse) removed."""
    return build_graph(ds.graph_triples, ds.vocab.num_entities, remove=list(ds.dev) + list(ds.test), cap=cap,
                       seed=seed)


def num_words(ds: DatasetSplits) -> int:
    return len(ds.questions.get("words", {})) or 1


def query_mode_for(ds: DatasetSplits) -> str:
    return "bow" if ds.questions else "relation"


@dataclass
class EvalSettings:
    beam_width: int = 50
    filtered: bool = True
    threads: int = 1
    batch_size: int = 64
    dev_limit: int | None = None
    dev_beam_width: int | None = None


@dataclass
class RunOutput:
    policy: Policy
    graph: KnowledgeGraph
    result: TrainResult
    select_metric: str
    history: list = field(default_factory=list)


def select_metric_for(ds: DatasetSplits) -> str:
    return "auc_pr" if ds.candidates else "mrr"


def evaluate_split(policy: Policy, graph: KnowledgeGraph, ds: DatasetSplits, split: str, horizon: int,
                   settings: EvalSettings | None = None, keep_paths: bool = False, limit: int | None = None,
                   beam_width: int | None = None) -> dict:
    """HITS/MRR (and AUC-PR when the dataset lists candidates) on one split."""
    s = settings or EvalSettings()
    queries = split_queries(ds, split)
    if limit is not None:
        queries = queries[:limit]
    filter_index = None
    if s.filtered:
        filter_index = known_answers_index(ds.all_known())
    return evaluate_queries(policy, graph, queries, beam_width or s.beam_width, horizon, filter_index,
                            batch_size=s.batch_size, threads=s.threads, candidates=ds.candidates or None,
                            keep_paths=keep_paths)


def train_on_dataset(ds: DatasetSplits, hp: HyperParams, config: PolicyConfig | None = None,
                     settings: EvalSettings | None = None, cap: int | None = 200, log_path=None, dump_dir=None,
                     record_wallclock: bool = False, progress_every: int = 0) -> RunOutput:
    """Train a fresh policy on ``ds`` and reload the parameters with the best dev metric."""
    s = settings or EvalSettings()
    cfg = config or PolicyConfig(query_mode=query_mode_for(ds))
    graph = evaluation_graph(ds, cap=cap, seed=hp.seed)
    policy = Policy(ds.vocab.num_entities, ds.vocab.num_relations, cfg, num_words=num_words(ds), seed=hp.seed)
    train_queries = split_queries(ds, "train")
    metric = select_metric_for(ds)
    hook = None
    if split_queries(ds, "dev"):
        def hook(pol, iteration):
            out = evaluate_split(pol, graph, ds, "dev", hp.horizon, s, limit=s.dev_limit,
                                 beam_width=s.dev_beam_width)
            out.pop("ranks", None)
            return out

    result = train(policy, graph, train_queries, hp, hook, metric, log_path=log_path, dump_dir=dump_dir,
                   record_wallclock=record_wallclock, progress_every=progress_every)
    policy.load_state_dict(result.best_params)
    return RunOutput(policy, graph, result, metric, result.log)


def checkpoint_meta(ds: DatasetSplits, policy: Policy, hp: HyperParams) -> dict:
    return {
        "dataset": ds.name,
        "num_entities": policy.num_entities,
        "num_relations": policy.num_relations,
        "num_words": policy.num_words,
        "policy_config": asdict(policy.config),
        "hyperparams": asdict(hp),
    }


def mean_and_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
