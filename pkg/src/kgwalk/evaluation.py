"""Beam-search decoding and ranking metrics.

Entities reached by some beam trajectory are ranked by the log-probability of
the best trajectory that ends on them; every other entity has rank infinity.
"""
from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .env import Query
from .kg import KnowledgeGraph, NegativeRecord
from .numerics import tensor as T
from .policy import Policy


@dataclass
class RankedAnswer:
    """Reached entities in rank order (score descending, entity id ascending on ties)."""

    entities: np.ndarray
    scores: np.ndarray
    paths: list = field(default_factory=list)

    def score_of(self, entity: int) -> float:
        hit = np.flatnonzero(self.entities == entity)
        return float(self.scores[hit[0]]) if hit.size else -math.inf

    def as_dict(self) -> dict:
        return {int(e): float(s) for e, s in zip(self.entities, self.scores)}


def _rank_entities(final_entities, final_scores, rel_hist=None, ent_hist=None) -> RankedAnswer:
    finite = np.isfinite(final_scores)
    ents = final_entities[finite]
    scores = final_scores[finite]
    rows = np.flatnonzero(finite)
    best: dict[int, tuple[float, int]] = {}
    for e, s, r in zip(ents.tolist(), scores.tolist(), rows.tolist()):
        if e not in best or s > best[e][0]:
            best[e] = (s, r)
    order = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))
    entities = np.array([e for e, _ in order], dtype=np.int64)
    sc = np.array([s for _, (s, _) in order], dtype=np.float64)
    paths = []
    if rel_hist is not None:
        for _, (_, r) in order:
            paths.append((tuple(int(x) for x in rel_hist[r]), tuple(int(x) for x in ent_hist[r])))
    return RankedAnswer(entities, sc, paths)


def beam_search(policy: Policy, graph: KnowledgeGraph, queries: list[Query], beam_width: int = 50,
                horizon: int = 3, keep_paths: bool = False) -> list[RankedAnswer]:
    """Decode all queries together, ``beam_width`` partial trajectories each.

    Every step expands each live beam by all its legal actions and keeps the
    ``beam_width`` highest accumulated log-probabilities per query; equal
    scores keep the earlier (beam, action) slot.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    if not queries:
        return []
    Q, W = len(queries), beam_width
    qv = policy.encode_queries(queries)
    row_query = np.repeat(np.arange(Q), W)
    qv = T.embedding(qv, row_query)
    cur = np.repeat(np.array([q.start for q in queries], dtype=np.int64), W)
    beam_lp = np.full((Q, W), -np.inf)
    beam_lp[:, 0] = 0.0
    state = policy.initial_state(Q * W)
    rel_hist = np.zeros((Q * W, 0), dtype=np.int64)
    ent_hist = cur[:, None].copy()
    for _ in range(horizon):
        rels, dests, mask = graph.actions_for(cur)
        state, dist = policy.step(state, cur, qv, rels, dests, mask)
        n = rels.shape[1]
        total = beam_lp.reshape(-1, 1) + dist.log_probs.data
        total = total.reshape(Q, W * n)
        k = min(W, W * n)
        top = np.argsort(-total, axis=1, kind="stable")[:, :k]
        if k < W:
            top = np.concatenate([top, np.zeros((Q, W - k), dtype=np.int64)], axis=1)
        new_lp = np.take_along_axis(total, top, axis=1)
        if k < W:
            new_lp[:, k:] = -np.inf
        src_beam, act = np.divmod(top, n)
        rows = (np.arange(Q)[:, None] * W + src_beam).reshape(-1)
        act = act.reshape(-1)
        state = state.take(rows)
        chosen_rel = rels[rows, act]
        cur = dests[rows, act]
        state = policy.advance(state, chosen_rel)
        rel_hist = np.concatenate([rel_hist[rows], chosen_rel[:, None]], axis=1)
        ent_hist = np.concatenate([ent_hist[rows], cur[:, None]], axis=1)
        beam_lp = new_lp
    out = []
    for q in range(Q):
        sl = slice(q * W, (q + 1) * W)
        out.append(
            _rank_entities(
                cur[sl], beam_lp[q], rel_hist[sl] if keep_paths else None, ent_hist[sl] if keep_paths else None
            )
        )
    return out


def batched_beam_search(policy, graph, queries, beam_width=50, horizon=3, batch_size=64, threads=1,
                        keep_paths=False) -> list[RankedAnswer]:
    chunks = [queries[i : i + batch_size] for i in range(0, len(queries), batch_size)]

    def run(chunk):
        return beam_search(policy, graph, chunk, beam_width, horizon, keep_paths)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [r for part in parts for r in part]


def enumerate_trajectories(policy: Policy, graph: KnowledgeGraph, query: Query, horizon: int) -> list:
    """Every length-``horizon`` trajectory with its log-probability, evaluated one prefix at a time."""
    qv = policy.encode_queries([query])
    out = []

    def rec(state, entity, lp, rels_so_far, ents_so_far):
        if len(rels_so_far) == horizon:
            out.append((lp, entity, tuple(rels_so_far), tuple(ents_so_far)))
            return
        rels, dests, mask = graph.actions_for(np.array([entity]))
        new_state, dist = policy.step(state, np.array([entity]), qv, rels, dests, mask)
        for j in range(int(mask[0].sum())):
            r, v = int(rels[0, j]), int(dests[0, j])
            rec(policy.advance(new_state, np.array([r])), v, lp + float(dist.log_probs.data[0, j]),
                rels_so_far + [r], ents_so_far + [v])

    rec(policy.initial_state(1), query.start, 0.0, [], [query.start])
    return out


def exhaustive_ranking(policy, graph, query, horizon) -> RankedAnswer:
    trajs = enumerate_trajectories(policy, graph, query, horizon)
    return _rank_entities(np.array([t[1] for t in trajs]), np.array([t[0] for t in trajs]))


# ------------------------------------------------------------------ ranks and metrics


def filtered_rank(ranked: RankedAnswer, gold: int, known: frozenset | set = frozenset()) -> float:
    """1-based rank of ``gold``; entities in ``known`` (other than gold) are skipped. ``inf`` if unreached."""
    pos = 0
    for e in ranked.entities.tolist():
        if e == gold:
            return float(pos + 1)
        if e in known:
            continue
        pos += 1
    return math.inf


def hits_and_mrr(ranks, ks=(1, 3, 10)) -> dict:
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        return {**{f"hits{k}": 0.0 for k in ks}, "mrr": 0.0}
    out = {f"hits{k}": float((ranks <= k).mean()) for k in ks}
    out["mrr"] = float(np.where(np.isfinite(ranks), 1.0 / ranks, 0.0).mean())
    return out


class AucPr(NamedTuple):
    value: float
    random_fallback: bool


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve; tied scores form one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    npos = int(labels.sum())
    if npos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    n = ends + 1
    precision = tp / n
    recall = tp / npos
    prev = np.r_[0.0, recall[:-1]]
    return float(((recall - prev) * precision).sum())


def auc_pr(scores, labels, rng: np.random.Generator | None = None) -> AucPr:
    """Pooled AUC-PR in percent.

    If no candidate was reached (all scores ``-inf``) the candidates are ranked
    in a seeded random order and the result is flagged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.size and not np.isfinite(scores).any():
        rng = rng or np.random.default_rng(0)
        perm_scores = -rng.permutation(scores.size).astype(np.float64)
        return AucPr(100.0 * average_precision(perm_scores, labels), True)
    return AucPr(100.0 * average_precision(scores, labels), False)


def ranked_average_precision(scores, labels, rng: np.random.Generator) -> float:
    """AP for one query with a strict ordering: a seeded shuffle, then a stable sort by score.

    Unreached candidates score ``-inf``; when nothing is reached the ordering is
    the random shuffle alone.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    perm = rng.permutation(scores.size)
    order = perm[np.argsort(-scores[perm], kind="stable")]
    y = labels[order]
    npos = y.sum()
    if npos == 0:
        return 0.0
    hits = np.cumsum(y)
    return float((hits[y == 1] / (np.flatnonzero(y) + 1)).sum() / npos)


def map_vs_negatives(policy: Policy, graph: KnowledgeGraph, records: list[NegativeRecord], beam_width=50,
                     horizon=3, seed=0, batch_size=64) -> dict:
    """Mean average precision per query relation against a fixed candidate list.

    Returns ``{relation_id: MAP}`` plus ``"overall"``.
    """
    groups = defaultdict(list)
    for rec in records:
        groups[(rec.subject, rec.relation)].append((rec.candidate, rec.label))
    keys = sorted(groups)
    queries = []
    for s, r in keys:
        pos = [c for c, lab in groups[(s, r)] if lab == 1]
        queries.append(Query(s, r, pos[0] if pos else s))
    ranked = batched_beam_search(policy, graph, queries, beam_width, horizon, batch_size)
    rng = np.random.default_rng(seed)
    per_rel = defaultdict(list)
    for (s, r), ra in zip(keys, ranked):
        cands = groups[(s, r)]
        scores = [ra.score_of(c) for c, _ in cands]
        labels = [lab for _, lab in cands]
        if sum(labels) == 0:
            continue
        per_rel[r].append(ranked_average_precision(scores, labels, rng))
    out = {r: float(np.mean(v)) for r, v in per_rel.items()}
    allv = [x for v in per_rel.values() for x in v]
    out["overall"] = float(np.mean(allv)) if allv else 0.0
    return out


def known_answers_index(triples) -> dict:
    idx = defaultdict(set)
    for s, r, o in triples:
        idx[(s, r)].add(o)
    return idx


def evaluate_queries(policy: Policy, graph: KnowledgeGraph, queries: list[Query], beam_width=50, horizon=3,
                     filter_index: dict | None = None, batch_size=64, threads=1, candidates=None,
                     keep_paths=False) -> dict:
    """HITS@1/3/10 and MRR (filtered when ``filter_index`` is given); AUC-PR when ``candidates`` is given.

    The result also carries ``ranks`` and, with ``keep_paths``, the decoded answers.
    """
    ranked = batched_beam_search(policy, graph, queries, beam_width, horizon, batch_size, threads, keep_paths)
    ranks = []
    for q, ra in zip(queries, ranked):
        known = set()
        if filter_index is not None:
            known = filter_index.get((q.start, q.relation), set()) | set(q.known_answers())
        ranks.append(filtered_rank(ra, q.answer, known))
    out = hits_and_mrr(ranks)
    out["ranks"] = ranks
    if candidates is not None:
        scores, labels = [], []
        for q, ra in zip(queries, ranked):
            for c in candidates:
                scores.append(ra.score_of(c))
                labels.append(int(c in q.known_answers()))
        res = auc_pr(scores, labels)
        out["auc_pr"] = res.value
        out["auc_pr_random_fallback"] = res.random_fallback
    if keep_paths:
        out["ranked"] = ranked
    return out


def gridworld_accuracy(policy: Policy, graph: KnowledgeGraph, queries_by_class: dict, horizon: int,
                       beam_width: int = 1, batch_size: int = 128) -> dict:
    """Top-1 exact-match accuracy of decoded answers, per length class and overall."""
    out = {}
    correct = total = 0
    for label, queries in queries_by_class.items():
        ranked = batched_beam_search(policy, graph, queries, beam_width, horizon, batch_size)
        hits = sum(1 for q, ra in zip(queries, ranked) if ra.entities.size and ra.entities[0] == q.answer)
        out[label] = hits / len(queries) if queries else 0.0
        correct += hits
        total += len(queries)
    out["overall"] = correct / total if total else 0.0
    return out


def render_path(path, vocab) -> str:
    rels, ents = path
    parts = [vocab.id_to_entity[ents[0]]]
    for r, e in zip(rels, ents[1:]):
        parts.append(f"—{vocab.id_to_relation[r]}→ {vocab.id_to_entity[e]}")
    return " ".join(parts)
