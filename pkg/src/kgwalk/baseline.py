"""Random-walk path baseline.

For a query ``(e1, r, ?)`` the model samples ``k`` uniform random walks of
length 1..T out of ``e1``, encodes each walk with an LSTM over
``[relation; entity]`` tokens, max-pools the ``k`` encodings, concatenates the
start-entity and query-relation embeddings and scores every entity with a
two-layer feed-forward network. Training minimizes softmax cross entropy of
the gold tail.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kg import NO_OP, KnowledgeGraph
from .numerics import tensor as T
from .numerics.lstm import init_lstm_weights, lstm_cell, xavier_uniform
from .numerics.optim import AdamState, adam_step, clip_by_global_norm
from .numerics.tensor import Tape, Tensor

log = logging.getLogger(__name__)


class PathSample(NamedTuple):
    """``k`` walks from one start entity.

    ``relations`` and ``entities`` are ``(k, T)``; only the first ``lengths[i]``
    steps of walk ``i`` are meaningful, the rest repeat the final entity with
    relation NO_OP.
    """

    relations: np.ndarray
    entities: np.ndarray
    lengths: np.ndarray

    def walks(self) -> list[tuple]:
        return [
            tuple(zip(self.relations[i, :n].tolist(), self.entities[i, :n].tolist()))
            for i, n in enumerate(self.lengths)
        ]


def _sample_walks(graph: KnowledgeGraph, starts: np.ndarray, horizon: int, rng: np.random.Generator,
                  exclude: np.ndarray | None = None):
    """Uniform random walks that avoid NO_OP unless a node has no other edge.

    ``exclude`` optionally holds one ``(relation, destination)`` pair per walk
    that may not be taken on the first step (the query's own edge at training
    time).
    """
    n = starts.size
    lengths = rng.integers(1, horizon + 1, size=n)
    rels = np.full((n, horizon), NO_OP, dtype=np.int64)
    ents = np.empty((n, horizon), dtype=np.int64)
    cur = starts.astype(np.int64).copy()
    for t in range(horizon):
        r_opts, d_opts, legal = graph.actions_for(cur)
        legal = legal & (r_opts != NO_OP)
        if t == 0 and exclude is not None:
            legal &= ~((r_opts == exclude[:, 0:1]) & (d_opts == exclude[:, 1:2]))
        u = rng.random(r_opts.shape)
        u[~legal] = -1.0
        j = np.argmax(u, axis=1)
        stuck = ~legal.any(axis=1)
        j[stuck] = 0
        active = t < lengths
        step_r = np.where(active, r_opts[np.arange(n), j], NO_OP)
        nxt = np.where(active, d_opts[np.arange(n), j], cur)
        rels[:, t] = step_r
        ents[:, t] = nxt
        cur = nxt
    return rels, ents, lengths


def sample_paths(graph: KnowledgeGraph, start: int, k: int = 100, horizon: int = 3,
                 rng: np.random.Generator | None = None, exclude: tuple | None = None) -> PathSample:
    """``k`` independent walks from ``start``, each with a length drawn uniformly from ``1..horizon``."""
    if not 0 <= start < graph.num_entities:
        raise LookupError(f"entity id {start} is not in the graph")
    rng = rng if rng is not None else np.random.default_rng()
    ex = None if exclude is None else np.tile(np.asarray(exclude, dtype=np.int64), (k, 1))
    rels, ents, lengths = _sample_walks(graph, np.full(k, start), horizon, rng, ex)
    return PathSample(rels, ents, lengths)


@dataclass
class BaselineConfig:
    embed_dim: int = 50
    hidden: int = 100
    mlp_hidden: int = 100
    k: int = 100
    horizon: int = 3
    batch_size: int = 32
    iterations: int = 500
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0


class PathBaseline:
    """Parameters and forward pass of the path classifier."""

    def __init__(self, num_entities: int, num_relations: int, config: BaselineConfig | None = None, seed: int = 0):
        self.config = cfg = config or BaselineConfig()
        self.num_entities = num_entities
        self.num_relations = num_relations
        rng = np.random.default_rng(seed)
        d, H = cfg.embed_dim, cfg.hidden
        p = {
            "rel_emb": xavier_uniform(rng, num_relations, d),
            "ent_emb": xavier_uniform(rng, num_entities, d),
        }
        p["path_lstm.W"], p["path_lstm.U"], p["path_lstm.b"] = init_lstm_weights(rng, 2 * d, H)
        p["classifier.W1"] = xavier_uniform(rng, H + 2 * d, cfg.mlp_hidden)
        p["classifier.b1"] = np.zeros(cfg.mlp_hidden)
        p["classifier.W2"] = xavier_uniform(rng, cfg.mlp_hidden, num_entities)
        p["classifier.b2"] = np.zeros(num_entities)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint has no parameter {k}")
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape}, model shape {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def encode_paths(self, rels: np.ndarray, ents: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Final LSTM state of each walk, ``(n, hidden)``; shorter walks stop updating after their length."""
        p = self.params
        n, horizon = rels.shape
        H = self.config.hidden
        h = Tensor(np.zeros((n, H)))
        c = Tensor(np.zeros((n, H)))
        for t in range(horizon):
            x = T.concat([T.embedding(p["rel_emb"], rels[:, t]), T.embedding(p["ent_emb"], ents[:, t])], axis=1)
            h_new, c_new = lstm_cell(x, h, c, p["path_lstm.W"], p["path_lstm.U"], p["path_lstm.b"])
            keep = (t < lengths).astype(np.float64)[:, None].repeat(H, axis=1)
            h = T.add(T.mul(Tensor(keep), h_new), T.mul(Tensor(1.0 - keep), h))
            c = T.add(T.mul(Tensor(keep), c_new), T.mul(Tensor(1.0 - keep), c))
        return h

    def logits(self, starts: np.ndarray, relations: np.ndarray, rels: np.ndarray, ents: np.ndarray,
               lengths: np.ndarray) -> Tensor:
        """Scores over all entities for ``B`` queries whose ``k`` walks are stacked row-major in ``rels``/``ents``."""
        p = self.params
        B = len(starts)
        k = rels.shape[0] // B
        enc = self.encode_paths(rels, ents, lengths)
        pooled = T.max_pool(T.reshape(enc, (B, k, self.config.hidden)), axis=1)
        x = T.concat([pooled, T.embedding(p["ent_emb"], starts), T.embedding(p["rel_emb"], relations)], axis=1)
        hid = T.relu(T.add(T.matmul(x, p["classifier.W1"]), p["classifier.b1"]))
        return T.add(T.matmul(hid, p["classifier.W2"]), p["classifier.b2"])


def score_targets(model: PathBaseline, paths: PathSample, start: int, relation: int) -> np.ndarray:
    """Classifier scores over every entity for one query given its sampled walks."""
    out = model.logits(np.array([start]), np.array([relation]), paths.relations, paths.entities, paths.lengths)
    return out.data[0]


def _sample_for(graph, queries, cfg, rng, training):
    starts = np.array([q[0] for q in queries], dtype=np.int64)
    relations = np.array([q[1] for q in queries], dtype=np.int64)
    rows = np.repeat(starts, cfg.k)
    exclude = None
    if training:
        exclude = np.repeat(np.array([[q[1], q[2]] for q in queries], dtype=np.int64), cfg.k, axis=0)
    rels, ents, lengths = _sample_walks(graph, rows, cfg.horizon, rng, exclude)
    return starts, relations, rels, ents, lengths


def cross_entropy(logits: Tensor, gold: np.ndarray) -> Tensor:
    return T.scale(T.sum(T.pick(T.log_softmax(logits), gold)), -1.0 / len(gold))


def train_baseline(model: PathBaseline, graph: KnowledgeGraph, triples, config: BaselineConfig | None = None,
                   log_path=None) -> list[float]:
    """Minibatch Adam on softmax cross entropy; returns the per-iteration training loss."""
    cfg = config or model.config
    triples = [tuple(t) for t in triples]
    if not triples:
        raise ValueError("no training triples")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    losses = []
    order = rng.permutation(len(triples))
    pos = 0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for it in range(1, cfg.iterations + 1):
            if pos >= len(order):
                order, pos = rng.permutation(len(triples)), 0
            batch = [triples[i] for i in order[pos : pos + cfg.batch_size]]
            pos += cfg.batch_size
            starts, relations, rels, ents, lengths = _sample_for(graph, batch, cfg, rng, training=True)
            for t in model.params.values():
                t.grad = None
            with Tape() as tape:
                loss = cross_entropy(model.logits(starts, relations, rels, ents, lengths),
                                     np.array([b[2] for b in batch]))
            tape.backward(loss)
            grads, _ = clip_by_global_norm({k: t.grad for k, t in model.params.items() if t.grad is not None},
                                           cfg.clip_norm)
            adam_step(model.params, grads, adam)
            losses.append(loss.item())
            if fh:
                fh.write(json.dumps({"iteration": it, "split": "train", "loss": round(loss.item(), 10)}) + "\n")
    finally:
        if fh:
            fh.close()
    return losses


def rank_entities(scores: np.ndarray) -> np.ndarray:
    """Entity ids by descending score, ties broken by entity id."""
    return np.lexsort((np.arange(scores.size), -scores))


def evaluate_baseline(model: PathBaseline, graph: KnowledgeGraph, triples, filter_index: dict | None = None,
                      seed: int = 0, batch_size: int = 64) -> dict:
    """Filtered (when ``filter_index`` is given) HITS@1/3/10 and MRR of the classifier ranking."""
    from .evaluation import hits_and_mrr

    cfg = model.config
    rng = np.random.default_rng(seed)
    triples = [tuple(t) for t in triples]
    ranks = []
    for i in range(0, len(triples), batch_size):
        batch = triples[i : i + batch_size]
        starts, relations, rels, ents, lengths = _sample_for(graph, batch, cfg, rng, training=False)
        scores = model.logits(starts, relations, rels, ents, lengths).data
        for (s, r, o), row in zip(batch, scores):
            known = set(filter_index.get((s, r), ())) if filter_index else set()
            known.discard(o)
            keep = np.ones(row.size, dtype=bool)
            keep[list(known)] = False
            ranks.append(1.0 + float(np.sum(keep & ((row > row[o]) | ((row == row[o]) & (np.arange(row.size) < o))))))
    out = hits_and_mrr(ranks)
    out["ranks"] = ranks
    return out
