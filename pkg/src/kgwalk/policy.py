"""History-dependent walking policy.

An LSTM stack consumes ``[a_{t-1}; o_t]`` (previous relation embedding and
current entity embedding) and a two-layer ReLU network maps
``[h_t; o_t; r_q]`` to a vector that is dotted with every candidate action
embedding ``[r_l; e_d]``. A softmax over the legal actions gives the action
distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kg import PAD
from .numerics import tensor as T
from .numerics.lstm import init_lstm_weights, lstm_cell, xavier_uniform
from .numerics.tensor import Tensor

QUERY_MODES = ("relation", "bow", "directions")


class QueryEncodingError(ValueError):
    pass


@dataclass
class PolicyConfig:
    embed_dim: int = 200
    hidden: int = 400
    lstm_layers: int = 3
    mlp_hidden: int = 400
    entity_off: bool = False
    no_history: bool = False
    query_mode: str = "relation"
    score_route: str = "auto"

    def __post_init__(self):
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")
        if self.score_route not in ("auto", "table", "gather"):
            raise ValueError(f"score_route must be auto, table or gather, got {self.score_route!r}")


@dataclass
class PolicyState:
    """Per-rollout recurrent state: one ``(h, c)`` pair per LSTM layer plus the previous relation id.

    ``prev_relation`` uses the id ``num_relations`` for the START action.
    """

    layers: list
    prev_relation: np.ndarray

    @property
    def h(self) -> Tensor:
        return self.layers[-1][0]

    def take(self, rows: np.ndarray) -> PolicyState:
        rows = np.asarray(rows)
        return PolicyState(
            [(T.embedding(h, rows), T.embedding(c, rows)) for h, c in self.layers],
            self.prev_relation[rows],
        )


@dataclass
class ActionDistribution:
    log_probs: Tensor
    mask: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


class Policy:
    """Parameters and forward computations of the walking agent."""

    def __init__(self, num_entities: int, num_relations: int, config: PolicyConfig | None = None,
                 num_words: int = 1, seed: int = 0):
        self.config = cfg = config or PolicyConfig()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.num_words = num_words
        rng = np.random.default_rng(seed)
        d, H = cfg.embed_dim, cfg.hidden
        p = {}
        p["rel_emb"] = xavier_uniform(rng, num_relations, d)
        p["ent_emb"] = xavier_uniform(rng, num_entities, d)
        p["word_emb"] = xavier_uniform(rng, max(num_words, 1), d)
        p["start_emb"] = xavier_uniform(rng, 1, d)
        p["dummy_ent_emb"] = xavier_uniform(rng, 1, d)
        n_in = 2 * d
        for layer in range(cfg.lstm_layers):
            W, U, b = init_lstm_weights(rng, n_in, H)
            p[f"lstm.layer{layer}.W"], p[f"lstm.layer{layer}.U"], p[f"lstm.layer{layer}.b"] = W, U, b
            n_in = H
        W, U, b = init_lstm_weights(rng, d, d)
        p["query_lstm.W"], p["query_lstm.U"], p["query_lstm.b"] = W, U, b
        p["scorer.W1"] = xavier_uniform(rng, H + 2 * d, cfg.mlp_hidden)
        p["scorer.b1"] = np.zeros(cfg.mlp_hidden)
        p["scorer.W2"] = xavier_uniform(rng, cfg.mlp_hidden, 2 * d)
        p["scorer.b2"] = np.zeros(2 * d)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    # -------------------------------------------------------------- params

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint has no parameter {k}")
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape}, model shape {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    # -------------------------------------------------------------- queries

    def encode_queries(self, queries, mode: str | None = None) -> Tensor:
        """Query vectors ``r_q`` of shape ``(len(queries), embed_dim)``."""
        mode = mode or self.config.query_mode
        p = self.params
        if mode == "relation":
            rels = np.array([q.relation for q in queries], dtype=np.int64)
            if (rels == PAD).any():
                raise QueryEncodingError("relation-token encoding needs a query relation")
            return T.embedding(p["rel_emb"], rels)
        if mode == "bow":
            flat, seg = [], []
            for i, q in enumerate(queries):
                if not q.tokens:
                    raise QueryEncodingError("empty question text")
                flat.extend(q.tokens)
                seg.extend([i] * len(q.tokens))
            return T.segment_mean(T.embedding(p["word_emb"], np.array(flat)), np.array(seg), len(queries))
        if mode == "directions":
            return self._encode_directions([q.directions for q in queries])
        raise QueryEncodingError(f"unknown query mode {mode!r}")

    def _encode_directions(self, seqs) -> Tensor:
        if any(len(s) == 0 for s in seqs):
            raise QueryEncodingError("empty direction sequence")
        p = self.params
        d = self.config.embed_dim
        B = len(seqs)
        L = max(len(s) for s in seqs)
        lengths = np.array([len(s) for s in seqs])
        h = Tensor(np.zeros((B, d)))
        c = Tensor(np.zeros((B, d)))
        for t in range(L):
            toks = np.array([s[t] if t < len(s) else PAD for s in seqs], dtype=np.int64)
            x = T.embedding(p["rel_emb"], toks)
            h_new, c_new = lstm_cell(x, h, c, p["query_lstm.W"], p["query_lstm.U"], p["query_lstm.b"])
            live = lengths > t
            if live.all():
                h, c = h_new, c_new
            else:
                m = Tensor(np.repeat(live[:, None].astype(float), d, axis=1))
                h = T.add(h, T.mul(m, T.sub(h_new, h)))
                c = T.add(c, T.mul(m, T.sub(c_new, c)))
        return h

    # -------------------------------------------------------------- history

    def initial_state(self, batch: int) -> PolicyState:
        H = self.config.hidden
        zeros = [(Tensor(np.zeros((batch, H))), Tensor(np.zeros((batch, H)))) for _ in range(self.config.lstm_layers)]
        return PolicyState(zeros, np.full(batch, self.num_relations, dtype=np.int64))

    def observation_embedding(self, entities: np.ndarray) -> Tensor:
        entities = np.asarray(entities, dtype=np.int64)
        if self.config.entity_off:
            return T.embedding(self.params["dummy_ent_emb"], np.zeros_like(entities))
        return T.embedding(self.params["ent_emb"], entities)

    def encode_history(self, state: PolicyState, entities: np.ndarray) -> PolicyState:
        """Advance the LSTM stack on ``[a_{t-1}; o_t]``.

        ``state.prev_relation`` supplies ``a_{t-1}`` and ``entities`` supplies ``o_t``.
        """
        p = self.params
        table = T.concat([p["rel_emb"], p["start_emb"]], axis=0)
        a = T.embedding(table, state.prev_relation)
        x = T.concat([a, self.observation_embedding(entities)], axis=1)
        layers = []
        for i, (h, c) in enumerate(state.layers):
            h, c = lstm_cell(x, h, c, p[f"lstm.layer{i}.W"], p[f"lstm.layer{i}.U"], p[f"lstm.layer{i}.b"])
            layers.append((h, c))
            x = h
        return PolicyState(layers, state.prev_relation)

    # -------------------------------------------------------------- scoring

    def _route(self, width: int) -> str:
        route = self.config.score_route
        if route != "auto":
            return route
        return "table" if self.num_entities + self.num_relations <= 4 * max(width, 1) else "gather"

    def score(self, h: Tensor, entities: np.ndarray, query_vec: Tensor, rels: np.ndarray,
              dests: np.ndarray, mask: np.ndarray) -> ActionDistribution:
        """Log-probabilities over padded action slots; illegal slots get ``-inf``."""
        p = self.params
        d = self.config.embed_dim
        obs = self.observation_embedding(entities)
        mlp_in = T.concat([h, obs, query_vec], axis=1)
        hidden = T.relu(T.add(T.matmul(mlp_in, p["scorer.W1"]), p["scorer.b1"]))
        out = T.add(T.matmul(hidden, p["scorer.W2"]), p["scorer.b2"])
        out_r, out_e = T.split(out, [d, d], axis=1)
        if self._route(rels.shape[1]) == "table":
            s_r = T.pick(T.matmul(out_r, T.transpose(p["rel_emb"])), rels)
        else:
            s_r = T.batched_matvec(T.embedding(p["rel_emb"], rels), out_r)
        if self.config.entity_off:
            # every action row carries the same dummy entity vector, so its score
            # term is constant within a row and cancels in the softmax
            scores = s_r
        elif self._route(rels.shape[1]) == "table":
            scores = T.add(s_r, T.pick(T.matmul(out_e, T.transpose(p["ent_emb"])), dests))
        else:
            scores = T.add(s_r, T.batched_matvec(T.embedding(p["ent_emb"], dests), out_e))
        scores = T.masked_fill(scores, ~mask, -np.inf)
        return ActionDistribution(T.log_softmax(scores), mask)

    def step(self, state: PolicyState, entities: np.ndarray, query_vec: Tensor, rels: np.ndarray,
             dests: np.ndarray, mask: np.ndarray):
        """One decision: update history with the current observation, then score the legal actions.

        Returns ``(new_state, distribution)``. With ``no_history`` the history
        vector fed to the scorer is all zeros and the LSTM is skipped.
        """
        if self.config.no_history:
            h = Tensor(np.zeros((len(entities), self.config.hidden)))
            return state, self.score(h, entities, query_vec, rels, dests, mask)
        state = self.encode_history(state, entities)
        return state, self.score(state.h, entities, query_vec, rels, dests, mask)

    def advance(self, state: PolicyState, chosen_relations: np.ndarray) -> PolicyState:
        return PolicyState(state.layers, np.asarray(chosen_relations, dtype=np.int64))


# ------------------------------------------------------------------ sampling


def entropy(dist: ActionDistribution) -> Tensor:
    """Per-row entropy ``-sum p log p`` over legal actions."""
    logp = T.masked_fill(dist.log_probs, ~dist.mask, 0.0)
    p = T.masked_fill(T.exp(logp), ~dist.mask, 0.0)
    return T.scale(T.sum(T.mul(p, logp), axis=1), -1.0)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF categorical sampling, one index per row; zero-probability slots are never chosen."""
    probs = np.asarray(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    last_legal = probs.shape[1] - 1 - np.argmax((probs > 0)[:, ::-1], axis=1)
    # u can round up to the total mass; fall back to the last legal slot
    return np.minimum(idx, last_legal)


def sample_action(dist: ActionDistribution, rng: np.random.Generator, row: int = 0) -> tuple[int, float]:
    idx = int(sample_actions(dist.probs[row : row + 1], rng)[0])
    return idx, float(dist.log_probs.data[row, idx])


def argmax_action(dist: ActionDistribution, row: int = 0) -> int:
    return int(np.argmax(dist.log_probs.data[row]))


# ------------------------------------------------------------------ single-query helpers


def score_actions(policy: Policy, state: PolicyState, entity: int, query_vec: Tensor, actions) -> ActionDistribution:
    """Distribution over an explicit action list for one rollout (row 0 of ``state``)."""
    rels = np.array([[a.relation for a in actions]], dtype=np.int64)
    dests = np.array([[a.destination for a in actions]], dtype=np.int64)
    mask = np.ones_like(rels, dtype=bool)
    if policy.config.no_history:
        h = Tensor(np.zeros((1, policy.config.hidden)))
    else:
        h = state.h
    return policy.score(h, np.array([entity]), query_vec, rels, dests, mask)


def no_history_ablation_score(policy: Policy, entity: int, query_vec: Tensor, actions) -> ActionDistribution:
    h = Tensor(np.zeros((1, policy.config.hidden)))
    rels = np.array([[a.relation for a in actions]], dtype=np.int64)
    dests = np.array([[a.destination for a in actions]], dtype=np.int64)
    return policy.score(h, np.array([entity]), query_vec, rels, dests, np.ones_like(rels, dtype=bool))


def trajectory_log_prob(policy: Policy, graph, query, actions, horizon: int) -> Tensor:
    """Sum of per-step log-probabilities of an explicit action-index sequence for one query."""
    from .env import BatchEnv  # local import keeps policy free of env at module load

    env = BatchEnv(graph, [query], 1, horizon)
    qv = policy.encode_queries([query])
    state = policy.initial_state(1)
    total = None
    for j in actions:
        rels, dests, mask = env.actions()
        state, dist = policy.step(state, env.current, qv, rels, dests, mask)
        lp = T.pick(dist.log_probs, np.array([j]))
        total = lp if total is None else T.add(total, lp)
        state = policy.advance(state, rels[:, j])
        env.step(dests[:, j])
    return T.sum(total)


__all__ = [
    "ActionDistribution",
    "Policy",
    "PolicyConfig",
    "PolicyState",
    "QueryEncodingError",
    "argmax_action",
    "entropy",
    "no_history_ablation_score",
    "sample_action",
    "sample_actions",
    "score_actions",
    "trajectory_log_prob",
]
