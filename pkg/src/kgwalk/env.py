"""The query-answering walk environment.

A state is ``(current, start, query relation, answer, t, horizon)``; the agent
observes everything but the answer. Actions are out-edges of the current
entity (NO_OP included), transitions are deterministic and the only reward is
``1`` at ``t == horizon`` when the agent stands on the answer.

:class:`BatchEnv` is the array form used by training and decoding; the scalar
functions exist for inspection, replay and tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kg import NO_OP, PAD, Action, KnowledgeGraph, UnknownEntityError, out_edges


class QueryError(ValueError):
    pass


class EnvContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class Query:
    """A question ``(start, relation, ?)`` with its gold answer.

    ``tokens`` holds word ids for natural-language questions and ``directions``
    holds relation ids for grid-world direction sequences; ``relation`` is PAD
    for those.
    """

    start: int
    relation: int
    answer: int
    tokens: tuple = ()
    directions: tuple = ()
    answers: frozenset = field(default_factory=frozenset)

    def known_answers(self) -> frozenset:
        return self.answers or frozenset([self.answer])


@dataclass(frozen=True)
class State:
    current: int
    start: int
    relation: int
    answer: int
    t: int
    horizon: int


@dataclass(frozen=True)
class Observation:
    current: int
    start: int
    relation: int


def observe(state: State) -> Observation:
    return Observation(state.current, state.start, state.relation)


def reset(graph: KnowledgeGraph, query: Query, num_rollouts: int, horizon: int) -> list[State]:
    if num_rollouts < 1:
        raise QueryError(f"num_rollouts must be >= 1, got {num_rollouts}")
    if horizon < 1:
        raise QueryError(f"horizon must be >= 1, got {horizon}")
    if not 0 <= query.start < graph.num_entities:
        raise QueryError(f"start entity {query.start} is not in the graph")
    s = State(query.start, query.start, query.relation, query.answer, 0, horizon)
    return [s] * num_rollouts


def legal_actions(graph: KnowledgeGraph, state: State, mask_direct_answer_edge: bool = False) -> list[Action]:
    """Out-edges of the current entity.

    With ``mask_direct_answer_edge`` the query's own edge ``(e1, r, e2)`` is
    hidden whenever the agent stands on ``e1``. Masking only the first step
    would let the agent wait with NO_OP and take the edge one step later.
    """
    if state.t >= state.horizon:
        raise EnvContractError("no actions in a terminal state")
    acts = out_edges(graph, state.current)
    if mask_direct_answer_edge and state.current == state.start:
        acts = [
            a for a in acts if a.is_noop or not (a.relation == state.relation and a.destination == state.answer)
        ]
    return acts


def step(graph: KnowledgeGraph, state: State, action: Action, mask_direct_answer_edge: bool = False) -> State:
    if state.t >= state.horizon:
        raise EnvContractError("step past the horizon")
    if action not in legal_actions(graph, state, mask_direct_answer_edge):
        raise EnvContractError(f"action {action} is not legal at entity {state.current}")
    return replace(state, current=action.destination, t=state.t + 1)


def terminal_reward(state: State) -> int:
    if state.t != state.horizon:
        raise EnvContractError(f"reward requested at t={state.t} before horizon {state.horizon}")
    return int(state.current == state.answer)


def replay(graph: KnowledgeGraph, query: Query, horizon: int, actions, mask_direct_answer_edge=False) -> list[State]:
    """States visited when ``actions`` are applied from ``reset``."""
    states = [reset(graph, query, 1, horizon)[0]]
    for a in actions:
        states.append(step(graph, states[-1], a, mask_direct_answer_edge))
    return states


class BatchEnv:
    """Many rollouts advanced in lock step over a shared read-only graph.

    Arrays are indexed by rollout. Illegal (padding or masked) action slots are
    reported through a boolean mask so the policy can give them zero mass.
    """

    def __init__(self, graph: KnowledgeGraph, queries: list[Query], num_rollouts: int, horizon: int,
                 mask_direct_answer_edge: bool = False):
        if num_rollouts < 1:
            raise QueryError(f"num_rollouts must be >= 1, got {num_rollouts}")
        if horizon < 1:
            raise QueryError(f"horizon must be >= 1, got {horizon}")
        self.graph = graph
        self.queries = queries
        self.num_rollouts = num_rollouts
        self.horizon = horizon
        self.mask_direct = mask_direct_answer_edge
        self.query_index = np.repeat(np.arange(len(queries)), num_rollouts)
        self.start = np.array([q.start for q in queries], dtype=np.int64)[self.query_index]
        self.relation = np.array([q.relation for q in queries], dtype=np.int64)[self.query_index]
        self.answer = np.array([q.answer for q in queries], dtype=np.int64)[self.query_index]
        if self.start.size and (self.start.min() < 0 or self.start.max() >= graph.num_entities):
            raise QueryError("a query start entity is not in the graph")
        self.current = self.start.copy()
        self.t = 0

    def __len__(self):
        return self.current.size

    def actions(self):
        if self.t >= self.horizon:
            raise EnvContractError("no actions after the horizon")
        rels, dests, mask = self.graph.actions_for(self.current)
        if self.mask_direct:
            direct = (rels == self.relation[:, None]) & (dests == self.answer[:, None]) & (rels != NO_OP)
            direct &= (self.current == self.start)[:, None]
            mask = mask & ~direct
        return rels, dests, mask

    def step(self, dests_chosen: np.ndarray) -> None:
        if self.t >= self.horizon:
            raise EnvContractError("step past the horizon")
        self.current = np.asarray(dests_chosen, dtype=np.int64)
        self.t += 1

    def rewards(self) -> np.ndarray:
        if self.t != self.horizon:
            raise EnvContractError(f"reward requested at t={self.t} before horizon {self.horizon}")
        return (self.current == self.answer).astype(np.float64)


__all__ = [
    "PAD",
    "BatchEnv",
    "EnvContractError",
    "Observation",
    "Query",
    "QueryError",
    "State",
    "UnknownEntityError",
    "legal_actions",
    "observe",
    "replay",
    "reset",
    "step",
    "terminal_reward",
]
