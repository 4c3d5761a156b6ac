"""REINFORCE training with a moving-average baseline and entropy bonus."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .env import BatchEnv, Query
from .kg import KnowledgeGraph
from .numerics import tensor as T
from .numerics.optim import AdamState, adam_step, clip_by_global_norm
from .numerics.tensor import Tape, Tensor
from .policy import Policy, entropy, sample_actions

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class HyperParams:
    beta: float = 0.05
    lam: float = 0.05
    horizon: int = 3
    rollouts: int = 20
    batch_size: int = 128
    iterations: int = 1000
    lr: float = 1e-3
    gamma: float = 1.0
    clip_norm: float = 5.0
    seed: int = 0
    beta_decay: float = 1.0
    beta_decay_every: int = 200
    eval_every: int = 100
    beam_width: int = 50
    mask_direct_edge: bool = True
    normalize_advantage: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.rollouts < 1 or self.batch_size < 1:
            raise ValueError("rollouts and batch_size must be >= 1")

    def beta_at(self, iteration: int) -> float:
        if self.beta_decay == 1.0:
            return self.beta
        return self.beta * self.beta_decay ** (iteration // self.beta_decay_every)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# best settings per dataset: entropy weight, baseline moving-average constant, path length
DATASET_DEFAULTS = {
    "umls": dict(beta=0.05, lam=0.05, horizon=2),
    "kinship": dict(beta=0.1, lam=0.05, horizon=2),
    "countries_s1": dict(beta=0.01, lam=0.1, horizon=2),
    "countries_s2": dict(beta=0.02, lam=0.1, horizon=2),
    "countries_s3": dict(beta=0.01, lam=0.1, horizon=3),
    "wn18rr": dict(beta=0.05, lam=0.05, horizon=3),
    "nell-995": dict(beta=0.06, lam=0.0, horizon=3),
    "fb15k-237": dict(beta=0.02, lam=0.05, horizon=3),
    "wikimovies": dict(beta=0.15, lam=0.0, horizon=1),
}


def defaults_for(dataset: str) -> dict:
    key = dataset.lower().replace("kinships", "kinship").replace("nell995", "nell-995").replace("fb15k237", "fb15k-237")
    return dict(DATASET_DEFAULTS.get(key, {}))


@dataclass
class Trajectory:
    entities: tuple
    relations: tuple
    action_indices: tuple
    log_probs: tuple
    entropies: tuple
    reward: float
    returns: tuple


@dataclass
class RolloutBatch:
    """Sampled rollouts with the tape tensors needed for the loss.

    ``log_probs[t]`` and ``entropies[t]`` are ``(N,)`` tensors for step ``t``.
    """

    queries: list
    query_index: np.ndarray
    entities: np.ndarray
    relations: np.ndarray
    action_indices: np.ndarray
    log_probs: list
    entropies: list
    rewards: np.ndarray
    gamma: float = 1.0

    def __len__(self):
        return self.rewards.size

    @property
    def horizon(self) -> int:
        return self.action_indices.shape[1]

    def returns(self) -> np.ndarray:
        """Discounted return from each step; only the final step carries reward."""
        T_ = self.horizon
        disc = self.gamma ** np.arange(T_ - 1, -1, -1, dtype=np.float64)
        return self.rewards[:, None] * disc[None, :]

    def trajectories(self) -> list[Trajectory]:
        G = self.returns()
        lp = np.stack([x.data for x in self.log_probs], axis=1)
        ent = np.stack([x.data for x in self.entropies], axis=1)
        return [
            Trajectory(
                tuple(self.entities[i].tolist()),
                tuple(self.relations[i].tolist()),
                tuple(self.action_indices[i].tolist()),
                tuple(lp[i].tolist()),
                tuple(ent[i].tolist()),
                float(self.rewards[i]),
                tuple(G[i].tolist()),
            )
            for i in range(len(self))
        ]


def rollout_batch(policy: Policy, graph: KnowledgeGraph, queries: list[Query], hp: HyperParams,
                  rng: np.random.Generator, query_vectors: Tensor | None = None) -> RolloutBatch:
    """Sample ``hp.rollouts`` trajectories per query from the current policy.

    Must run inside a :class:`Tape` for the recorded tensors to be differentiable.
    """
    env = BatchEnv(graph, queries, hp.rollouts, hp.horizon, hp.mask_direct_edge)
    N = len(env)
    qv = query_vectors if query_vectors is not None else policy.encode_queries(queries)
    qv = T.embedding(qv, env.query_index)
    state = policy.initial_state(N)
    rows = np.arange(N)
    ents = [env.current.copy()]
    rels_taken, idx_taken, lps, hs = [], [], [], []
    for _ in range(hp.horizon):
        rels, dests, mask = env.actions()
        state, dist = policy.step(state, env.current, qv, rels, dests, mask)
        idx = sample_actions(dist.probs, rng)
        lps.append(T.pick(dist.log_probs, idx))
        hs.append(entropy(dist))
        chosen_rel = rels[rows, idx]
        state = policy.advance(state, chosen_rel)
        env.step(dests[rows, idx])
        ents.append(env.current.copy())
        rels_taken.append(chosen_rel)
        idx_taken.append(idx)
    return RolloutBatch(
        queries,
        env.query_index,
        np.stack(ents, axis=1),
        np.stack(rels_taken, axis=1),
        np.stack(idx_taken, axis=1),
        lps,
        hs,
        env.rewards(),
        hp.gamma,
    )


def advantages(returns: np.ndarray, baseline: float, normalize: bool = False) -> np.ndarray:
    """``G - b``, optionally standardized over the batch.

    Standardizing keeps the policy-gradient term on a unit scale when rewards are
    rare, so that the entropy weight keeps its intended relative strength.
    """
    adv = returns - baseline
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-6)
    return adv


def reinforce_loss(log_probs: list, entropies: list, returns: np.ndarray, baseline: float, beta: float,
                   normalize: bool = False) -> Tensor:
    """``-(1/N) sum_n sum_t (G_nt - b) log pi(a_nt) - beta (1/N) sum_n sum_t H_nt``.

    ``returns`` is ``(N, T)``; the baseline is a constant. With ``normalize``
    the advantages ``G - b`` are standardized over the batch first.
    """
    N, T_ = returns.shape
    adv = Tensor(advantages(returns, baseline, normalize))
    lp = T.concat([T.reshape(x, (N, 1)) for x in log_probs], axis=1)
    pg = T.sum(T.mul(adv, lp))
    loss = T.scale(pg, -1.0 / N)
    if beta:
        H = T.concat([T.reshape(x, (N, 1)) for x in entropies], axis=1)
        loss = T.sub(loss, T.scale(T.sum(H), beta / N))
    return loss


def update_baseline(b_prev: float, batch_mean: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * b_prev + lam * batch_mean


@dataclass
class TrainResult:
    policy: Policy
    best_params: dict
    best_metric: float
    log: list = field(default_factory=list)
    iterations: int = 0


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, size):
            yield perm[i : i + size]


def train_step(policy: Policy, graph: KnowledgeGraph, queries: list[Query], hp: HyperParams, adam: AdamState,
               baseline: float, rng: np.random.Generator, beta: float) -> tuple[float, float, float]:
    """One rollout → loss → backward → clip → Adam step. Returns ``(loss, mean reward, new baseline)``."""
    policy.zero_grad()
    with Tape() as tape:
        batch = rollout_batch(policy, graph, queries, hp, rng)
        G = batch.returns()
        loss = reinforce_loss(batch.log_probs, batch.entropies, G, baseline, beta, hp.normalize_advantage)
    if not np.isfinite(loss.data).all():
        raise TrainingDiverged(f"non-finite loss {loss.data}")
    tape.backward(loss)
    grads = policy.grads()
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name}")
    grads, _ = clip_by_global_norm(grads, hp.clip_norm)
    adam_step(policy.params, grads, adam)
    mean_reward = float(batch.rewards.mean())
    return loss.item(), mean_reward, update_baseline(baseline, float(G.mean()), hp.lam)


def train(policy: Policy, graph: KnowledgeGraph, train_queries: list[Query], hp: HyperParams,
          eval_hook: Callable[[Policy, int], dict] | None = None, select_metric: str = "mrr",
          log_path=None, dump_dir=None, record_wallclock: bool = False, progress_every: int = 0) -> TrainResult:
    """Optimize ``policy`` in place; keep the parameters with the best ``select_metric`` on the eval hook.

    Each logged evaluation is one JSON line with ``iteration``, ``split`` and the
    metrics; ``wallclock_s`` is added when ``record_wallclock`` is set (it makes
    logs differ between otherwise identical runs).
    """
    if not train_queries:
        raise ValueError("no training queries")
    rng = np.random.default_rng(hp.seed)
    adam = AdamState(lr=hp.lr)
    baseline = 0.0
    batches = _batches(len(train_queries), hp.batch_size, rng)
    records = []
    best_metric = -np.inf
    best_params = {k: v.copy() for k, v in policy.state_dict().items()}
    t0 = time.perf_counter()
    fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        if record_wallclock:
            rec["wallclock_s"] = round(time.perf_counter() - t0, 3)
        records.append(rec)
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    def run_eval(iteration):
        nonlocal best_metric, best_params
        metrics = eval_hook(policy, iteration)
        rec = {"iteration": iteration, "split": metrics.pop("split", "dev")}
        rec.update({k: v for k, v in metrics.items() if isinstance(v, (int, float, bool))})
        emit(rec)
        value = rec.get(select_metric, -np.inf)
        if value > best_metric:
            best_metric = value
            best_params = {k: v.copy() for k, v in policy.state_dict().items()}

    try:
        recent = []
        for it in range(1, hp.iterations + 1):
            idx = next(batches)
            queries = [train_queries[i] for i in idx]
            try:
                loss, reward, baseline = train_step(policy, graph, queries, hp, adam, baseline, rng, hp.beta_at(it))
            except TrainingDiverged as exc:
                if dump_dir:
                    _dump_batch(dump_dir, it, queries, policy)
                raise TrainingDiverged(f"iteration {it}: {exc}") from exc
            recent.append(reward)
            if progress_every and it % progress_every == 0:
                log.info("iter %d loss %.4f reward %.3f baseline %.3f", it, loss, np.mean(recent), baseline)
                recent = []
            if eval_hook is not None and hp.eval_every and it % hp.eval_every == 0:
                run_eval(it)
        if eval_hook is not None and (not hp.eval_every or hp.iterations % hp.eval_every):
            run_eval(hp.iterations)
    finally:
        if fh:
            fh.close()
    if eval_hook is None:
        best_params = {k: v.copy() for k, v in policy.state_dict().items()}
    return TrainResult(policy, best_params, float(best_metric), records, hp.iterations)


def _dump_batch(dump_dir, iteration, queries, policy):
    d = Path(dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / f"diverged_batch_{iteration}.json", "w", encoding="utf-8") as fh:
        json.dump({"iteration": iteration, "queries": [asdict(q) | {"answers": sorted(q.answers)} for q in queries],
                   "param_norms": {k: float(np.linalg.norm(v.data)) for k, v in policy.params.items()}}, fh)
