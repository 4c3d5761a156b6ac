"""Shared test utilities: finite-difference gradient checks and tiny graphs."""
from __future__ import annotations

import numpy as np

from kgwalk.kg import Triple, Vocab, build_graph
from kgwalk.numerics.tensor import Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / (|a| + |b|)`` over whole arrays; 0 when both vanish."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = float(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)))
    return 0.0 if den == 0.0 else num / den


def numeric_grad(f, x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x.data``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(build, inputs: list[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``build(*inputs)`` must return a scalar Tensor.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = build(*inputs)
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def value():
        return float(build(*inputs).data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numeric_grad(value, t, eps)))
    return worst


def chain_graph():
    """``A -r1-> B -r2-> C`` with vocab; returns (vocab, triples, graph)."""
    v = Vocab()
    a, b, c = (v.add_entity(x) for x in "ABC")
    r1, r2 = v.add_relation("r1"), v.add_relation("r2")
    triples = [Triple(a, r1, b), Triple(b, r2, c)]
    return v, triples, build_graph(triples, v.num_entities, cap=None)


def random_kg(rng: np.random.Generator, n_entities: int, n_relations: int, n_triples: int):
    v = Vocab()
    for i in range(n_entities):
        v.add_entity(f"e{i}")
    rels = [v.add_relation(f"r{i}") for i in range(n_relations)]
    triples = [
        Triple(int(rng.integers(n_entities)), int(rels[rng.integers(n_relations)]), int(rng.integers(n_entities)))
        for _ in range(n_triples)
    ]
    return v, triples


# ------------------------------------------------------------------ primitive gradient cases
#
# Each case maps a trial rng to (build, inputs). ``build`` returns a scalar that
# weights the primitive's output with a fixed random tensor so that every
# output entry contributes a distinct gradient.

from kgwalk.numerics import tensor as T  # noqa: E402
from kgwalk.numerics.lstm import lstm_cell  # noqa: E402


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _weighted(rng, shape):
    w = Tensor(rng.normal(size=shape))
    return lambda y: T.sum(T.mul(y, w))


def _away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    x[np.abs(x) < 0.1] += 0.3
    return Tensor(x, requires_grad=True)


def _case_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    f = _weighted(rng, (3, 2))
    return lambda a, b: f(T.matmul(a, b)), [a, b]


def _case_add(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    f = _weighted(rng, (3, 4))
    return lambda a, b: f(T.add(a, b)), [a, b]


def _case_bias_add(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    f = _weighted(rng, (3, 4))
    return lambda a, b: f(T.add(a, b)), [a, b]


def _case_sub(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    f = _weighted(rng, (2, 3))
    return lambda a, b: f(T.sub(a, b)), [a, b]


def _case_mul(rng):
    a, b = _param(rng, 2, 5), _param(rng, 2, 5)
    f = _weighted(rng, (2, 5))
    return lambda a, b: f(T.mul(a, b)), [a, b]


def _case_scale(rng):
    a = _param(rng, 4)
    c = float(rng.normal())
    f = _weighted(rng, (4,))
    return lambda a: f(T.scale(a, c)), [a]


def _case_concat(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 2)
    f = _weighted(rng, (2, 5))
    return lambda a, b: f(T.concat([a, b], axis=1)), [a, b]


def _case_split(rng):
    a = _param(rng, 3, 6)
    f1, f2 = _weighted(rng, (3, 2)), _weighted(rng, (3, 4))

    def build(a):
        x, y = T.split(a, [2, 4], axis=1)
        return T.add(f1(x), f2(y))

    return build, [a]


def _case_reshape_transpose(rng):
    a = _param(rng, 2, 6)
    f = _weighted(rng, (4, 3))
    return lambda a: f(T.transpose(T.reshape(a, (3, 4)))), [a]


def _case_relu(rng):
    a = _away_from_zero(rng, 3, 4)
    f = _weighted(rng, (3, 4))
    return lambda a: f(T.relu(a)), [a]


def _case_tanh(rng):
    a = _param(rng, 3, 4)
    f = _weighted(rng, (3, 4))
    return lambda a: f(T.tanh(a)), [a]


def _case_sigmoid(rng):
    a = _param(rng, 3, 4, scale=3.0)
    f = _weighted(rng, (3, 4))
    return lambda a: f(T.sigmoid(a)), [a]


def _case_exp(rng):
    a = _param(rng, 5)
    f = _weighted(rng, (5,))
    return lambda a: f(T.exp(a)), [a]


def _case_log(rng):
    a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    f = _weighted(rng, (2, 3))
    return lambda a: f(T.log(a)), [a]


def _case_softmax(rng):
    a = _param(rng, 3, 5)
    f = _weighted(rng, (3, 5))
    return lambda a: f(T.softmax(a)), [a]


def _case_log_softmax(rng):
    a = _param(rng, 3, 5)
    f = _weighted(rng, (3, 5))
    return lambda a: f(T.log_softmax(a)), [a]


def _case_masked_log_softmax(rng):
    a = _param(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.4
    mask[:, 0] = False
    w = Tensor(np.where(mask, 0.0, rng.normal(size=(3, 5))))
    return lambda a: T.sum(T.mul(T.masked_fill(T.log_softmax(T.masked_fill(a, mask, -np.inf)), mask, 0.0), w)), [a]


def _case_embedding(rng):
    table = _param(rng, 5, 3)
    ids = rng.integers(5, size=(4,))
    f = _weighted(rng, (4, 3))
    return lambda t: f(T.embedding(t, ids)), [table]


def _case_pick(rng):
    a = _param(rng, 4, 6)
    idx = rng.integers(6, size=(4, 3))
    f = _weighted(rng, (4, 3))
    return lambda a: f(T.pick(a, idx)), [a]


def _case_batched_matvec(rng):
    A, x = _param(rng, 3, 4, 2), _param(rng, 3, 2)
    f = _weighted(rng, (3, 4))
    return lambda A, x: f(T.batched_matvec(A, x)), [A, x]


def _case_sum_axis(rng):
    a = _param(rng, 3, 4)
    f = _weighted(rng, (3,))
    return lambda a: f(T.sum(a, axis=1)), [a]


def _case_mean(rng):
    a = _param(rng, 3, 4)
    return lambda a: T.mean(T.mul(a, a)), [a]


def _case_max_pool(rng):
    # distinct values keep the arg-max stable under the finite-difference step
    a = Tensor(rng.permutation(24).reshape(2, 3, 4) * 0.1 + rng.normal(scale=1e-3, size=(2, 3, 4)),
               requires_grad=True)
    f = _weighted(rng, (2, 4))
    return lambda a: f(T.max_pool(a, axis=1)), [a]


def _case_segment_mean(rng):
    a = _param(rng, 5, 3)
    seg = np.array([0, 0, 1, 2, 2])
    f = _weighted(rng, (3, 3))
    return lambda a: f(T.segment_mean(a, seg, 3)), [a]


def _case_lstm_cell(rng):
    n_in, H = 3, 2
    x, h, c = _param(rng, 2, n_in), _param(rng, 2, H), _param(rng, 2, H)
    W, U, b = _param(rng, n_in, 4 * H), _param(rng, H, 4 * H), _param(rng, 4 * H)
    f1, f2 = _weighted(rng, (2, H)), _weighted(rng, (2, H))

    def build(x, h, c, W, U, b):
        h2, c2 = lstm_cell(x, h, c, W, U, b)
        return T.add(f1(h2), f2(c2))

    return build, [x, h, c, W, U, b]


PRIMITIVE_CASES = {
    "matmul": _case_matmul,
    "add": _case_add,
    "bias_add": _case_bias_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "concat": _case_concat,
    "split": _case_split,
    "reshape_transpose": _case_reshape_transpose,
    "relu": _case_relu,
    "tanh": _case_tanh,
    "sigmoid": _case_sigmoid,
    "exp": _case_exp,
    "log": _case_log,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "masked_log_softmax": _case_masked_log_softmax,
    "embedding": _case_embedding,
    "pick": _case_pick,
    "batched_matvec": _case_batched_matvec,
    "sum_axis": _case_sum_axis,
    "mean": _case_mean,
    "max_pool": _case_max_pool,
    "segment_mean": _case_segment_mean,
    "lstm_cell": _case_lstm_cell,
}


def primitive_worst_error(name: str, trials: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, sorted(PRIMITIVE_CASES).index(name)])
    worst = 0.0
    for _ in range(trials):
        build, inputs = PRIMITIVE_CASES[name](rng)
        worst = max(worst, gradcheck(build, inputs))
    return worst


def tiny_policy_setup(seed: int = 0, entity_off: bool = False, no_history: bool = False, layers: int = 2):
    """3-entity graph, tiny policy and a handful of queries for end-to-end gradient checks."""
    from kgwalk.env import Query
    from kgwalk.policy import Policy, PolicyConfig

    v = Vocab()
    for x in ("a", "b", "c"):
        v.add_entity(x)
    r, s = v.add_relation("r"), v.add_relation("s")
    triples = [Triple(0, r, 1), Triple(1, s, 2), Triple(0, s, 2), Triple(2, r, 0)]
    graph = build_graph(triples, 3, cap=None)
    cfg = PolicyConfig(embed_dim=3, hidden=4, mlp_hidden=5, lstm_layers=layers, entity_off=entity_off,
                       no_history=no_history)
    policy = Policy(3, v.num_relations, cfg, seed=seed)
    queries = [Query(0, r, 1), Query(1, s, 2), Query(2, r, 0)]
    return v, graph, policy, queries


def policy_logprob_worst_error(trials: int = 100, seed: int = 0, horizon: int = 3, eps: float = 1e-6) -> float:
    """Worst relative error of the directional derivative of log pi(trajectory).

    Each trial draws a fresh tiny policy, a query, a random legal action
    sequence and a random unit direction ``u`` over all policy parameters, then
    compares ``grad . u`` with a central difference along ``u``.
    """
    from kgwalk.env import BatchEnv
    from kgwalk.policy import trajectory_log_prob

    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        _, graph, policy, queries = tiny_policy_setup(seed=trial, entity_off=trial % 3 == 2, layers=1 + trial % 2)
        q = queries[int(rng.integers(len(queries)))]
        env = BatchEnv(graph, [q], 1, horizon)
        actions = []
        for _ in range(horizon):
            _, dests, mask = env.actions()
            j = int(rng.integers(int(mask[0].sum())))
            actions.append(j)
            env.step(dests[:, j])
        policy.zero_grad()
        with Tape() as tape:
            lp = trajectory_log_prob(policy, graph, q, actions, horizon)
        tape.backward(lp)
        direction = {k: rng.normal(size=p.shape) for k, p in policy.params.items()}
        norm = np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
        analytic = sum(float((p.grad * direction[k]).sum()) / norm
                       for k, p in policy.params.items() if p.grad is not None)
        base = {k: p.data.copy() for k, p in policy.params.items()}

        def shifted(sign):
            for k, p in policy.params.items():
                p.data = base[k] + sign * eps * direction[k] / norm
            return float(trajectory_log_prob(policy, graph, q, actions, horizon).data)

        numeric = (shifted(1.0) - shifted(-1.0)) / (2 * eps)
        for k, p in policy.params.items():
            p.data = base[k]
        worst = max(worst, relative_error(np.array([analytic]), np.array([numeric])))
    return worst
