import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_kg, tiny_policy_setup
from kgwalk.env import Query
from kgwalk.evaluation import (
    RankedAnswer,
    auc_pr,
    average_precision,
    batched_beam_search,
    beam_search,
    enumerate_trajectories,
    evaluate_queries,
    exhaustive_ranking,
    filtered_rank,
    hits_and_mrr,
    map_vs_negatives,
    ranked_average_precision,
)
from kgwalk.kg import NegativeRecord, build_graph
from kgwalk.policy import Policy, PolicyConfig


def small_world(seed, horizon, limit=50):
    """A random graph and query with at most ``limit`` length-``horizon`` trajectories."""
    rng = np.random.default_rng(seed)
    while True:
        n = int(rng.integers(3, 7))
        v, triples = random_kg(rng, n, int(rng.integers(1, 4)), int(rng.integers(2, 8)))
        graph = build_graph(triples, n, cap=None)
        cfg = PolicyConfig(embed_dim=4, hidden=5, mlp_hidden=6, lstm_layers=1 + seed % 2, entity_off=seed % 3 == 0)
        policy = Policy(n, v.num_relations, cfg, seed=seed)
        s, r, o = triples[int(rng.integers(len(triples)))]
        q = Query(s, r, o)
        if len(enumerate_trajectories(policy, graph, q, horizon)) <= limit:
            return graph, policy, q


@pytest.mark.parametrize("seed", range(20))
def test_beam_ranking_equals_exhaustive_enumeration(seed):
    horizon = 2 + seed % 2
    graph, policy, q = small_world(seed, horizon)
    beam = beam_search(policy, graph, [q], beam_width=50, horizon=horizon)[0]
    exact = exhaustive_ranking(policy, graph, q, horizon)
    np.testing.assert_array_equal(beam.entities, exact.entities)
    np.testing.assert_allclose(beam.scores, exact.scores, rtol=0, atol=1e-12)


def test_beam_of_one_follows_the_greedy_path():
    _, graph, policy, queries = tiny_policy_setup(seed=2)
    q = queries[1]
    trajs = enumerate_trajectories(policy, graph, q, 1)
    best = max(trajs, key=lambda t: t[0])
    ra = beam_search(policy, graph, [q], beam_width=1, horizon=1)[0]
    assert ra.entities.tolist() == [best[1]]


def test_beam_search_batches_agree_with_single_queries():
    _, graph, policy, queries = tiny_policy_setup(seed=3)
    together = batched_beam_search(policy, graph, queries, beam_width=5, horizon=3, batch_size=2)
    for q, ra in zip(queries, together):
        alone = beam_search(policy, graph, [q], beam_width=5, horizon=3)[0]
        np.testing.assert_array_equal(ra.entities, alone.entities)
        np.testing.assert_allclose(ra.scores, alone.scores, atol=1e-12)


def test_threaded_beam_search_matches_single_thread():
    _, graph, policy, queries = tiny_policy_setup(seed=3)
    a = batched_beam_search(policy, graph, queries * 4, beam_width=5, horizon=3, batch_size=2, threads=1)
    b = batched_beam_search(policy, graph, queries * 4, beam_width=5, horizon=3, batch_size=2, threads=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.entities, y.entities)
        np.testing.assert_array_equal(x.scores, y.scores)


def test_beam_paths_are_graph_walks():
    _, graph, policy, queries = tiny_policy_setup(seed=5)
    ra = beam_search(policy, graph, queries[:1], beam_width=10, horizon=3, keep_paths=True)[0]
    assert len(ra.paths) == ra.entities.size
    for (rels, ents), e in zip(ra.paths, ra.entities):
        assert ents[0] == queries[0].start and ents[-1] == e
        for u, r, w in zip(ents, rels, ents[1:]):
            assert graph.has_edge(u, r, w)


def test_beam_width_must_be_positive():
    _, graph, policy, queries = tiny_policy_setup()
    with pytest.raises(ValueError):
        beam_search(policy, graph, queries, beam_width=0)


# ------------------------------------------------------------------ ranks


def ranked(entities):
    return RankedAnswer(np.array(entities, dtype=np.int64), -np.arange(len(entities), dtype=float))


def test_filtered_rank_skips_other_known_answers():
    ra = ranked([7, 3, 5, 9])
    assert filtered_rank(ra, 5) == 3
    assert filtered_rank(ra, 5, known={7, 5}) == 2
    assert filtered_rank(ra, 42) == math.inf


def test_rank_fixture_one_two_unreached():
    m = hits_and_mrr([1, 2, math.inf])
    assert m["mrr"] == 0.5
    assert m["hits1"] == 1 / 3
    assert m["hits3"] == 2 / 3
    assert m["hits10"] == 2 / 3


def test_rank_fixture_mixed():
    m = hits_and_mrr([4, 10, 11, 1])
    assert m["mrr"] == (1 / 4 + 1 / 10 + 1 / 11 + 1) / 4
    assert m["hits1"] == 0.25
    assert m["hits3"] == 0.25
    assert m["hits10"] == 0.75


def test_empty_rank_list():
    assert hits_and_mrr([])["mrr"] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.integers(1, 60).map(float), st.just(math.inf)), min_size=1, max_size=30))
def test_metric_ranges_and_monotonic_hits(ranks):
    m = hits_and_mrr(ranks)
    assert 0.0 <= m["mrr"] <= 1.0
    assert m["hits1"] <= m["hits3"] <= m["hits10"]
    assert m["mrr"] >= m["hits1"]


# ------------------------------------------------------------------ AUC-PR and MAP


def test_average_precision_fixtures():
    # perfect ranking
    assert average_precision([3, 2, 1], [1, 1, 0]) == 1.0
    # positive ranked 1st and 3rd: (1/2)(1/1) + (1/2)(2/3)
    assert average_precision([3, 2, 1], [1, 0, 1]) == pytest.approx(0.5 + 1 / 3, abs=0)
    # all tied: single threshold, precision 1/2 at recall 1
    assert average_precision([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5
    assert average_precision([1, 2], [0, 0]) == 0.0


def test_auc_pr_treats_unreached_as_lowest_and_reports_percent():
    res = auc_pr([-1.0, -np.inf, -2.0], [1, 0, 1])
    assert res.value == 100.0
    assert not res.random_fallback


def test_auc_pr_random_fallback_is_flagged_and_seeded():
    scores = [-np.inf] * 6
    labels = [1, 0, 0, 1, 0, 0]
    a = auc_pr(scores, labels, np.random.default_rng(1))
    b = auc_pr(scores, labels, np.random.default_rng(1))
    assert a.random_fallback and a == b


def test_ranked_average_precision_fixture():
    rng = np.random.default_rng(0)
    # positives at ranks 1 and 3: (1/1 + 2/3) / 2
    assert ranked_average_precision([0.9, 0.5, 0.4, 0.1], [1, 0, 1, 0], rng) == (1 + 2 / 3) / 2
    assert ranked_average_precision([0.9, 0.5], [0, 0], rng) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=1, max_size=20))
def test_average_precision_in_unit_interval(pairs):
    scores, labels = zip(*pairs)
    ap = average_precision(scores, labels)
    assert 0.0 <= ap <= 1.0 + 1e-12


def test_map_vs_negatives_groups_by_query():
    _, graph, policy, _ = tiny_policy_setup(seed=0)
    r = 2  # relation "r" in the tiny vocab
    records = [NegativeRecord(0, r, 1, 1), NegativeRecord(0, r, 2, 0), NegativeRecord(2, r, 0, 1),
               NegativeRecord(2, r, 1, 0)]
    out = map_vs_negatives(policy, graph, records, beam_width=10, horizon=2)
    assert set(out) == {r, "overall"}
    assert 0.0 < out["overall"] <= 1.0


def test_evaluate_queries_reports_filtered_metrics_and_auc():
    _, graph, policy, queries = tiny_policy_setup(seed=0)
    out = evaluate_queries(policy, graph, queries, beam_width=10, horizon=2, filter_index={}, candidates=[0, 1, 2])
    assert len(out["ranks"]) == 3
    assert 0.0 <= out["auc_pr"] <= 100.0
    assert set(out) >= {"hits1", "hits3", "hits10", "mrr"}
