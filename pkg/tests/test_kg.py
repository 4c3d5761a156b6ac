from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain_graph
from kgwalk.kg import (
    NO_OP,
    PAD,
    ConfigError,
    ParseError,
    Triple,
    UnknownEntityError,
    Vocab,
    VocabError,
    build_graph,
    cardinality_query_fractions,
    degree_stats,
    load_dataset,
    load_triples,
    out_edges,
    path_type_exceedance,
    path_type_histogram,
    relation_cardinality_classes,
    save_triples,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ------------------------------------------------------------------ vocab


def test_reserved_relations_and_inverse_pairs():
    v = Vocab()
    assert v.relation("PAD") == PAD == 0 and v.relation("NO_OP") == NO_OP == 1
    r = v.add_relation("born_in")
    assert r == 2 and v.relation("born_in_inv") == 3
    assert Vocab.inverse_id(r) == 3 and Vocab.inverse_id(3) == 2
    assert Vocab.is_inverse(3) and not Vocab.is_inverse(2) and not Vocab.is_inverse(NO_OP)
    with pytest.raises(ValueError):
        Vocab.inverse_id(NO_OP)


def test_vocab_ids_are_dense_in_first_seen_order():
    v = Vocab()
    assert [v.add_entity(x) for x in ("b", "a", "b", "c")] == [0, 1, 0, 2]
    assert v.num_entities == 3
    v.add_relation("x")
    v.add_relation("y")
    v.add_relation("x")
    assert v.num_relations == 6 and v.num_base_relations == 2
    assert v.forward_relations() == [2, 4]


def test_vocab_round_trip(tmp_path):
    v = Vocab()
    for x in ("p", "q"):
        v.add_entity(x)
    v.add_relation("r")
    v.save(tmp_path)
    w = Vocab.load(tmp_path)
    assert w.id_to_entity == v.id_to_entity
    assert w.id_to_relation == v.id_to_relation


def test_unknown_symbol_is_vocab_error():
    with pytest.raises(VocabError, match="nobody"):
        Vocab().entity("nobody")


# ------------------------------------------------------------------ loading


def test_load_triples_skips_blank_lines_and_reports_bad_rows(tmp_path):
    v = Vocab()
    p = write(tmp_path / "t.txt", "a\tr\tb\n\n  \nb\tr\tc\n")
    assert load_triples(p, v) == [Triple(0, 2, 1), Triple(1, 2, 2)]
    bad = write(tmp_path / "bad.txt", "a\tr\tb\na\tr\n")
    with pytest.raises(ParseError, match=r"bad.txt:2"):
        load_triples(bad, Vocab())


def test_frozen_mode_rejects_unseen_symbols(tmp_path):
    v = Vocab()
    load_triples(write(tmp_path / "a.txt", "a\tr\tb\n"), v)
    with pytest.raises(VocabError, match=r"b.txt:1"):
        load_triples(write(tmp_path / "b.txt", "a\tr\tzzz\n"), v, mode="frozen")


def test_save_and_reload_triples(tmp_path):
    v, triples, _ = chain_graph()
    save_triples(tmp_path / "out.txt", triples, v)
    w = Vocab()
    again = load_triples(tmp_path / "out.txt", w)
    assert [(w.id_to_entity[s], w.id_to_relation[r], w.id_to_entity[o]) for s, r, o in again] == [
        ("A", "r1", "B"), ("B", "r2", "C")]


def test_load_dataset_with_valid_alias_graph_and_candidates(tmp_path):
    write(tmp_path / "train.txt", "a\tr\tb\n")
    write(tmp_path / "valid.txt", "b\tr\tc\n")
    write(tmp_path / "test.txt", "c\tr\ta\n")
    write(tmp_path / "graph.txt", "a\ts\tc\n")
    write(tmp_path / "candidates.txt", "a\nc\n")
    ds = load_dataset(tmp_path)
    assert len(ds.dev) == 1 and len(ds.graph_triples) == 1
    assert [ds.vocab.id_to_entity[c] for c in ds.candidates] == ["a", "c"]
    assert ds.name == tmp_path.name


def test_load_dataset_drops_unseen_test_entities(tmp_path):
    write(tmp_path / "train.txt", "a\tr\tb\n")
    write(tmp_path / "dev.txt", "a\tr\tb\n")
    write(tmp_path / "test.txt", "a\tr\tnew\na\tr\tb\n")
    assert len(load_dataset(tmp_path).test) == 2
    assert len(load_dataset(tmp_path, drop_unseen_test_entities=True).test) == 1


def test_load_dataset_missing_directory():
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/dataset")


def test_negatives_need_binary_labels(tmp_path):
    write(tmp_path / "train.txt", "a\tr\tb\n")
    write(tmp_path / "negatives.txt", "a\tr\tb\t2\n")
    with pytest.raises(ParseError, match="label"):
        load_dataset(tmp_path)


def test_questions_are_linked_and_tokenized(tmp_path):
    write(tmp_path / "train.txt", "Heat\tdirected_by\tMichael Mann\n")
    write(tmp_path / "questions_train.txt", "who directed Heat?\t\tMichael Mann\n")
    write(tmp_path / "questions_test.txt", "who filmed Heat\tHeat\tMichael Mann\n")
    ds = load_dataset(tmp_path)
    q = ds.questions["train"][0]
    assert q.entity == ds.vocab.entity("Heat")
    assert q.answers == (ds.vocab.entity("Michael Mann"),)
    words = ds.questions["words"]
    assert ds.questions["test"][0].tokens[1] == words["<unk>"]


# ------------------------------------------------------------------ graph


def test_graph_has_noop_first_and_inverse_edges():
    v, triples, g = chain_graph()
    a, b = v.entity("A"), v.entity("B")
    edges = out_edges(g, b)
    assert edges[0].relation == NO_OP and edges[0].destination == b and edges[0].is_noop
    inv = [e for e in edges if e.is_inverse]
    assert [(e.relation, e.destination) for e in inv] == [(Vocab.inverse_id(v.relation("r1")), a)]
    assert g.has_edge(b, v.relation("r2"), v.entity("C"))


def test_graph_arrays_are_read_only():
    _, _, g = chain_graph()
    with pytest.raises(ValueError):
        g.relations[0, 0] = 5


def test_remove_drops_edge_and_its_inverse():
    v, triples, _ = chain_graph()
    g = build_graph(triples, 3, remove=[triples[0]], cap=None)
    a, r1, b = triples[0]
    assert not g.has_edge(a, r1, b)
    assert not g.has_edge(b, Vocab.inverse_id(r1), a)


def test_unknown_entity_errors():
    _, triples, g = chain_graph()
    with pytest.raises(UnknownEntityError):
        out_edges(g, 17)
    with pytest.raises(UnknownEntityError):
        build_graph([Triple(0, 2, 9)], 3)


def test_cap_keeps_noop_and_is_seeded():
    triples = [Triple(0, 2, o) for o in range(1, 30)]
    g1 = build_graph(triples, 30, cap=10, seed=1)
    g2 = build_graph(triples, 30, cap=10, seed=1)
    assert g1.degree[0] == 10 and g1.relations[0, 0] == NO_OP
    assert 0 in g1.truncated
    np.testing.assert_array_equal(g1.destinations, g2.destinations)
    with pytest.raises(ConfigError):
        build_graph(triples, 30, cap=0)


def test_actions_for_pads_and_masks():
    _, _, g = chain_graph()
    rels, dests, mask = g.actions_for(np.array([0, 1]))
    assert rels.shape == mask.shape == (2, 3)
    assert mask.tolist() == [[True, True, False], [True, True, True]]
    assert rels[0, 2] == PAD


triple_lists = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 2), st.integers(0, 7)).map(lambda t: Triple(t[0], 2 + 2 * t[1], t[2])),
    min_size=1, max_size=40)


@settings(max_examples=100, deadline=None)
@given(triple_lists)
def test_every_triple_appears_with_its_inverse(triples):
    g = build_graph(triples, 8, cap=None)
    edges = g.edge_set()
    for s, r, o in triples:
        assert (s, r, o) in edges and (o, r ^ 1, s) in edges
    for u in range(8):
        assert (u, NO_OP, u) in edges
    # nothing else: real edges come from triples or their inverses
    real = {(s, r, o) for s, r, o in triples} | {(o, r ^ 1, s) for s, r, o in triples}
    assert edges - {(u, NO_OP, u) for u in range(8)} == real


@settings(max_examples=100, deadline=None)
@given(triple_lists, st.integers(2, 6), st.integers(0, 3))
def test_cap_bounds_degree(triples, cap, seed):
    g = build_graph(triples, 8, cap=cap, seed=seed)
    assert (g.degree <= cap).all()
    assert (g.relations[:, 0] == NO_OP).all()
    full = build_graph(triples, 8, cap=None).edge_set()
    assert g.edge_set() <= full


# ------------------------------------------------------------------ analysis


def test_cardinality_classes():
    triples = [Triple(0, 2, 1), Triple(0, 2, 2), Triple(0, 2, 3),  # one head, three tails
               Triple(1, 4, 0), Triple(2, 4, 0), Triple(3, 4, 0),  # three heads, one tail
               Triple(0, 6, 1), Triple(1, 6, 2)]
    cls = relation_cardinality_classes(triples)
    assert cls[2] == ("1-to-M", 3.0)
    assert cls[4][0] == "M-to-1"
    assert cls[6] == ("1-to-1", 1.0)
    frac = cardinality_query_fractions([Triple(0, 2, 1), Triple(0, 4, 1)], cls)
    assert frac == {"1-to-M": 0.5, "M-to-1": 0.5, "1-to-1": 0.0}


def test_path_histogram_by_enumeration():
    v, triples, g = chain_graph()
    r1, r2 = v.relation("r1"), v.relation("r2")
    h = path_type_histogram(g, 2)
    # A-r1-B-r2-C, C-r2inv-B-r1inv-A, A-r1-B-r1inv-A, B-r1inv-A-r1-B, B-r2-C-r2inv-B, C-r2inv-B-r2-C
    assert h == Counter({(r1, r2): 1, (r2 ^ 1, r1 ^ 1): 1, (r1, r1 ^ 1): 1, (r1 ^ 1, r1): 1, (r2, r2 ^ 1): 1,
                         (r2 ^ 1, r2): 1})
    assert path_type_exceedance(h, [0, 1]) == [(0.0, 6), (1.0, 0)]


def test_path_histogram_sampling_estimates_counts():
    rng = np.random.default_rng(0)
    triples = [Triple(int(rng.integers(20)), 2 + 2 * int(rng.integers(3)), int(rng.integers(20))) for _ in range(60)]
    g = build_graph(triples, 20, cap=None)
    exact = path_type_histogram(g, 2)
    est = path_type_histogram(g, 2, sample_budget=20000, seed=1)
    assert abs(sum(est.values()) - sum(exact.values())) / sum(exact.values()) < 0.01
    top = exact.most_common(1)[0]
    assert abs(est[top[0]] - top[1]) / top[1] < 0.2


def test_degree_stats():
    out = degree_stats([Triple(0, 2, 1), Triple(0, 2, 2), Triple(1, 2, 2)], 4)
    assert out == {"avg_degree": 0.75, "median_degree": 0.5}
