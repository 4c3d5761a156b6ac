"""Triple loading, vocabularies, the augmented graph and dataset statistics."""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
NO_OP = 1
_RESERVED = ("PAD", "NO_OP")
INVERSE_SUFFIX = "_inv"


class ParseError(ValueError):
    pass


class VocabError(KeyError):
    pass


class UnknownEntityError(LookupError):
    pass


class ConfigError(ValueError):
    pass


class Triple(NamedTuple):
    subject: int
    relation: int
    object: int


class Vocab:
    """Dense symbol ids for entities and relations.

    Relation ids 0 and 1 are PAD and NO_OP. Every KB relation ``k`` (0-based in
    order of first appearance) owns the id pair ``2 + 2k`` (forward) and
    ``3 + 2k`` (inverse), so ``inverse_id(r) == r ^ 1`` and ids stay stable as
    new relations are added.
    """

    def __init__(self):
        self.entity_to_id: dict[str, int] = {}
        self.id_to_entity: list[str] = []
        self.relation_to_id: dict[str, int] = {name: i for i, name in enumerate(_RESERVED)}
        self.id_to_relation: list[str] = list(_RESERVED)

    @property
    def num_entities(self) -> int:
        return len(self.id_to_entity)

    @property
    def num_relations(self) -> int:
        """Size of the relation id space, reserved and inverse ids included."""
        return len(self.id_to_relation)

    @property
    def num_base_relations(self) -> int:
        return (len(self.id_to_relation) - len(_RESERVED)) // 2

    def add_entity(self, name: str) -> int:
        idx = self.entity_to_id.get(name)
        if idx is None:
            idx = self.entity_to_id[name] = len(self.id_to_entity)
            self.id_to_entity.append(name)
        return idx

    def add_relation(self, name: str) -> int:
        idx = self.relation_to_id.get(name)
        if idx is None:
            idx = len(self.id_to_relation)
            inv = name + INVERSE_SUFFIX
            self.relation_to_id[name] = idx
            self.relation_to_id[inv] = idx + 1
            self.id_to_relation.extend([name, inv])
        return idx

    def entity(self, name: str) -> int:
        try:
            return self.entity_to_id[name]
        except KeyError:
            raise VocabError(f"unknown entity {name!r}") from None

    def relation(self, name: str) -> int:
        try:
            return self.relation_to_id[name]
        except KeyError:
            raise VocabError(f"unknown relation {name!r}") from None

    @staticmethod
    def inverse_id(r: int) -> int:
        if r < len(_RESERVED):
            raise ValueError(f"relation id {r} is reserved and has no inverse")
        return r ^ 1

    @staticmethod
    def is_inverse(r) -> np.ndarray | bool:
        r = np.asarray(r)
        out = (r >= len(_RESERVED)) & (r % 2 == 1)
        return bool(out) if out.ndim == 0 else out

    def forward_relations(self) -> list[int]:
        return list(range(len(_RESERVED), self.num_relations, 2))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "entity_vocab.tsv", "w", encoding="utf-8") as fh:
            for i, name in enumerate(self.id_to_entity):
                fh.write(f"{name}\t{i}\n")
        with open(d / "relation_vocab.tsv", "w", encoding="utf-8") as fh:
            for i, name in enumerate(self.id_to_relation):
                fh.write(f"{name}\t{i}\n")

    @classmethod
    def load(cls, directory) -> Vocab:
        d = Path(directory)
        vocab = cls()
        vocab.id_to_relation = []
        vocab.relation_to_id = {}
        for fname, names, index in (
            ("entity_vocab.tsv", vocab.id_to_entity, vocab.entity_to_id),
            ("relation_vocab.tsv", vocab.id_to_relation, vocab.relation_to_id),
        ):
            rows = []
            with open(d / fname, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    parts = line.split("\t")
                    if len(parts) != 2:
                        raise ParseError(f"{d / fname}:{lineno}: expected 'symbol<TAB>id'")
                    rows.append((int(parts[1]), parts[0]))
            rows.sort()
            if [i for i, _ in rows] != list(range(len(rows))):
                raise ParseError(f"{d / fname}: ids are not dense and 0-based")
            for i, name in rows:
                names.append(name)
                index[name] = i
        if vocab.id_to_relation[: len(_RESERVED)] != list(_RESERVED):
            raise ParseError(f"{d}: relation vocab does not start with the reserved symbols")
        return vocab


def load_triples(path, vocab: Vocab, mode: str = "create") -> list[Triple]:
    """Read ``subject<TAB>relation<TAB>object`` lines.

    In ``"create"`` mode unseen symbols are added to ``vocab``; in ``"frozen"``
    mode they raise :class:`VocabError`. Blank lines are skipped.
    """
    if mode not in ("create", "frozen"):
        raise ValueError(f"mode must be 'create' or 'frozen', got {mode!r}")
    create = mode == "create"
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, found {len(parts)}")
            s, r, o = (p.strip() for p in parts)
            if create:
                triples.append(Triple(vocab.add_entity(s), vocab.add_relation(r), vocab.add_entity(o)))
            else:
                try:
                    triples.append(Triple(vocab.entity(s), vocab.relation(r), vocab.entity(o)))
                except VocabError as exc:
                    raise VocabError(f"{path}:{lineno}: {exc.args[0]}") from None
    return triples


def save_triples(path, triples: Iterable[Triple], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, r, o in triples:
            fh.write(f"{vocab.id_to_entity[s]}\t{vocab.id_to_relation[r]}\t{vocab.id_to_entity[o]}\n")


class Action(NamedTuple):
    relation: int
    destination: int
    is_noop: bool
    is_inverse: bool


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Padded adjacency arrays; row ``u`` lists the ``degree[u]`` out-edges of entity ``u``.

    Column 0 of every row is the NO_OP self-loop. Padding slots hold relation
    PAD and destination 0.
    """

    relations: np.ndarray
    destinations: np.ndarray
    degree: np.ndarray
    cap: int
    truncated: frozenset = field(default_factory=frozenset)

    @property
    def num_entities(self) -> int:
        return self.relations.shape[0]

    @property
    def max_degree(self) -> int:
        return self.relations.shape[1]

    def out_edges(self, entity: int) -> list[Action]:
        return out_edges(self, entity)

    def edge_set(self) -> set[tuple[int, int, int]]:
        out = set()
        for u in range(self.num_entities):
            for j in range(self.degree[u]):
                out.add((u, int(self.relations[u, j]), int(self.destinations[u, j])))
        return out

    def has_edge(self, u: int, r: int, v: int) -> bool:
        n = self.degree[u]
        return bool(((self.relations[u, :n] == r) & (self.destinations[u, :n] == v)).any())

    def actions_for(self, entities: np.ndarray):
        """Padded action arrays for a batch of entities: ``(relations, destinations, legal_mask)``."""
        entities = np.asarray(entities)
        width = int(self.degree[entities].max()) if entities.size else 1
        rels = self.relations[entities, :width]
        dests = self.destinations[entities, :width]
        mask = np.arange(width)[None, :] < self.degree[entities][:, None]
        return rels, dests, mask


def build_graph(
    train: Iterable[Triple],
    num_entities: int,
    remove: Iterable[Triple] = (),
    cap: int | None = 200,
    seed: int = 0,
) -> KnowledgeGraph:
    """Build the inverse-augmented multigraph with one NO_OP self-loop per entity.

    Duplicate triples collapse to one edge. Every triple in ``remove`` is
    dropped together with its inverse. Nodes with more than ``cap`` edges keep
    NO_OP plus a seeded random subset of ``cap - 1`` other edges; ``cap=None``
    disables truncation.
    """
    if cap is not None and cap < 1:
        raise ConfigError(f"fan-out cap must be >= 1, got {cap}")
    removed = set()
    for s, r, o in remove:
        removed.add((s, r, o))
        removed.add((o, Vocab.inverse_id(r), s))
    adj: dict[int, set] = defaultdict(set)
    for s, r, o in train:
        if not (0 <= s < num_entities and 0 <= o < num_entities):
            raise UnknownEntityError(f"triple ({s}, {r}, {o}) references an entity outside 0..{num_entities - 1}")
        for edge in ((s, r, o), (o, Vocab.inverse_id(r), s)):
            if edge not in removed:
                adj[edge[0]].add((edge[1], edge[2]))
    rng = np.random.default_rng(seed)
    rows = []
    truncated = set()
    for u in range(num_entities):
        edges = sorted(adj.get(u, ()))
        if cap is not None and len(edges) > cap - 1:
            keep = np.sort(rng.choice(len(edges), size=cap - 1, replace=False))
            edges = [edges[i] for i in keep]
            truncated.add(u)
        rows.append([(NO_OP, u)] + edges)
    width = max(len(r) for r in rows) if rows else 1
    rels = np.full((num_entities, width), PAD, dtype=np.int64)
    dests = np.zeros((num_entities, width), dtype=np.int64)
    degree = np.zeros(num_entities, dtype=np.int64)
    for u, row in enumerate(rows):
        degree[u] = len(row)
        rels[u, : len(row)] = [r for r, _ in row]
        dests[u, : len(row)] = [v for _, v in row]
    for arr in (rels, dests, degree):
        arr.setflags(write=False)
    return KnowledgeGraph(rels, dests, degree, cap if cap is not None else width, frozenset(truncated))


def out_edges(graph: KnowledgeGraph, entity: int) -> list[Action]:
    if not 0 <= entity < graph.num_entities:
        raise UnknownEntityError(f"entity id {entity} is not in the graph")
    n = graph.degree[entity]
    return [
        Action(int(r), int(v), r == NO_OP, bool(Vocab.is_inverse(r)))
        for r, v in zip(graph.relations[entity, :n], graph.destinations[entity, :n])
    ]


# ------------------------------------------------------------------ analysis


def relation_cardinality_classes(triples: Iterable[Triple], hi: float = 1.5, lo: float = 0.67) -> dict:
    """Label each relation by its ratio of distinct tails to distinct heads.

    Returns ``{relation: (label, ratio)}`` with labels ``"1-to-M"`` (ratio > hi),
    ``"M-to-1"`` (ratio < lo) or ``"1-to-1"``.
    """
    heads = defaultdict(set)
    tails = defaultdict(set)
    for s, r, o in triples:
        heads[r].add(s)
        tails[r].add(o)
    out = {}
    for r in heads:
        ratio = len(tails[r]) / len(heads[r])
        label = "1-to-M" if ratio > hi else "M-to-1" if ratio < lo else "1-to-1"
        out[r] = (label, ratio)
    return out


def cardinality_query_fractions(queries: Iterable[Triple], classes: dict) -> dict:
    """Fraction of queries whose relation falls in each cardinality class."""
    counts = Counter(classes[q.relation][0] for q in queries if q.relation in classes)
    total = sum(counts.values())
    return {label: counts.get(label, 0) / total if total else 0.0 for label in ("1-to-M", "M-to-1", "1-to-1")}


def _non_noop_adjacency(graph: KnowledgeGraph):
    adj = []
    for u in range(graph.num_entities):
        n = graph.degree[u]
        rels = graph.relations[u, :n]
        keep = rels != NO_OP
        adj.append((rels[keep], graph.destinations[u, :n][keep]))
    return adj


def path_type_histogram(graph: KnowledgeGraph, length: int, sample_budget: int = 1_000_000, seed: int = 0) -> Counter:
    """Count relation-label sequences over all walks of exactly ``length`` non-NO_OP edges.

    Walks are enumerated when there are at most ``sample_budget`` of them.
    Otherwise ``sample_budget`` walks are drawn uniformly from the full walk
    set and the counts are rescaled to estimates of the full-enumeration counts.
    """
    if length < 1:
        raise ValueError("path length must be >= 1")
    adj = _non_noop_adjacency(graph)
    n = graph.num_entities
    # walks[k][u]: number of walks with k edges starting at u
    walks = [np.ones(n, dtype=float)]
    for _ in range(length):
        prev = walks[-1]
        walks.append(np.array([prev[d].sum() for _, d in adj]))
    total = float(walks[length].sum())
    hist: Counter = Counter()
    if total == 0:
        return hist
    if total <= sample_budget:
        def dfs(u, depth, seq):
            if depth == length:
                hist[seq] += 1
                return
            rels, dests = adj[u]
            for r, v in zip(rels, dests):
                dfs(v, depth + 1, seq + (int(r),))

        for u in range(n):
            if walks[length][u] > 0:
                dfs(u, 0, ())
        return hist
    rng = np.random.default_rng(seed)
    starts = rng.choice(n, size=sample_budget, p=walks[length] / total)
    sampled: Counter = Counter()
    for u in starts:
        seq = []
        for k in range(length, 0, -1):
            rels, dests = adj[u]
            w = walks[k - 1][dests]
            j = rng.choice(len(dests), p=w / w.sum())
            seq.append(int(rels[j]))
            u = dests[j]
        sampled[tuple(seq)] += 1
    factor = total / sample_budget
    for key, c in sampled.items():
        hist[key] = int(round(c * factor))
    return hist


def path_type_exceedance(hist: Counter, thresholds: Iterable[float]) -> list[tuple[float, int]]:
    """Number of path types occurring more than ``x`` times, for each threshold ``x``."""
    counts = np.array(list(hist.values()))
    return [(float(x), int((counts > x).sum())) for x in thresholds]


def degree_stats(triples: Iterable[Triple], num_entities: int) -> dict:
    """Mean and median subject out-degree over ``num_entities`` entities."""
    deg = np.zeros(num_entities, dtype=np.int64)
    for s, _, _ in triples:
        deg[s] += 1
    return {"avg_degree": float(deg.mean()) if num_entities else 0.0, "median_degree": float(np.median(deg)) if num_entities else 0.0}


# ------------------------------------------------------------------ datasets


class NegativeRecord(NamedTuple):
    subject: int
    relation: int
    candidate: int
    label: int


class QuestionRecord(NamedTuple):
    text: str
    entity: int
    answers: tuple
    tokens: tuple


@dataclass
class DatasetSplits:
    vocab: Vocab
    train: list
    dev: list
    test: list
    graph_triples: list
    negatives: list = field(default_factory=list)
    questions: dict = field(default_factory=dict)
    name: str = ""
    candidates: list = field(default_factory=list)

    def all_known(self) -> list:
        return list(self.graph_triples) + list(self.train) + list(self.dev) + list(self.test)


_SPLIT_NAMES = {"train": ("train.txt",), "dev": ("dev.txt", "valid.txt"), "test": ("test.txt",)}


def _first_existing(d: Path, names):
    for n in names:
        if (d / n).exists():
            return d / n
    return None


def load_negatives(path, vocab: Vocab) -> list[NegativeRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields, found {len(parts)}")
            s, r, c, lab = parts
            if lab not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {lab!r}")
            try:
                out.append(NegativeRecord(vocab.entity(s), vocab.relation(r), vocab.entity(c), int(lab)))
            except VocabError as exc:
                raise VocabError(f"{path}:{lineno}: {exc.args[0]}") from None
    return out


def tokenize(text: str) -> list[str]:
    return [t for t in "".join(ch.lower() if ch.isalnum() else " " for ch in text).split() if t]


def link_entity(text: str, vocab: Vocab) -> int | None:
    """Longest entity name that occurs in ``text`` (case-insensitive substring match)."""
    low = text.lower()
    best = None
    for name, idx in vocab.entity_to_id.items():
        if len(name) > 1 and name.lower() in low and (best is None or len(name) > len(vocab.id_to_entity[best])):
            best = idx
    return best


def load_questions(path, vocab: Vocab, words: dict, create_words: bool) -> list[QuestionRecord]:
    """Read ``question<TAB>linked entity<TAB>answer1|answer2`` lines.

    An empty entity field is filled by :func:`link_entity`. Unknown words map to
    the ``<unk>`` token unless ``create_words`` is set.
    """
    out = []
    words.setdefault("<unk>", 0)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, found {len(parts)}")
            text, ent, answers = parts
            if not tokenize(text):
                raise ParseError(f"{path}:{lineno}: empty question text")
            if ent.strip():
                e = vocab.add_entity(ent.strip())
            else:
                e = link_entity(text, vocab)
                if e is None:
                    raise ParseError(f"{path}:{lineno}: no entity name found in question")
            ans = tuple(vocab.add_entity(a.strip()) for a in answers.split("|") if a.strip())
            toks = []
            for w in tokenize(text):
                if w not in words and create_words:
                    words[w] = len(words)
                toks.append(words.get(w, 0))
            out.append(QuestionRecord(text, e, ans, tuple(toks)))
    return out


def load_dataset(directory, drop_unseen_test_entities: bool = False, name: str = "") -> DatasetSplits:
    """Load a dataset directory.

    Expected files: ``train.txt``, ``dev.txt`` (or ``valid.txt``), ``test.txt``;
    optionally ``graph.txt`` holding background facts (the graph defaults to
    the training triples), ``negatives.txt``, ``questions_{train,dev,test}.txt``
    and ``candidates.txt`` (one entity per line; the answer set scored by AUC-PR).
    """
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    vocab = Vocab()
    graph_path = d / "graph.txt"
    graph = load_triples(graph_path, vocab) if graph_path.exists() else None
    splits = {}
    for split, names in _SPLIT_NAMES.items():
        p = _first_existing(d, names)
        splits[split] = load_triples(p, vocab) if p else []
    if graph is None:
        graph = list(splits["train"])
    negatives = load_negatives(d / "negatives.txt", _grow(vocab, d / "negatives.txt")) if (d / "negatives.txt").exists() else []
    questions = {}
    words: dict = {}
    for split in ("train", "dev", "test"):
        p = d / f"questions_{split}.txt"
        if p.exists():
            questions[split] = load_questions(p, vocab, words, create_words=split == "train")
    if questions:
        questions["words"] = words
    if drop_unseen_test_entities:
        seen = {s for s, _, _ in graph} | {o for _, _, o in graph}
        for split in ("dev", "test"):
            before = len(splits[split])
            splits[split] = [t for t in splits[split] if t.subject in seen and t.object in seen]
            log.info("%s: kept %d of %d queries with both entities in the graph", split, len(splits[split]), before)
    candidates = []
    if (d / "candidates.txt").exists():
        names = [x.strip() for x in (d / "candidates.txt").read_text(encoding="utf-8").splitlines() if x.strip()]
        candidates = [vocab.entity(n) for n in names]
    return DatasetSplits(vocab, splits["train"], splits["dev"], splits["test"], graph, negatives, questions,
                         name or d.name, candidates)


def _grow(vocab: Vocab, path: Path) -> Vocab:
    """Register every symbol of a negatives file so that loading never fails on unseen candidates."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) == 4:
                vocab.add_entity(parts[0])
                vocab.add_relation(parts[1])
                vocab.add_entity(parts[2])
    return vocab
