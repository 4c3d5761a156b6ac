"""Synthetic grid-world knowledge base for long-chain navigation queries.

Every cell of an ``n x n`` grid is an entity and every in-bounds compass move is
a triple ``(cell, direction, neighbor)``. A query is a start cell plus a
sequence of directions; its answer is the cell reached by following them.
Cells are named ``"(row,col)"`` with row 0 at the top, so North decreases the
row index.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Query
from .kg import PAD, Triple, Vocab

log = logging.getLogger(__name__)

DIRECTIONS = {
    "North": (-1, 0),
    "NorthEast": (-1, 1),
    "East": (0, 1),
    "SouthEast": (1, 1),
    "South": (1, 0),
    "SouthWest": (1, -1),
    "West": (0, -1),
    "NorthWest": (-1, -1),
}

DEFAULT_CLASSES = ((2, 4), (5, 6), (7, 8), (9, 10))


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Grid size, query counts and length classes.

    ``length_classes`` are inclusive ``(lo, hi)`` ranges; the default classes
    are labeled 2-4, 4-6, 6-8 and 8-10 with each boundary length belonging to
    exactly one class.
    """

    size: int = 16
    queries_per_class: int = 1000
    length_classes: tuple = DEFAULT_CLASSES
    test_fraction: float = 0.2
    seed: int = 0
    directions: tuple = tuple(DIRECTIONS)

    def __post_init__(self):
        if self.size < 2:
            raise GenerationError(f"grid size must be >= 2, got {self.size}")
        for lo, hi in self.length_classes:
            if lo < 1 or hi < lo:
                raise GenerationError(f"bad length class ({lo}, {hi})")
        unknown = set(self.directions) - set(DIRECTIONS)
        if unknown:
            raise GenerationError(f"unknown directions {sorted(unknown)}")
        if not 0.0 < self.test_fraction < 1.0:
            raise GenerationError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")

    @property
    def max_length(self) -> int:
        return max(hi for _, hi in self.length_classes)


def class_label(lo: int, hi: int, classes=DEFAULT_CLASSES) -> str:
    """Display label of a length class: the default ``(5, 6)`` reads ``"4-6"``."""
    if tuple(classes) == DEFAULT_CLASSES and (lo, hi) != DEFAULT_CLASSES[0]:
        return f"{lo - 1}-{hi}"
    return f"{lo}-{hi}"


def cell_name(row: int, col: int) -> str:
    return f"({row},{col})"


def parse_cell(name: str) -> tuple[int, int]:
    row, col = name.strip("()").split(",")
    return int(row), int(col)


def walk(start: tuple[int, int], directions, size: int):
    """Coordinate-arithmetic simulation; returns the final cell or ``None`` if the walk leaves the grid."""
    r, c = start
    for d in directions:
        dr, dc = DIRECTIONS[d]
        r, c = r + dr, c + dc
        if not (0 <= r < size and 0 <= c < size):
            return None
    return r, c


@dataclass
class GridQuery:
    start: tuple
    directions: tuple
    answer: tuple

    @property
    def length(self) -> int:
        return len(self.directions)


@dataclass
class GridWorld:
    spec: GridSpec
    triples: list
    train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)

    def vocab(self) -> Vocab:
        """Entities in row-major cell order, relations in direction order."""
        v = Vocab()
        for r in range(self.spec.size):
            for c in range(self.spec.size):
                v.add_entity(cell_name(r, c))
        for d in self.spec.directions:
            v.add_relation(d)
        return v

    def kb_triples(self, vocab: Vocab) -> list[Triple]:
        return [Triple(vocab.entity(s), vocab.relation(r), vocab.entity(o)) for s, r, o in self.triples]

    def to_queries(self, vocab: Vocab, split: str) -> dict:
        """``{class label: [Query]}`` with direction-sequence payloads."""
        groups = self.train if split == "train" else self.test
        out = {}
        for label, items in groups.items():
            out[label] = [
                Query(vocab.entity(cell_name(*q.start)), PAD, vocab.entity(cell_name(*q.answer)),
                      directions=tuple(vocab.relation(d) for d in q.directions))
                for q in items
            ]
        return out


def grid_triples(spec: GridSpec) -> list[tuple[str, str, str]]:
    out = []
    for r in range(spec.size):
        for c in range(spec.size):
            for d in spec.directions:
                end = walk((r, c), (d,), spec.size)
                if end is not None:
                    out.append((cell_name(r, c), d, cell_name(*end)))
    return out


def generate(spec: GridSpec) -> GridWorld:
    """Sample queries per length class and split them into disjoint train/test sets.

    Lengths are drawn uniformly within each class, starts uniformly over cells
    and directions uniformly; walks that leave the grid are resampled, as are
    duplicate ``(start, sequence)`` pairs.
    """
    if spec.max_length > 0 and spec.size < 2:
        raise GenerationError("grid too small for any walk")
    rng = np.random.default_rng(spec.seed)
    dirs = list(spec.directions)
    train, test = {}, {}
    for lo, hi in spec.length_classes:
        label = class_label(lo, hi, spec.length_classes)
        seen = set()
        items = []
        attempts = 0
        limit = 1000 * spec.queries_per_class + 10_000
        while len(items) < spec.queries_per_class:
            attempts += 1
            if attempts > limit:
                raise GenerationError(f"could not sample {spec.queries_per_class} distinct queries of length {lo}-{hi}")
            n = int(rng.integers(lo, hi + 1))
            start = (int(rng.integers(spec.size)), int(rng.integers(spec.size)))
            seq = tuple(dirs[i] for i in rng.integers(len(dirs), size=n))
            end = walk(start, seq, spec.size)
            if end is None or (start, seq) in seen:
                continue
            seen.add((start, seq))
            items.append(GridQuery(start, seq, end))
        n_test = max(1, int(round(spec.test_fraction * len(items))))
        test[label] = items[:n_test]
        train[label] = items[n_test:]
    return GridWorld(spec, grid_triples(spec), train, test)


def write_gridworld(world: GridWorld, out_dir) -> None:
    """Emit ``train.txt`` (the KB), ``queries_train.tsv`` and ``queries_test.tsv``.

    Query lines read ``start<TAB>dir1,dir2,...<TAB>answer``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{s}\t{r}\t{o}\n" for s, r, o in world.triples)
    for split, groups in (("train", world.train), ("test", world.test)):
        with open(out / f"queries_{split}.tsv", "w", encoding="utf-8") as fh:
            for items in groups.values():
                for q in items:
                    fh.write(f"{cell_name(*q.start)}\t{','.join(q.directions)}\t{cell_name(*q.answer)}\n")


def read_queries(path, classes=DEFAULT_CLASSES) -> dict:
    """Parse a query file back into ``{class label: [GridQuery]}``."""
    groups = {class_label(lo, hi, classes): [] for lo, hi in classes}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GenerationError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            q = GridQuery(parse_cell(parts[0]), tuple(parts[1].split(",")), parse_cell(parts[2]))
            for lo, hi in classes:
                if lo <= q.length <= hi:
                    groups[class_label(lo, hi, classes)].append(q)
                    break
    return groups


def run_gridworld_experiment(spec: GridSpec, hp, config=None, eval_beam_width: int = 1, log_path=None,
                             progress_every: int = 0) -> dict:
    """Train an agent on the grid queries and report test accuracy per length class.

    ``hp`` is a :class:`kgwalk.trainer.HyperParams` whose horizon must cover the
    longest query; ``config`` is a :class:`kgwalk.policy.PolicyConfig` and is
    forced into direction-sequence query mode.
    """
    from dataclasses import replace

    from .evaluation import gridworld_accuracy
    from .kg import build_graph
    from .policy import Policy, PolicyConfig
    from .trainer import train

    if hp.horizon < spec.max_length:
        raise GenerationError(f"horizon {hp.horizon} is shorter than the longest query ({spec.max_length})")
    world = generate(spec)
    vocab = world.vocab()
    graph = build_graph(world.kb_triples(vocab), vocab.num_entities, cap=None)
    cfg = replace(config or PolicyConfig(), query_mode="directions")
    policy = Policy(vocab.num_entities, vocab.num_relations, cfg, seed=hp.seed)
    train_groups = world.to_queries(vocab, "train")
    test_groups = world.to_queries(vocab, "test")
    train_queries = [q for items in train_groups.values() for q in items]
    t0 = time.perf_counter()
    result = train(policy, graph, train_queries, hp, log_path=log_path, progress_every=progress_every)
    policy.load_state_dict(result.best_params)
    acc = gridworld_accuracy(policy, graph, test_groups, hp.horizon, beam_width=eval_beam_width)
    acc["train_seconds"] = time.perf_counter() - t0
    return {"accuracy": acc, "policy": policy, "world": world, "vocab": vocab, "graph": graph}
