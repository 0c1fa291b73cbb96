"""Data model and file ingestion for paired multi-modal knowledge graphs.

A graph is a set of entities with relation triples ``(head, relation, tail)``
and attribute triples ``(entity, attribute, value)``.  Two graphs plus seed
alignments form an alignment task.  All containers are immutable after
construction and safe to share across threads.

File formats (UTF-8, LF line endings):

* entity list: one entity name per line, line number = dense entity index
* relation triples: ``head_id<TAB>relation_name<TAB>tail_id``
* attribute triples: ``entity_id<TAB>attribute_name<TAB>value``
* seed alignments: ``source_id<TAB>target_id``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ParseError, ValidationError


class GraphSide(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class EntityId(NamedTuple):
    """Reference to an entity in one side of an aligned graph pair."""

    side: GraphSide
    index: int


@dataclass(frozen=True)
class KnowledgeGraph:
    """One knowledge graph with dense integer indexing.

    ``relation_triples`` holds ``(head, relation, tail)`` index triples and
    ``attribute_triples`` holds ``(entity, attribute, value)`` with the value
    kept as a raw string.  ``image_ref`` optionally maps an entity index to a
    key in an external visual-feature file.
    """

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    attributes: tuple[str, ...]
    relation_triples: tuple[tuple[int, int, int], ...]
    attribute_triples: tuple[tuple[int, int, str], ...]
    image_ref: dict[int, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "relation_triples", tuple(tuple(t) for t in self.relation_triples))
        object.__setattr__(self, "attribute_triples", tuple(tuple(t) for t in self.attribute_triples))
        n = len(self.entities)
        for h, r, t in self.relation_triples:
            if not (0 <= h < n and 0 <= t < n):
                raise ValidationError(f"triple endpoint out of range: ({h}, {r}, {t}) with {n} entities")
            if not 0 <= r < len(self.relations):
                raise ValidationError(f"relation index {r} out of range ({len(self.relations)} relations)")
        for e, a, _ in self.attribute_triples:
            if not 0 <= e < n:
                raise ValidationError(f"attribute entity {e} out of range ({n} entities)")
            if not 0 <= a < len(self.attributes):
                raise ValidationError(f"attribute index {a} out of range ({len(self.attributes)} attributes)")

    @property
    def n_entities(self) -> int:
        return len(self.entities)


@dataclass(frozen=True)
class SeedAlignmentSet:
    """A 1-to-1 set of aligned ``(source_index, target_index)`` pairs."""

    pairs: tuple[tuple[int, int], ...]
    role: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        if self.role not in ("train", "test"):
            raise ValidationError(f"seed role must be 'train' or 'test', got {self.role!r}")
        src = [s for s, _ in self.pairs]
        tgt = [t for _, t in self.pairs]
        if len(set(src)) != len(src):
            raise ValidationError("seed set is not 1-to-1: a source entity appears twice")
        if len(set(tgt)) != len(tgt):
            raise ValidationError("seed set is not 1-to-1: a target entity appears twice")

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[int]:
        return [s for s, _ in self.pairs]

    def targets(self) -> list[int]:
        return [t for _, t in self.pairs]


@dataclass(frozen=True)
class MMKGPair:
    """A source/target graph pair with disjoint train and test seed sets."""

    source: KnowledgeGraph
    target: KnowledgeGraph
    train_seeds: SeedAlignmentSet
    test_seeds: SeedAlignmentSet

    def __post_init__(self):
        train_src = set(self.train_seeds.sources())
        train_tgt = set(self.train_seeds.targets())
        for s, t in self.test_seeds.pairs:
            if s in train_src or t in train_tgt:
                raise ValidationError(f"test seed ({s}, {t}) overlaps a train seed entity")
        for seeds in (self.train_seeds, self.test_seeds):
            for s, t in seeds.pairs:
                if not 0 <= s < self.source.n_entities:
                    raise ValidationError(f"seed source {s} out of range")
                if not 0 <= t < self.target.n_entities:
                    raise ValidationError(f"seed target {t} out of range")


@dataclass(frozen=True)
class Adjacency:
    """Undirected neighbor lists over relation-triple endpoints, with self-loops.

    ``neighbors[i]`` is sorted and always contains ``i`` itself, so every node
    has at least one incoming message in attention aggregation.
    """

    neighbors: tuple[tuple[int, ...], ...]
    self_loops: bool = True

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Flatten to (center, neighbor) index arrays in canonical order."""
        row = np.concatenate([np.full(len(ns), i, dtype=np.int64) for i, ns in enumerate(self.neighbors)]) \
            if self.neighbors else np.zeros(0, dtype=np.int64)
        col = np.concatenate([np.asarray(ns, dtype=np.int64) for ns in self.neighbors]) \
            if self.neighbors else np.zeros(0, dtype=np.int64)
        return row, col


def _read_lines(path: Path) -> list[str]:
    text = path.read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    return text.split("\n") if text else []


def _parse_entity_index(token: str, n_entities: int, path: Path, lineno: int) -> int:
    try:
        idx = int(token)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: entity id {token!r} is not an integer") from None
    if not 0 <= idx < n_entities:
        raise ValidationError(f"{path}:{lineno}: entity id {idx} out of range (graph has {n_entities} entities)")
    return idx


def load_kg(triples_path: str | Path, attr_path: str | Path, entity_list_path: str | Path) -> KnowledgeGraph:
    """Load one graph from an entity list, a relation-triple file and an attribute file.

    Relation and attribute vocabularies are indexed in first-appearance order,
    so reloading a written graph reproduces the same indices.
    """
    triples_path, attr_path, entity_list_path = Path(triples_path), Path(attr_path), Path(entity_list_path)
    entities = _read_lines(entity_list_path)
    n = len(entities)

    relations: list[str] = []
    rel_index: dict[str, int] = {}
    relation_triples: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(_read_lines(triples_path), start=1):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"{triples_path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        head = _parse_entity_index(fields[0], n, triples_path, lineno)
        tail = _parse_entity_index(fields[2], n, triples_path, lineno)
        name = fields[1]
        if name not in rel_index:
            rel_index[name] = len(relations)
            relations.append(name)
        relation_triples.append((head, rel_index[name], tail))

    attributes: list[str] = []
    attr_index: dict[str, int] = {}
    attribute_triples: list[tuple[int, int, str]] = []
    for lineno, line in enumerate(_read_lines(attr_path), start=1):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"{attr_path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        ent = _parse_entity_index(fields[0], n, attr_path, lineno)
        name = fields[1]
        if name not in attr_index:
            attr_index[name] = len(attributes)
            attributes.append(name)
        attribute_triples.append((ent, attr_index[name], fields[2]))

    return KnowledgeGraph(
        entities=tuple(entities),
        relations=tuple(relations),
        attributes=tuple(attributes),
        relation_triples=tuple(relation_triples),
        attribute_triples=tuple(attribute_triples),
    )


def write_kg(kg: KnowledgeGraph, triples_path: str | Path, attr_path: str | Path,
             entity_list_path: str | Path) -> None:
    """Write a graph in the canonical on-disk form (round-trips byte-identically)."""
    Path(entity_list_path).write_text("".join(f"{e}\n" for e in kg.entities), encoding="utf-8")
    Path(triples_path).write_text(
        "".join(f"{h}\t{kg.relations[r]}\t{t}\n" for h, r, t in kg.relation_triples), encoding="utf-8")
    Path(attr_path).write_text(
        "".join(f"{e}\t{kg.attributes[a]}\t{v}\n" for e, a, v in kg.attribute_triples), encoding="utf-8")


def load_seeds(path: str | Path, src: KnowledgeGraph, tgt: KnowledgeGraph,
               role: str = "train") -> SeedAlignmentSet:
    """Load ``source_id<TAB>target_id`` alignment pairs and validate 1-to-1-ness."""
    path = Path(path)
    pairs: list[tuple[int, int]] = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        s = _parse_entity_index(fields[0], src.n_entities, path, lineno)
        t = _parse_entity_index(fields[1], tgt.n_entities, path, lineno)
        pairs.append((s, t))
    return SeedAlignmentSet(pairs=tuple(pairs), role=role)


def write_seeds(seeds: SeedAlignmentSet, path: str | Path) -> None:
    Path(path).write_text("".join(f"{s}\t{t}\n" for s, t in seeds.pairs), encoding="utf-8")


def split_seeds(seeds: SeedAlignmentSet, train_fraction: float,
                rng_seed: int) -> tuple[SeedAlignmentSet, SeedAlignmentSet]:
    """Partition seeds into train/test deterministically.

    The pairs are canonically sorted before shuffling so the split does not
    depend on file ordering.  ``|train| = round(train_fraction * |seeds|)``
    with arithmetic (half-up) rounding.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(seeds) < 2:
        raise ValueError(f"need at least 2 seeds to split, got {len(seeds)}")
    ordered = sorted(seeds.pairs)
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(len(ordered))
    n_train = int(math.floor(train_fraction * len(ordered) + 0.5))
    train = tuple(ordered[i] for i in sorted(perm[:n_train]))
    test = tuple(ordered[i] for i in sorted(perm[n_train:]))
    return (SeedAlignmentSet(pairs=train, role="train"),
            SeedAlignmentSet(pairs=test, role="test"))


def build_adjacency(kg: KnowledgeGraph) -> Adjacency:
    """Symmetrize relation-triple endpoints into neighbor lists with self-loops."""
    neigh: list[set[int]] = [{i} for i in range(kg.n_entities)]
    for h, _, t in kg.relation_triples:
        neigh[h].add(t)
        neigh[t].add(h)
    return Adjacency(neighbors=tuple(tuple(sorted(ns)) for ns in neigh))
