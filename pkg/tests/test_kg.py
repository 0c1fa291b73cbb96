import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmalign.errors import ParseError, ValidationError
from mmalign.kg import (KnowledgeGraph, MMKGPair, SeedAlignmentSet, build_adjacency, load_kg,
                        load_seeds, split_seeds, write_kg, write_seeds)


def make_kg(n=4):
    return KnowledgeGraph(
        entities=tuple(f"e{i}" for i in range(n)),
        relations=("born_in", "works_at"),
        attributes=("height",),
        relation_triples=((0, 0, 1), (2, 1, 3), (1, 0, 2)),
        attribute_triples=((0, 0, "1.75"), (3, 0, "1.60")),
    )


class TestKnowledgeGraph:
    def test_bounds_validation(self):
        with pytest.raises(ValidationError):
            KnowledgeGraph(entities=("a",), relations=("r",), attributes=(),
                           relation_triples=((0, 0, 5),), attribute_triples=())
        with pytest.raises(ValidationError):
            KnowledgeGraph(entities=("a", "b"), relations=("r",), attributes=(),
                           relation_triples=((0, 3, 1),), attribute_triples=())
        with pytest.raises(ValidationError):
            KnowledgeGraph(entities=("a",), relations=(), attributes=("x",),
                           relation_triples=(), attribute_triples=((0, 1, "v"),))

    def test_roundtrip_is_byte_exact(self, tmp_path):
        kg = make_kg()
        paths = (tmp_path / "triples", tmp_path / "attrs", tmp_path / "ents")
        write_kg(kg, *paths)
        loaded = load_kg(*paths)
        write_kg(loaded, tmp_path / "t2", tmp_path / "a2", tmp_path / "e2")
        assert (tmp_path / "t2").read_bytes() == paths[0].read_bytes()
        assert (tmp_path / "a2").read_bytes() == paths[1].read_bytes()
        assert (tmp_path / "e2").read_bytes() == paths[2].read_bytes()
        assert loaded.entities == kg.entities
        assert sorted(loaded.relation_triples) == sorted(
            (h, loaded.relations.index(kg.relations[r]), t) for h, r, t in kg.relation_triples)

    def test_parse_error_names_file_and_line(self, tmp_path):
        (tmp_path / "ents").write_text("a\nb\n")
        (tmp_path / "attrs").write_text("")
        (tmp_path / "triples").write_text("0\tr\t1\n0\tr\n")
        with pytest.raises(ParseError, match=r"triples:2"):
            load_kg(tmp_path / "triples", tmp_path / "attrs", tmp_path / "ents")

    def test_non_integer_entity_id(self, tmp_path):
        (tmp_path / "ents").write_text("a\nb\n")
        (tmp_path / "attrs").write_text("")
        (tmp_path / "triples").write_text("zero\tr\t1\n")
        with pytest.raises(ParseError, match=r"triples:1"):
            load_kg(tmp_path / "triples", tmp_path / "attrs", tmp_path / "ents")

    def test_out_of_range_entity_id(self, tmp_path):
        (tmp_path / "ents").write_text("a\nb\n")
        (tmp_path / "attrs").write_text("")
        (tmp_path / "triples").write_text("0\tr\t7\n")
        with pytest.raises(ValidationError):
            load_kg(tmp_path / "triples", tmp_path / "attrs", tmp_path / "ents")

    def test_relation_vocab_first_appearance_order(self, tmp_path):
        (tmp_path / "ents").write_text("a\nb\nc\n")
        (tmp_path / "attrs").write_text("")
        (tmp_path / "triples").write_text("0\tzeta\t1\n1\talpha\t2\n2\tzeta\t0\n")
        kg = load_kg(tmp_path / "triples", tmp_path / "attrs", tmp_path / "ents")
        assert kg.relations == ("zeta", "alpha")


class TestSeeds:
    def test_one_to_one_enforced(self):
        with pytest.raises(ValidationError):
            SeedAlignmentSet(pairs=((0, 1), (0, 2)))
        with pytest.raises(ValidationError):
            SeedAlignmentSet(pairs=((0, 1), (2, 1)))

    def test_roundtrip(self, tmp_path):
        kg = make_kg()
        seeds = SeedAlignmentSet(pairs=((0, 3), (2, 1)))
        write_seeds(seeds, tmp_path / "ref")
        loaded = load_seeds(tmp_path / "ref", kg, kg)
        assert set(loaded.pairs) == {(0, 3), (2, 1)}

    def test_load_rejects_out_of_range(self, tmp_path):
        kg = make_kg()
        (tmp_path / "ref").write_text("0\t9\n")
        with pytest.raises(ValidationError):
            load_seeds(tmp_path / "ref", kg, kg)

    def test_pair_overlap_rejected(self):
        kg = make_kg()
        train = SeedAlignmentSet(pairs=((0, 0),), role="train")
        test = SeedAlignmentSet(pairs=((0, 1),), role="test")
        with pytest.raises(ValidationError):
            MMKGPair(kg, kg, train, test)


class TestSplitSeeds:
    @given(n=st.integers(min_value=2, max_value=60),
           frac=st.floats(min_value=0.05, max_value=0.95),
           seed=st.integers(min_value=0, max_value=10))
    @settings(max_examples=60, deadline=None)
    def test_split_sizes_and_partition(self, n, frac, seed):
        seeds = SeedAlignmentSet(pairs=tuple((i, i) for i in range(n)))
        train, test = split_seeds(seeds, frac, seed)
        assert len(train.pairs) == int(math.floor(frac * n + 0.5))
        assert len(train.pairs) + len(test.pairs) == n
        assert set(train.pairs) | set(test.pairs) == set(seeds.pairs)
        assert not set(train.pairs) & set(test.pairs)
        assert train.role == "train" and test.role == "test"

    def test_deterministic_and_seed_sensitive(self):
        seeds = SeedAlignmentSet(pairs=tuple((i, 99 - i) for i in range(50)))
        a1 = split_seeds(seeds, 0.3, 7)
        a2 = split_seeds(seeds, 0.3, 7)
        b = split_seeds(seeds, 0.3, 8)
        assert a1[0].pairs == a2[0].pairs
        assert a1[0].pairs != b[0].pairs

    def test_pairs_sorted_canonically(self):
        seeds = SeedAlignmentSet(pairs=tuple((i, 99 - i) for i in range(20)))
        train, test = split_seeds(seeds, 0.4, 3)
        assert list(train.pairs) == sorted(train.pairs)
        assert list(test.pairs) == sorted(test.pairs)


class TestAdjacency:
    def test_self_loops_and_symmetry(self):
        kg = make_kg()
        adj = build_adjacency(kg)
        row, col = adj.edge_arrays()
        edges = set(zip(row.tolist(), col.tolist()))
        for i in range(kg.n_entities):
            assert (i, i) in edges
        for i, j in edges:
            assert (j, i) in edges

    def test_canonical_order_and_dedup(self):
        kg = KnowledgeGraph(
            entities=("a", "b"), relations=("r", "s"), attributes=(),
            relation_triples=((0, 0, 1), (0, 1, 1), (1, 0, 0)),
            attribute_triples=())
        row, col = build_adjacency(kg).edge_arrays()
        pairs = list(zip(row.tolist(), col.tolist()))
        assert pairs == sorted(set(pairs))
        assert pairs == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_edge_arrays_dtype(self):
        row, col = build_adjacency(make_kg()).edge_arrays()
        assert row.dtype == np.int64 and col.dtype == np.int64
