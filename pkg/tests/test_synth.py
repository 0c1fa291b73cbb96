import math

import numpy as np
import pytest

from mmalign.dataset import load_dataset, save_dataset
from mmalign.kg import build_adjacency
from mmalign.synth import generate_synthetic_pair


class TestGenerator:
    def test_deterministic(self):
        a_pair, a_bundles = generate_synthetic_pair(30, 5, 4, 16, 0.3, 42)
        b_pair, b_bundles = generate_synthetic_pair(30, 5, 4, 16, 0.3, 42)
        assert a_pair.source.relation_triples == b_pair.source.relation_triples
        assert a_pair.target.relation_triples == b_pair.target.relation_triples
        assert a_pair.train_seeds.pairs == b_pair.train_seeds.pairs
        for name in ("bow_rel", "bow_attr", "text_rel", "text_attr", "visual"):
            assert np.array_equal(getattr(a_bundles[1], name), getattr(b_bundles[1], name))

    def test_seed_changes_output(self):
        a, _ = generate_synthetic_pair(30, 5, 4, 16, 0.0, 0)
        b, _ = generate_synthetic_pair(30, 5, 4, 16, 0.0, 1)
        assert a.train_seeds.pairs != b.train_seeds.pairs

    def test_full_permutation_ground_truth(self):
        pair, _ = generate_synthetic_pair(25, 5, 4, 8, 0.2, 3)
        assert len(pair.train_seeds.pairs) == 25
        assert sorted(s for s, _ in pair.train_seeds.pairs) == list(range(25))
        assert sorted(t for _, t in pair.train_seeds.pairs) == list(range(25))
        assert pair.test_seeds.pairs == ()

    def test_zero_noise_is_verbatim_permuted_copy(self):
        pair, (bs, bt) = generate_synthetic_pair(20, 4, 3, 8, 0.0, 7)
        perm = {s: t for s, t in pair.train_seeds.pairs}
        expected = sorted((perm[h], r, perm[t]) for h, r, t in pair.source.relation_triples)
        assert list(pair.target.relation_triples) == expected
        expected_attrs = sorted((perm[e], a, v) for e, a, v in pair.source.attribute_triples)
        assert list(pair.target.attribute_triples) == expected_attrs
        for name in ("text_rel", "text_attr", "visual"):
            src, tgt = getattr(bs, name), getattr(bt, name)
            for s, t in pair.train_seeds.pairs:
                assert np.array_equal(src[s], tgt[t]), name

    def test_zero_noise_bow_matches_under_permutation(self):
        pair, (bs, bt) = generate_synthetic_pair(20, 4, 3, 8, 0.0, 7)
        for s, t in pair.train_seeds.pairs:
            assert np.array_equal(bs.bow_rel[s], bt.bow_rel[t])
            assert np.array_equal(bs.bow_attr[s], bt.bow_attr[t])

    def test_noise_perturbs_bounded_triple_count(self):
        pair, _ = generate_synthetic_pair(40, 6, 4, 8, 0.3, 1)
        perm = {s: t for s, t in pair.train_seeds.pairs}
        permuted = sorted((perm[h], r, perm[t]) for h, r, t in pair.source.relation_triples)
        from collections import Counter
        differing = sum((Counter(permuted) - Counter(pair.target.relation_triples)).values())
        budget = int(math.floor(0.3 * len(permuted)))
        assert 0 < differing <= budget

    def test_graph_connected(self):
        pair, _ = generate_synthetic_pair(50, 6, 4, 8, 0.5, 5)
        for kg in (pair.source, pair.target):
            row, col = build_adjacency(kg).edge_arrays()
            neighbors: dict[int, set[int]] = {}
            for a, b in zip(row.tolist(), col.tolist()):
                neighbors.setdefault(a, set()).add(b)
            seen, frontier = {0}, [0]
            while frontier:
                frontier = [n for cur in frontier for n in neighbors[cur] if n not in seen]
                seen.update(frontier)
            assert len(seen) == kg.n_entities

    def test_features_unit_norm(self):
        _, (bs, bt) = generate_synthetic_pair(20, 4, 3, 8, 0.4, 2)
        for b in (bs, bt):
            for name in ("text_rel", "text_attr", "visual"):
                norms = np.linalg.norm(getattr(b, name), axis=1)
                assert np.allclose(norms, 1.0)
            assert b.visual_present.all()

    @pytest.mark.parametrize("kwargs", [
        dict(n_entities=3), dict(n_relations=0), dict(structure_noise=1.5),
        dict(structure_noise=-0.1), dict(feature_dim=0),
    ])
    def test_invalid_arguments(self, kwargs):
        args = dict(n_entities=10, n_relations=3, n_attributes=2, feature_dim=8,
                    structure_noise=0.0, rng_seed=0)
        args.update(kwargs)
        with pytest.raises(ValueError):
            generate_synthetic_pair(**args)


class TestDatasetRoundtrip:
    @staticmethod
    def _named_triples(kg):
        return sorted((h, kg.relations[r], t) for h, r, t in kg.relation_triples)

    @staticmethod
    def _named_attrs(kg):
        return sorted((e, kg.attributes[a], v) for e, a, v in kg.attribute_triples)

    def test_save_load_roundtrip(self, tmp_path):
        pair, bundles = generate_synthetic_pair(20, 4, 3, 8, 0.2, 9)
        save_dataset(tmp_path, pair, bundles)
        loaded_pair, loaded_bundles = load_dataset(
            tmp_path, bow_rel_size=4, bow_attr_size=3, text_dim=8, visual_dim=8)
        # relation/attribute indices may be re-assigned on load; compare by name
        assert self._named_triples(loaded_pair.source) == self._named_triples(pair.source)
        assert self._named_attrs(loaded_pair.target) == self._named_attrs(pair.target)
        assert set(loaded_pair.train_seeds.pairs) == set(pair.train_seeds.pairs)
        for k in (0, 1):
            for name in ("bow_rel", "bow_attr", "text_rel", "text_attr", "visual"):
                assert np.array_equal(getattr(loaded_bundles[k], name),
                                      getattr(bundles[k], name)), (k, name)
            assert loaded_bundles[k].visual_present.all()

    def test_bow_size_independent_when_vocab_small(self, tmp_path):
        pair, bundles = generate_synthetic_pair(20, 4, 3, 8, 0.0, 9)
        save_dataset(tmp_path, pair, bundles)
        _, wide = load_dataset(tmp_path, bow_rel_size=100, bow_attr_size=100,
                               text_dim=8, visual_dim=8)
        assert np.array_equal(wide[0].bow_rel, bundles[0].bow_rel)

    def test_missing_visual_file_imputed(self, tmp_path):
        pair, bundles = generate_synthetic_pair(20, 4, 3, 8, 0.0, 9)
        save_dataset(tmp_path, pair, bundles)
        (tmp_path / "visual_2.txt").unlink()
        _, loaded = load_dataset(tmp_path, bow_rel_size=4, bow_attr_size=3,
                                 text_dim=8, visual_dim=8)
        assert not loaded[1].visual_present.any()
        assert np.array_equal(loaded[1].visual, np.zeros_like(loaded[1].visual))

    def test_missing_text_file_falls_back_to_stub(self, tmp_path):
        pair, bundles = generate_synthetic_pair(20, 4, 3, 8, 0.0, 9)
        save_dataset(tmp_path, pair, bundles)
        (tmp_path / "text_rel_1.txt").unlink()
        _, loaded = load_dataset(tmp_path, bow_rel_size=4, bow_attr_size=3,
                                 text_dim=8, visual_dim=8, stub_seed=5)
        assert loaded[0].text_rel.shape == (20, 8)
        assert not np.array_equal(loaded[0].text_rel, bundles[0].text_rel)
        _, again = load_dataset(tmp_path, bow_rel_size=4, bow_attr_size=3,
                                text_dim=8, visual_dim=8, stub_seed=5)
        assert np.array_equal(loaded[0].text_rel, again[0].text_rel)
