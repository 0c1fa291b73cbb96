"""Dataset directory layout: graph files, seed file and feature files.

A dataset directory holds, per side ``k`` in {1, 2}::

    ent_ids_k        entity names, one per line
    triples_k        head_id<TAB>relation_name<TAB>tail_id
    attrs_k          entity_id<TAB>attribute_name<TAB>value
    text_rel_k.txt   exported relation-text features   (optional)
    text_attr_k.txt  exported attribute-text features  (optional)
    visual_k.txt     exported visual features          (optional, may be partial)
    ref_ent_ids      full seed inventory, src_id<TAB>tgt_id

When a text feature file is missing, the deterministic hash encoder is applied
to each entity's serialized triple names.  When a visual file is missing or
partial, absent entities get the mean vector and a ``False`` presence flag.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .features import (
    ModalFeatureBundle,
    bow_features,
    build_bow_vocab,
    impute_missing_visual,
    load_feature_file,
    save_feature_file,
    text_features_or_stub,
)
from .kg import (
    KnowledgeGraph,
    MMKGPair,
    SeedAlignmentSet,
    load_kg,
    load_seeds,
    write_kg,
    write_seeds,
)


def _peek_dim(path: Path) -> int:
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
    if len(header) != 2:
        raise FormatError(f"{path}:1: header must be 'count dim'")
    return int(header[1])


def save_dataset(directory: str | Path, pair: MMKGPair,
                 bundles: tuple[ModalFeatureBundle, ModalFeatureBundle]) -> None:
    """Write both graphs, the full seed inventory and the text/visual features.

    Bag-of-words features are not stored; they are rebuilt from the triples at
    load time.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, (kg, bundle) in enumerate(zip((pair.source, pair.target), bundles), start=1):
        write_kg(kg, directory / f"triples_{k}", directory / f"attrs_{k}", directory / f"ent_ids_{k}")
        for name, matrix in (("text_rel", bundle.text_rel), ("text_attr", bundle.text_attr)):
            feats = {i: matrix[i] for i in range(kg.n_entities)}
            save_feature_file(directory / f"{name}_{k}.txt", feats, matrix.shape[1])
        visual = {i: bundle.visual[i] for i in range(kg.n_entities) if bundle.visual_present[i]}
        save_feature_file(directory / f"visual_{k}.txt", visual, bundle.visual.shape[1])
    all_pairs = tuple(sorted(set(pair.train_seeds.pairs) | set(pair.test_seeds.pairs)))
    write_seeds(SeedAlignmentSet(pairs=all_pairs, role="train"), directory / "ref_ent_ids")


def load_dataset(
    directory: str | Path,
    bow_rel_size: int = 1000,
    bow_attr_size: int = 1000,
    text_dim: int = 64,
    visual_dim: int = 64,
    stub_seed: int = 0,
) -> tuple[MMKGPair, tuple[ModalFeatureBundle, ModalFeatureBundle]]:
    """Load a dataset directory into a pair (full seeds as train, empty test)
    plus per-side feature bundles."""
    directory = Path(directory)
    kgs: list[KnowledgeGraph] = []
    for k in (1, 2):
        for stem in (f"triples_{k}", f"attrs_{k}", f"ent_ids_{k}"):
            if not (directory / stem).exists():
                raise FileNotFoundError(f"missing dataset file: {directory / stem}")
        kgs.append(load_kg(directory / f"triples_{k}", directory / f"attrs_{k}",
                           directory / f"ent_ids_{k}"))
    source, target = kgs
    seeds = load_seeds(directory / "ref_ent_ids", source, target, role="train")
    pair = MMKGPair(source=source, target=target, train_seeds=seeds,
                    test_seeds=SeedAlignmentSet(pairs=(), role="test"))

    vocab_rel = build_bow_vocab(pair, "relation", bow_rel_size)
    vocab_attr = build_bow_vocab(pair, "attribute", bow_attr_size)

    text_paths = [(directory / f"text_rel_{k}.txt", directory / f"text_attr_{k}.txt") for k in (1, 2)]
    existing = [p for pths in text_paths for p in pths if p.exists()]
    t_dim = _peek_dim(existing[0]) if existing else text_dim
    for p in existing:
        if _peek_dim(p) != t_dim:
            raise ValidationError(f"{p}: text feature dim {_peek_dim(p)} differs from {t_dim}")

    visual_paths = [directory / f"visual_{k}.txt" for k in (1, 2)]
    v_existing = [p for p in visual_paths if p.exists()]
    v_dim = _peek_dim(v_existing[0]) if v_existing else visual_dim
    for p in v_existing:
        if _peek_dim(p) != v_dim:
            raise ValidationError(f"{p}: visual feature dim {_peek_dim(p)} differs from {v_dim}")

    bundles = []
    for k, kg in ((1, source), (2, target)):
        rel_path, attr_path = text_paths[k - 1]
        visual_map = load_feature_file(visual_paths[k - 1], v_dim) if visual_paths[k - 1].exists() else {}
        visual, present = impute_missing_visual(visual_map, kg.n_entities, v_dim)
        bundles.append(ModalFeatureBundle(
            bow_rel=bow_features(kg, vocab_rel),
            bow_attr=bow_features(kg, vocab_attr),
            text_rel=text_features_or_stub(kg, "relation", rel_path, t_dim, stub_seed),
            text_attr=text_features_or_stub(kg, "attribute", attr_path, t_dim, stub_seed),
            visual=visual,
            visual_present=present,
        ))
    return pair, (bundles[0], bundles[1])
