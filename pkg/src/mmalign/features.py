"""Per-entity raw modality features.

Four kinds of inputs feed the encoders:

* bag-of-words count vectors over the most frequent relation / attribute names,
* text-model feature vectors, ingested from files exported offline (a
  deterministic hash-based stand-in encoder is provided for tests and for
  datasets without exported features),
* visual feature vectors, ingested from files, with mean imputation for
  entities that have no image,
* presence flags for the visual modality.

Feature files are plain text: first line ``count dim``, then ``count`` lines
``entity_id f1 ... fdim`` (space-separated decimal floats).
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .kg import KnowledgeGraph, MMKGPair


@dataclass(frozen=True)
class BowVocabulary:
    """Top-N relation or attribute names by triple frequency over both graphs.

    Names are ordered by descending count, ties broken lexicographically.
    """

    kind: str
    names: tuple[str, ...]
    size_limit: int

    def __post_init__(self):
        if self.kind not in ("relation", "attribute"):
            raise ValidationError(f"vocabulary kind must be 'relation' or 'attribute', got {self.kind!r}")
        if len(self.names) > self.size_limit:
            raise ValidationError("vocabulary exceeds its size limit")

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class ModalFeatureBundle:
    """All raw per-entity feature arrays for one graph.

    Rows are indexed by dense entity index; every array shares the graph's
    entity count.  ``visual_present`` marks entities whose visual vector came
    from a file rather than imputation.
    """

    bow_rel: np.ndarray
    bow_attr: np.ndarray
    text_rel: np.ndarray
    text_attr: np.ndarray
    visual: np.ndarray
    visual_present: np.ndarray

    def __post_init__(self):
        n = self.bow_rel.shape[0]
        for name in ("bow_attr", "text_rel", "text_attr", "visual", "visual_present"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValidationError(f"{name} has {arr.shape[0]} rows, expected {n}")
        for name in ("text_rel", "text_attr", "visual"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"{name} contains non-finite values")

    @property
    def n_entities(self) -> int:
        return self.bow_rel.shape[0]


def build_bow_vocab(pair: MMKGPair, kind: str, n: int) -> BowVocabulary:
    """Count name usage over both graphs' triples and keep the top ``n``."""
    if n < 1:
        raise ValueError(f"vocabulary size must be >= 1, got {n}")
    counts: Counter[str] = Counter()
    for kg in (pair.source, pair.target):
        if kind == "relation":
            counts.update(kg.relations[r] for _, r, _ in kg.relation_triples)
        elif kind == "attribute":
            counts.update(kg.attributes[a] for _, a, _ in kg.attribute_triples)
        else:
            raise ValueError(f"unknown vocabulary kind {kind!r}")
    ranked = sorted(counts, key=lambda name: (-counts[name], name))
    return BowVocabulary(kind=kind, names=tuple(ranked[:n]), size_limit=n)


def bow_features(kg: KnowledgeGraph, vocab: BowVocabulary) -> np.ndarray:
    """Per-entity occurrence counts of vocabulary names.

    Relations count both head-side and tail-side occurrences; attributes count
    the entity as subject.  Out-of-vocabulary names are ignored.
    """
    index = {name: k for k, name in enumerate(vocab.names)}
    out = np.zeros((kg.n_entities, len(vocab.names)), dtype=np.float64)
    if vocab.kind == "relation":
        for h, r, t in kg.relation_triples:
            k = index.get(kg.relations[r])
            if k is not None:
                out[h, k] += 1.0
                out[t, k] += 1.0
    else:
        for e, a, _ in kg.attribute_triples:
            k = index.get(kg.attributes[a])
            if k is not None:
                out[e, k] += 1.0
    return out


def serialize_triples(kg: KnowledgeGraph, entity: int, kind: str) -> str:
    """The entity's relation (or attribute) names, deduplicated, sorted,
    space-joined — a deterministic word sequence for text encoders."""
    if not 0 <= entity < kg.n_entities:
        raise ValidationError(f"entity {entity} out of range")
    if kind == "relation":
        names = {kg.relations[r] for h, r, t in kg.relation_triples if h == entity or t == entity}
    elif kind == "attribute":
        names = {kg.attributes[a] for e, a, _ in kg.attribute_triples if e == entity}
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return " ".join(sorted(names))


def load_feature_file(path: str | Path, expected_dim: int) -> dict[int, np.ndarray]:
    """Read an ``entity_id -> vector`` map, checking the header and every row."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file, expected a 'count dim' header")
    header = lines[0].split()
    if len(header) != 2:
        raise FormatError(f"{path}:1: header must be 'count dim', got {lines[0]!r}")
    try:
        count, dim = int(header[0]), int(header[1])
    except ValueError:
        raise FormatError(f"{path}:1: header must hold two integers, got {lines[0]!r}") from None
    if dim != expected_dim:
        raise FormatError(f"{path}: feature dim {dim} does not match expected {expected_dim}")
    if len(lines) - 1 != count:
        raise FormatError(f"{path}: header declares {count} rows but file has {len(lines) - 1}")
    out: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != dim + 1:
            raise FormatError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(fields)}")
        try:
            ent = int(fields[0])
            vec = np.array([float(x) for x in fields[1:]], dtype=np.float64)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed number") from None
        if not np.isfinite(vec).all():
            raise ValidationError(f"{path}:{lineno}: non-finite feature value")
        if ent in out:
            raise ValidationError(f"{path}:{lineno}: duplicate entity id {ent}")
        out[ent] = vec
    return out


def save_feature_file(path: str | Path, features: dict[int, np.ndarray], dim: int) -> None:
    """Write the feature-file format with full float precision."""
    lines = [f"{len(features)} {dim}"]
    for ent in sorted(features):
        vec = features[ent]
        if vec.shape != (dim,):
            raise ValidationError(f"entity {ent} vector has shape {vec.shape}, expected ({dim},)")
        lines.append(f"{ent} " + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stub_text_encoder(text: str, dim: int, rng_seed: int) -> np.ndarray:
    """Deterministic unit-norm vector derived by hashing ``(rng_seed, text)``.

    A stand-in for offline text-model features: equal texts map to equal
    vectors, different texts to (near-orthogonal) pseudo-random directions.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    digest = hashlib.blake2b(f"{rng_seed}\x00{text}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


def impute_missing_visual(features: dict[int, np.ndarray], n_entities: int,
                          dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Fill absent entities with the mean of present vectors (zeros if none).

    Returns the complete ``(n_entities, dim)`` matrix and a boolean presence
    flag per entity.
    """
    out = np.zeros((n_entities, dim), dtype=np.float64)
    present = np.zeros(n_entities, dtype=bool)
    for ent, vec in features.items():
        if not 0 <= ent < n_entities:
            raise ValidationError(f"feature entity id {ent} out of range ({n_entities} entities)")
        out[ent] = vec
        present[ent] = True
    if present.any() and not present.all():
        out[~present] = out[present].mean(axis=0)
    return out, present


def text_features_or_stub(kg: KnowledgeGraph, kind: str, path: Path | None,
                          dim: int, rng_seed: int) -> np.ndarray:
    """Load exported text features when the file exists, else hash-encode the
    serialized triple names of every entity."""
    if path is not None and path.exists():
        feats = load_feature_file(path, dim)
        matrix, present = impute_missing_visual(feats, kg.n_entities, dim)
        if not present.all():
            missing = int((~present).sum())
            raise ValidationError(f"{path}: text features must cover all entities, {missing} missing")
        return matrix
    return np.stack([stub_text_encoder(serialize_triples(kg, e, kind), dim, rng_seed)
                     for e in range(kg.n_entities)])
